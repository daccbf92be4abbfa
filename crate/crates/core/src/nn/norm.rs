use crate::error::{ensure_shape, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Values saved by a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    training: bool,
}

/// Running mean and (biased) variance per channel.
#[derive(Debug, Clone, Copy)]
pub struct RunningStats<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
}

/// Per-channel normalization over `N x H x W`.
///
/// In training mode batch statistics are used and returned for the caller
/// to fold into its running averages; in eval mode `running` is applied.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running: RunningStats<'_, T>,
    training: bool,
) -> Result<(Tensor4<T>, BatchNormCache<T>, Option<(Vec<T>, Vec<T>)>)> {
    let s = x.shape();
    ensure_shape!(
        gamma.len() == s.c && beta.len() == s.c && running.mean.len() == s.c && running.var.len() == s.c,
        "batch-norm parameters do not match {} channels",
        s.c
    );
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let data = x.data();
    let mut means = vec![0.0f64; s.c];
    let mut vars = vec![0.0f64; s.c];
    if training {
        ensure_shape!(count > 0.0, "batch-norm on an empty batch");
        for c in 0..s.c {
            let mut sum = 0.0;
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                sum += data[base..base + plane].iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                sq += data[base..base + plane]
                    .iter()
                    .map(|v| (v.f64() - mean).powi(2))
                    .sum::<f64>();
            }
            means[c] = mean;
            vars[c] = sq / count;
        }
    } else {
        for c in 0..s.c {
            means[c] = running.mean[c].f64();
            vars[c] = running.var[c].f64();
        }
    }
    let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut y = x.clone();
    let mut xhat = vec![T::zero(); s.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let (m, is) = (means[c], inv_std[c]);
            let (g, b) = (gamma[c], beta[c]);
            for i in base..base + plane {
                let h = T::of((data[i].f64() - m) * is);
                xhat[i] = h;
                y.data_mut()[i] = g * h + b;
            }
        }
    }
    let stats = training.then(|| {
        (
            means.iter().map(|&v| T::of(v)).collect(),
            vars.iter().map(|&v| T::of(v)).collect(),
        )
    });
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            training,
        },
        stats,
    ))
}

/// Folds batch statistics into running averages.
pub fn update_running<T: Scalar>(running: &mut [T], batch: &[T]) {
    let keep = T::of(BN_MOMENTUM);
    let take = T::of(1.0 - BN_MOMENTUM);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = keep * *r + take * b;
    }
}

/// Accumulates `dL/dgamma`, `dL/dbeta`; returns `dL/dx`.
pub fn batchnorm_backward<T: Scalar>(
    grad_y: &Tensor4<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Result<Tensor4<T>> {
    let s = grad_y.shape();
    ensure_shape!(cache.xhat.len() == s.len(), "batch-norm cache does not match gradient {s}");
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let gy = grad_y.data();
    let mut gx = Tensor4::zeros(s);
    for c in 0..s.c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in base..base + plane {
                let g = gy[i].f64();
                sum_g += g;
                sum_gx += g * cache.xhat[i].f64();
            }
        }
        grad_gamma[c] += T::of(sum_gx);
        grad_beta[c] += T::of(sum_g);
        let scale = gamma[c].f64() * cache.inv_std[c];
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in base..base + plane {
                let g = gy[i].f64();
                let v = if cache.training {
                    scale * (g - sum_g / count - cache.xhat[i].f64() * sum_gx / count)
                } else {
                    scale * g
                };
                gx.data_mut()[i] = T::of(v);
            }
        }
    }
    Ok(gx)
}
