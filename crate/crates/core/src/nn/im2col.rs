//! Patch-matrix convolution engine shared by plain and conic convolutions.
//!
//! A [`PatchSource`] describes how the `rows = C_in * taps` input samples for
//! each output pixel are gathered (and, transposed, scattered back). The
//! engine tiles output pixels, gathers one `rows x tile` patch matrix per
//! tile and multiplies it by the `C_out x rows` weight matrix.
//!
//! Work is split into a partition that depends only on tensor shapes, never on
//! the worker count, and partial sums are reduced in partition order, so
//! results are bit-identical for any thread pool size.

use rayon::prelude::*;

use crate::scalar::{gemm, Scalar, Trans};

/// Output pixels per patch-matrix tile.
pub(crate) const TILE: usize = 256;

/// Upper bound on independent weight-gradient partial sums in backward.
const GRAD_GROUPS: usize = 8;

pub(crate) trait PatchSource<T: Scalar>: Sync {
    /// Rows of the patch matrix (`C_in * taps`).
    fn rows(&self) -> usize;
    /// Output pixels per batch item.
    fn out_pixels(&self) -> usize;
    /// Input elements per batch item.
    fn in_item_len(&self) -> usize;
    /// Fill `col` (`rows x len`, row-major) for output pixels
    /// `start..start + len` of `item`.
    fn gather(&self, item: usize, x_item: &[T], start: usize, len: usize, col: &mut [T]);
    /// Accumulate `grad_col` (`rows x len`) into the input gradient of `item`.
    fn scatter(&self, item: usize, grad_col: &[T], start: usize, len: usize, grad_x_item: &mut [T]);
}

/// `y[n] = W * col(x[n]) + b`, returned as `N x C_out x out_pixels`.
pub(crate) fn forward<T: Scalar, P: PatchSource<T>>(
    source: &P,
    x: &[T],
    items: usize,
    weight: &[T],
    bias: &[T],
    c_out: usize,
) -> Vec<T> {
    let rows = source.rows();
    let pixels = source.out_pixels();
    let in_len = source.in_item_len();
    let tiles = pixels.div_ceil(TILE);
    debug_assert_eq!(weight.len(), c_out * rows);

    let blocks: Vec<Vec<T>> = (0..items * tiles)
        .into_par_iter()
        .map(|task| {
            let (item, tile) = (task / tiles, task % tiles);
            let start = tile * TILE;
            let len = TILE.min(pixels - start);
            let mut col = vec![T::zero(); rows * len];
            source.gather(item, &x[item * in_len..(item + 1) * in_len], start, len, &mut col);
            let mut out = vec![T::zero(); c_out * len];
            for (co, row) in out.chunks_mut(len).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[co]);
            }
            gemm(c_out, rows, len, weight, Trans::No, &col, Trans::No, T::one(), &mut out);
            out
        })
        .collect();

    let mut y = vec![T::zero(); items * c_out * pixels];
    for (task, block) in blocks.iter().enumerate() {
        let (item, tile) = (task / tiles, task % tiles);
        let start = tile * TILE;
        let len = TILE.min(pixels - start);
        for co in 0..c_out {
            let dst = (item * c_out + co) * pixels + start;
            y[dst..dst + len].copy_from_slice(&block[co * len..(co + 1) * len]);
        }
    }
    y
}

/// Accumulates `dL/dW` and `dL/db` into `grad_w` / `grad_b` and returns
/// `dL/dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar, P: PatchSource<T>>(
    source: &P,
    grad_y: &[T],
    x: &[T],
    items: usize,
    weight: &[T],
    c_out: usize,
    grad_w: &mut [T],
    grad_b: &mut [T],
    need_grad_x: bool,
) -> Vec<T> {
    let rows = source.rows();
    let pixels = source.out_pixels();
    let in_len = source.in_item_len();
    let mut grad_x = vec![T::zero(); if need_grad_x { items * in_len } else { 0 }];
    if items == 0 {
        return grad_x;
    }

    let per_group = items.div_ceil(GRAD_GROUPS.min(items));
    let groups = items.div_ceil(per_group);
    let mut gx_chunks: Vec<&mut [T]> = if need_grad_x {
        grad_x.chunks_mut(per_group * in_len).collect()
    } else {
        (0..groups).map(|_| <&mut [T]>::default()).collect()
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = gx_chunks
        .par_iter_mut()
        .enumerate()
        .map(|(g, gx)| {
            let mut gw = vec![T::zero(); c_out * rows];
            let mut gb = vec![T::zero(); c_out];
            let first = g * per_group;
            let last = (first + per_group).min(items);
            let mut col = Vec::new();
            let mut gy_tile = Vec::new();
            let mut grad_col = Vec::new();
            for item in first..last {
                let x_item = &x[item * in_len..(item + 1) * in_len];
                let gy_item = &grad_y[item * c_out * pixels..(item + 1) * c_out * pixels];
                for co in 0..c_out {
                    gb[co] += gy_item[co * pixels..(co + 1) * pixels]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
                let mut start = 0;
                while start < pixels {
                    let len = TILE.min(pixels - start);
                    gy_tile.clear();
                    for co in 0..c_out {
                        gy_tile.extend_from_slice(&gy_item[co * pixels + start..co * pixels + start + len]);
                    }
                    col.clear();
                    col.resize(rows * len, T::zero());
                    source.gather(item, x_item, start, len, &mut col);
                    // gW += gY (c_out x len) * col^T (len x rows)
                    gemm(c_out, len, rows, &gy_tile, Trans::No, &col, Trans::Yes, T::one(), &mut gw);
                    if need_grad_x {
                        // gcol = W^T (rows x c_out) * gY (c_out x len)
                        grad_col.clear();
                        grad_col.resize(rows * len, T::zero());
                        gemm(rows, c_out, len, weight, Trans::Yes, &gy_tile, Trans::No, T::zero(), &mut grad_col);
                        let off = (item - first) * in_len;
                        source.scatter(item, &grad_col, start, len, &mut gx[off..off + in_len]);
                    }
                    start += len;
                }
            }
            (gw, gb)
        })
        .collect();

    for (gw, gb) in partials {
        grad_w.iter_mut().zip(gw).for_each(|(a, b)| *a += b);
        grad_b.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
    }
    grad_x
}
