//! Angle-accuracy metric, its curve, and prediction matching.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angular_distance, UnitDirection};

/// Error charged to a prediction with no ground truth left to match.
pub const UNMATCHED_PENALTY: f64 = FRAC_PI_2;

/// Default report thresholds, in degrees.
pub const DEFAULT_THRESHOLDS_DEG: [f64; 6] = [0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

/// Above this many items on the smaller side, matching falls back to the
/// greedy rule instead of the exact subset search.
const EXACT_MATCH_LIMIT: usize = 16;

/// Detector output for one image; the interchange format between `detect`
/// and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub image_id: String,
    pub directions: Vec<UnitDirection>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub prediction: usize,
    /// `None` for a prediction left without a ground truth.
    pub truth: Option<usize>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_truths: usize,
}

/// One-to-one assignment minimizing the total angular error. Every
/// prediction gets a pair; surplus predictions are charged
/// [`UNMATCHED_PENALTY`], surplus ground truths are counted.
pub fn match_predictions(preds: &[UnitDirection], gts: &[UnitDirection]) -> Matching {
    let cost: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| angular_distance(p, g)).collect())
        .collect();
    let assignment = if preds.len().min(gts.len()) <= EXACT_MATCH_LIMIT {
        exact_assignment(&cost, preds.len(), gts.len())
    } else {
        greedy_assignment(&cost, preds.len(), gts.len())
    };
    let pairs = assignment
        .iter()
        .enumerate()
        .map(|(i, &t)| MatchedPair {
            prediction: i,
            truth: t,
            error: t.map_or(UNMATCHED_PENALTY, |j| cost[i][j]),
        })
        .collect();
    let matched = assignment.iter().flatten().count();
    Matching {
        pairs,
        unmatched_truths: gts.len() - matched,
    }
}

/// Exact minimum-cost assignment. The larger side is scanned in order; each
/// item either takes a free column of the smaller side (a bitmask) or stays
/// unmatched, and every column must end up taken.
fn exact_assignment(cost: &[Vec<f64>], n_pred: usize, n_gt: usize) -> Vec<Option<usize>> {
    let transpose = n_gt > n_pred;
    // rows: the larger side, cols: the smaller side (bitmask)
    let (rows, cols) = if transpose { (n_gt, n_pred) } else { (n_pred, n_gt) };
    let c = |r: usize, k: usize| if transpose { cost[k][r] } else { cost[r][k] };
    let full = 1usize << cols;
    // table[r][mask]: min cost using rows r.. with columns `mask` already taken
    let mut table = vec![vec![f64::INFINITY; full]; rows + 1];
    table[rows][full - 1] = 0.0;
    for r in (0..rows).rev() {
        // a mask can only be completed if enough rows remain
        for mask in 0..full {
            let free = cols - mask.count_ones() as usize;
            if free > rows - r {
                continue;
            }
            let mut best = table[r + 1][mask];
            for k in 0..cols {
                if mask & (1 << k) == 0 {
                    best = best.min(c(r, k) + table[r + 1][mask | (1 << k)]);
                }
            }
            table[r][mask] = best;
        }
    }
    let mut chosen = vec![None; rows];
    let mut mask = 0usize;
    for (r, slot) in chosen.iter_mut().enumerate() {
        let target = table[r][mask];
        if table[r + 1][mask] == target {
            continue;
        }
        for k in 0..cols {
            if mask & (1 << k) == 0 && c(r, k) + table[r + 1][mask | (1 << k)] == target {
                *slot = Some(k);
                mask |= 1 << k;
                break;
            }
        }
    }
    if !transpose {
        return chosen;
    }
    let mut out = vec![None; n_pred];
    for (g, k) in chosen.into_iter().enumerate() {
        if let Some(p) = k {
            out[p] = Some(g);
        }
    }
    out
}

/// Repeatedly takes the globally closest unused pair.
fn greedy_assignment(cost: &[Vec<f64>], n_pred: usize, n_gt: usize) -> Vec<Option<usize>> {
    let mut all: Vec<(f64, usize, usize)> = (0..n_pred)
        .flat_map(|i| (0..n_gt).map(move |j| (cost[i][j], i, j)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; n_pred];
    let mut used = vec![false; n_gt];
    for (_, i, j) in all {
        if out[i].is_none() && !used[j] {
            out[i] = Some(j);
            used[j] = true;
        }
    }
    out
}

/// Sorted angular errors over an evaluation set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AaCurve {
    errors: Vec<f64>,
    pub pairs: Vec<(String, MatchedPair)>,
    pub unmatched_truths: usize,
}

impl AaCurve {
    pub fn from_errors(errors: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut errors: Vec<f64> = errors.into_iter().collect();
        if let Some(bad) = errors.iter().find(|e| !(0.0..=FRAC_PI_2 + 1e-12).contains(*e)) {
            return Err(Error::InvalidArgument(format!("angular error {bad} outside [0, pi/2]")));
        }
        errors.sort_by(f64::total_cmp);
        Ok(AaCurve {
            errors,
            ..AaCurve::default()
        })
    }

    /// Adds one image's matching.
    pub fn push(&mut self, image_id: &str, matching: &Matching) {
        for pair in &matching.pairs {
            let at = self.errors.partition_point(|&e| e <= pair.error);
            self.errors.insert(at, pair.error.min(FRAC_PI_2));
            self.pairs.push((image_id.to_string(), *pair));
        }
        self.unmatched_truths += matching.unmatched_truths;
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    /// Fraction of errors `<= x`.
    pub fn fraction_within(&self, x: f64) -> f64 {
        if self.errors.is_empty() {
            return 0.0;
        }
        self.errors.partition_point(|&e| e <= x) as f64 / self.errors.len() as f64
    }

    /// `(x, F(x))` at every step of the empirical CDF, radians.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("error_deg,fraction\n");
        let n = self.errors.len() as f64;
        for (i, e) in self.errors.iter().enumerate() {
            if self.errors.get(i + 1) == Some(e) {
                continue;
            }
            writeln!(out, "{:.6},{:.6}", e.to_degrees(), (i + 1) as f64 / n).unwrap();
        }
        out
    }
}

/// Area under the empirical CDF on `[0, theta]`, divided by `theta`. Each
/// error `e` contributes the rectangle `max(0, theta - e) / n`, so the
/// integral is exact.
pub fn angle_accuracy(curve: &AaCurve, theta: f64) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be positive, got {theta}")));
    }
    if curve.errors.is_empty() {
        return Ok(0.0);
    }
    let area: f64 = curve.errors.iter().map(|&e| (theta - e).max(0.0)).sum();
    Ok(area / (curve.errors.len() as f64 * theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAccuracy {
    pub threshold_deg: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub unmatched_truths: usize,
    pub angle_accuracy: Vec<ThresholdAccuracy>,
    pub mean_deg: f64,
    /// Lower median for even counts.
    pub median_deg: f64,
}

impl Summary {
    /// AA at `deg`, if it was one of the summarized thresholds.
    pub fn aa(&self, deg: f64) -> Option<f64> {
        self.angle_accuracy
            .iter()
            .find(|t| t.threshold_deg == deg)
            .map(|t| t.accuracy)
    }
}

pub fn summarize(curve: &AaCurve, thresholds_deg: &[f64]) -> Result<Summary> {
    let aa = thresholds_deg
        .iter()
        .map(|&d| {
            Ok(ThresholdAccuracy {
                threshold_deg: d,
                accuracy: angle_accuracy(curve, d.to_radians())?,
            })
        })
        .collect::<Result<_>>()?;
    let n = curve.errors.len();
    let (mean, median) = if n == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (curve.errors.iter().sum::<f64>() / n as f64, curve.errors[(n - 1) / 2])
    };
    Ok(Summary {
        count: n,
        unmatched_truths: curve.unmatched_truths,
        angle_accuracy: aa,
        mean_deg: mean.to_degrees(),
        median_deg: median.to_degrees(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(x: f64, y: f64, z: f64) -> UnitDirection {
        UnitDirection::new(x, y, z).unwrap()
    }

    #[test]
    fn exact_predictions_have_zero_error() {
        let gts = [dir(0.0, 0.0, 1.0), dir(1.0, 0.0, 0.2), dir(0.0, 1.0, 0.5)];
        let m = match_predictions(&gts, &gts);
        assert!(m.pairs.iter().all(|p| p.error == 0.0));
        assert_eq!(m.unmatched_truths, 0);
    }

    #[test]
    fn single_prediction_takes_nearer_truth() {
        let gts = [dir(1.0, 0.0, 0.1), dir(0.1, 0.0, 1.0)];
        let m = match_predictions(&[dir(0.0, 0.0, 1.0)], &gts);
        assert_eq!(m.pairs[0].truth, Some(1));
        assert_eq!(m.unmatched_truths, 1);
    }

    #[test]
    fn surplus_predictions_are_penalized() {
        let gts = [dir(0.0, 0.0, 1.0)];
        let m = match_predictions(&[dir(1.0, 0.0, 0.0), dir(0.0, 0.01, 1.0)], &gts);
        assert_eq!(m.pairs[0].truth, None);
        assert_eq!(m.pairs[0].error, UNMATCHED_PENALTY);
        assert_eq!(m.pairs[1].truth, Some(0));
    }

    #[test]
    fn hand_integrated_accuracy() {
        let c = AaCurve::from_errors([0.5f64.to_radians(), 1.5f64.to_radians()]).unwrap();
        assert!((angle_accuracy(&c, 2f64.to_radians()).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(angle_accuracy(&c, 0.4f64.to_radians()).unwrap(), 0.0);
        let zeros = AaCurve::from_errors([0.0; 4]).unwrap();
        assert_eq!(angle_accuracy(&zeros, 1e-3).unwrap(), 1.0);
        assert_eq!(angle_accuracy(&AaCurve::default(), 1.0).unwrap(), 0.0);
        assert!(angle_accuracy(&c, 0.0).is_err());
    }

    #[test]
    fn summary_conventions() {
        let one = summarize(&AaCurve::from_errors([1f64.to_radians()]).unwrap(), &[1.0]).unwrap();
        assert!((one.mean_deg - 1.0).abs() < 1e-12 && (one.median_deg - 1.0).abs() < 1e-12);
        let two = summarize(&AaCurve::from_errors([0.0, FRAC_PI_2]).unwrap(), &[]).unwrap();
        assert_eq!(two.median_deg, 0.0);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let c = AaCurve::from_errors([0.0, 0.0, 0.1]).unwrap();
        let csv = c.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.ends_with(",1.000000\n"));
    }
}
