//! Coarse-to-fine search for vanishing directions.
//!
//! Round 1 scans the visible hemisphere with a Fibonacci lattice. Each later
//! round re-centers a smaller cap on the best direction of the previous one.
//! The cap angles follow `gamma_1 = pi/2`, `gamma_{r+1} = rho *
//! covering(round r)`, and the classifier threshold used to score round `r`
//! is `gamma_{r+1}`, its output index `r - 1`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::geometry::{angular_distance, CameraIntrinsics, UnitDirection};
use crate::network::VpsModel;
use crate::scalar::Scalar;
use crate::sphere_sampling::{covering_angle, fibonacci_cap_sample, SphericalCap, DEFAULT_GRID_FACTOR};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Number of rounds, `R`; also the number of thresholds.
    pub rounds: usize,
    /// Lattice size per round, `N_d`.
    pub samples: usize,
    /// Cap shrink factor.
    pub rho: f64,
    /// Vanishing points returned per image.
    pub k: usize,
    /// Minimum angle between round-1 seeds; `None` means `2 gamma_2`.
    pub min_separation: Option<f64>,
    /// Covering-grid size as a multiple of `samples`.
    pub grid_factor: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            rounds: 4,
            samples: 64,
            rho: 1.2,
            k: 1,
            min_separation: None,
            grid_factor: DEFAULT_GRID_FACTOR,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if self.samples < 2 {
            return bad(format!("samples must be at least 2, got {}", self.samples));
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            return bad(format!("rho must be at least 1, got {}", self.rho));
        }
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if let Some(s) = self.min_separation {
            if !(s >= 0.0) {
                return bad(format!("min_separation must be nonnegative, got {s}"));
            }
        }
        Ok(())
    }
}

/// Cap angles `gamma_1 .. gamma_{R+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub caps: Vec<f64>,
}

impl ThresholdSchedule {
    /// The threshold set `{gamma_2, ..., gamma_{R+1}}`, one per classifier
    /// output.
    pub fn thresholds(&self) -> &[f64] {
        &self.caps[1..]
    }

    pub fn rounds(&self) -> usize {
        self.caps.len() - 1
    }

    /// Cap angle searched in round `r` (1-based).
    pub fn cap(&self, round: usize) -> f64 {
        self.caps[round - 1]
    }

    /// Final resolution `gamma_{R+1}`.
    pub fn finest(&self) -> f64 {
        *self.caps.last().unwrap()
    }
}

/// Computes the cap schedule on caps centered at the optical axis.
pub fn derive_threshold_schedule(cfg: &SearchConfig) -> Result<ThresholdSchedule> {
    cfg.validate()?;
    let mut caps = vec![FRAC_PI_2];
    for round in 1..=cfg.rounds {
        let current = caps[round - 1];
        let cap = SphericalCap::new(UnitDirection::OPTICAL_AXIS, current)?;
        let lattice = fibonacci_cap_sample(&cap, cfg.samples);
        let next = cfg.rho * covering_angle(&lattice, &cap, cfg.grid_factor);
        if next >= current {
            return Err(Error::ScheduleNotShrinking { round, current, next });
        }
        caps.push(next);
    }
    Ok(ThresholdSchedule { caps })
}

/// Scores candidate directions; higher means more likely near a vanishing
/// direction at the given threshold.
pub trait CandidateScorer {
    fn score(&mut self, candidates: &[UnitDirection], threshold_index: usize) -> Result<Vec<f64>>;
}

/// Scores by negative angular distance to the nearest hidden direction.
/// Used to test the search independently of any model.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    truths: Vec<UnitDirection>,
    evaluations: usize,
}

impl OracleScorer {
    pub fn new(truths: Vec<UnitDirection>) -> Self {
        OracleScorer { truths, evaluations: 0 }
    }

    /// Candidates scored so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }
}

impl CandidateScorer for OracleScorer {
    fn score(&mut self, candidates: &[UnitDirection], _threshold_index: usize) -> Result<Vec<f64>> {
        self.evaluations += candidates.len();
        Ok(candidates
            .iter()
            .map(|c| {
                -self
                    .truths
                    .iter()
                    .map(|t| angular_distance(c, t))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect())
    }
}

/// Scores with a trained model. The backbone runs once, at construction.
pub struct ModelScorer<'a, T: Scalar> {
    model: &'a VpsModel<T>,
    features: Tensor4<T>,
    intrinsics: CameraIntrinsics,
    evaluations: usize,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    /// `image` is `1 x C x S x S`.
    pub fn new(model: &'a VpsModel<T>, image: &Tensor4<T>, intrinsics: CameraIntrinsics) -> Result<Self> {
        ensure_shape!(image.shape().n == 1, "one image at a time, got {}", image.shape());
        let features = model.backbone_forward(image)?;
        Ok(ModelScorer {
            model,
            features,
            intrinsics,
            evaluations: 0,
        })
    }

    /// Head evaluations so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }
}

impl<T: Scalar> CandidateScorer for ModelScorer<'_, T> {
    fn score(&mut self, candidates: &[UnitDirection], threshold_index: usize) -> Result<Vec<f64>> {
        if threshold_index >= self.model.outputs() {
            return Err(Error::InvalidArgument(format!(
                "threshold {threshold_index} requested from a model with {} outputs",
                self.model.outputs()
            )));
        }
        self.evaluations += candidates.len();
        let probs = self.model.head_forward(&self.features, candidates, &self.intrinsics)?;
        Ok(probs.into_iter().map(|row| row[threshold_index]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub direction: UnitDirection,
    pub score: f64,
    /// Best direction after each round.
    pub trace: Vec<UnitDirection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub detections: Vec<Detection>,
    /// Set when fewer than `k` sufficiently separated seeds existed.
    pub seeds_short: bool,
}

/// Greedy top-`k` by score (ties: lower index) keeping every pair at least
/// `min_sep` apart. Returns the chosen indices and whether fewer than `k`
/// were found.
pub fn select_topk_separated(scores: &[f64], directions: &[UnitDirection], k: usize, min_sep: f64) -> (Vec<usize>, bool) {
    assert_eq!(scores.len(), directions.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for i in order {
        if picked.len() == k {
            break;
        }
        if picked
            .iter()
            .all(|&j| angular_distance(&directions[i], &directions[j]) >= min_sep)
        {
            picked.push(i);
        }
    }
    let short = picked.len() < k;
    (picked, short)
}

/// Index of the highest score, lowest index on ties.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Runs the search. With `k = 1` the scorer is called on exactly
/// `rounds * samples` candidates.
pub fn detect<S: CandidateScorer + ?Sized>(
    scorer: &mut S,
    cfg: &SearchConfig,
    schedule: &ThresholdSchedule,
) -> Result<SearchResult> {
    cfg.validate()?;
    if schedule.rounds() != cfg.rounds {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} rounds, config asks for {}",
            schedule.rounds(),
            cfg.rounds
        )));
    }
    let first = fibonacci_cap_sample(&SphericalCap::hemisphere(), cfg.samples);
    let scores = scorer.score(&first, 0)?;
    check_scores(&scores, first.len())?;
    let min_sep = cfg.min_separation.unwrap_or(2.0 * schedule.caps[1]);
    let (seeds, seeds_short) = if cfg.k == 1 {
        (vec![argmax(&scores)], false)
    } else {
        select_topk_separated(&scores, &first, cfg.k, min_sep)
    };

    let mut detections = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let mut center = first[seed];
        let mut score = scores[seed];
        let mut trace = vec![center];
        for round in 2..=cfg.rounds {
            let cap = SphericalCap::new(center, schedule.cap(round))?;
            let lattice = fibonacci_cap_sample(&cap, cfg.samples);
            let s = scorer.score(&lattice, round - 1)?;
            check_scores(&s, lattice.len())?;
            let best = argmax(&s);
            center = lattice[best];
            score = s[best];
            trace.push(center);
        }
        detections.push(Detection {
            direction: center,
            score,
            trace,
        });
    }
    Ok(SearchResult { detections, seeds_short })
}

fn check_scores(scores: &[f64], expected: usize) -> Result<()> {
    if scores.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "scorer returned {} scores for {expected} candidates",
            scores.len()
        )));
    }
    Ok(())
}
