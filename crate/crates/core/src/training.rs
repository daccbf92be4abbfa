//! Training loop, model files and their sidecar.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, UnitDirection};
use crate::inference::{SearchConfig, ThresholdSchedule};
use crate::network::{ModelConfig, TrainingExample, VpsModel};
use crate::nn::{Adam, AdamConfig};
use crate::persist;
use crate::sphere_sampling::{sample_training_candidates, CandidateLabel};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Candidates per ground truth inside each threshold cap.
    pub positives: usize,
    /// Candidates per ground truth in each `(gamma, 2 gamma)` annulus.
    pub negatives: usize,
    /// Hemisphere-uniform candidates per image.
    pub random: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            positives: 1,
            negatives: 1,
            random: 3,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.positives + self.negatives + self.random == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and the candidate counts must not all be zero".into(),
            ));
        }
        Ok(())
    }
}

/// Labeled candidates for one image: positives and negatives around every
/// ground truth at every threshold, plus `random` uniform draws.
pub fn image_candidates(
    gts: &[UnitDirection],
    schedule: &ThresholdSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CandidateLabel>> {
    let thresholds = schedule.thresholds();
    let mut out = Vec::new();
    for (level, &gamma) in thresholds.iter().enumerate() {
        let random = if level == 0 { cfg.random } else { 0 };
        out.extend(sample_training_candidates(
            gts,
            gamma,
            thresholds,
            cfg.positives,
            cfg.negatives,
            random,
            rng,
        )?);
    }
    Ok(out)
}

/// An in-memory training image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor4<f32>,
    pub intrinsics: CameraIntrinsics,
    pub directions: Vec<UnitDirection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// Runs `cfg.epochs` epochs of shuffled mini-batches. Candidates are redrawn
/// every epoch. All randomness comes from `cfg.seed`.
pub fn train(
    model: &mut VpsModel<f32>,
    data: &[Sample],
    schedule: &ThresholdSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if schedule.thresholds().len() != model.outputs() {
        return Err(Error::InvalidArgument(format!(
            "model has {} outputs but the schedule has {} thresholds",
            model.outputs(),
            schedule.thresholds().len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    Ok(TrainingExample {
                        image: s.image.clone(),
                        intrinsics: s.intrinsics,
                        candidates: image_candidates(&s.directions, schedule, cfg, &mut rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            total += model.training_step(&batch, &mut optimizer)?;
            batches += 1;
        }
        let log = EpochLog {
            epoch,
            loss: total / batches as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Everything needed to use a weight file, stored next to it as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub model: ModelConfig,
    pub rounds: usize,
    pub samples: usize,
    pub rho: f64,
    /// Thresholds the outputs were trained against, radians.
    pub thresholds: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
    /// How pixel coordinates are defined.
    pub intrinsics_convention: String,
    pub weights: String,
}

pub const INTRINSICS_CONVENTION: &str =
    "pixel (0,0) is the center of the top-left pixel; direction = (u - cx, v - cy, f), canonical sign";

impl ModelCard {
    pub fn new(
        model: &ModelConfig,
        search: &SearchConfig,
        schedule: &ThresholdSchedule,
        intrinsics: CameraIntrinsics,
        weights: &Path,
    ) -> Self {
        ModelCard {
            model: model.clone(),
            rounds: search.rounds,
            samples: search.samples,
            rho: search.rho,
            thresholds: schedule.thresholds().to_vec(),
            intrinsics,
            intrinsics_convention: INTRINSICS_CONVENTION.into(),
            weights: weights
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        }
    }

    /// Errors unless `search` derives the thresholds this model was trained
    /// with.
    pub fn check_search(&self, search: &SearchConfig) -> Result<()> {
        if search.rounds != self.rounds || search.samples != self.samples || search.rho != self.rho {
            return Err(Error::InvalidArgument(format!(
                "model was trained for rounds={} samples={} rho={}, search asks for rounds={} samples={} rho={}",
                self.rounds, self.samples, self.rho, search.rounds, search.samples, search.rho
            )));
        }
        Ok(())
    }
}

/// `model.bin` -> `model.json`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save_model(weights: &Path, model: &VpsModel<f32>, card: &ModelCard) -> Result<()> {
    persist::save_params(weights, &model.params())?;
    let side = sidecar_path(weights);
    let text = serde_json::to_string_pretty(card).map_err(|e| Error::format(&side, e.to_string()))?;
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_model(weights: &Path) -> Result<(VpsModel<f32>, ModelCard)> {
    let side = sidecar_path(weights);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let card: ModelCard = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if card.thresholds.len() != card.model.outputs {
        return Err(Error::format(
            &side,
            format!(
                "{} thresholds for a model with {} outputs",
                card.thresholds.len(),
                card.model.outputs
            ),
        ));
    }
    let mut model = VpsModel::new(card.model.clone(), 0)?;
    persist::load_params_into(weights, &mut model.params_mut())?;
    Ok((model, card))
}
