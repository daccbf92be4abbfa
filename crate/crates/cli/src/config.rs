//! The run configuration: one flat TOML document of `key = value` lines.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use conic_vp::inference::SearchConfig;
use conic_vp::network::{HeadMode, ModelConfig};
use conic_vp::nn::AdamConfig;
use conic_vp::sphere_sampling::DEFAULT_GRID_FACTOR;
use conic_vp::synth_data::SceneSpec;
use conic_vp::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // synthetic data
    pub image_size: usize,
    /// Focal length in pixels; absent means half the image width.
    pub focal: Option<f64>,
    pub vp_count: usize,
    pub orthogonal: bool,
    pub max_vp_angle_deg: f64,
    pub lines_per_vp: usize,
    pub clutter_lines: usize,
    pub line_width: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub length_min: f64,
    pub length_max: f64,
    pub background: f64,
    pub noise_sigma: f64,
    pub dataset_count: usize,
    pub val_fraction: f64,
    pub dataset_seed: u64,

    // model
    pub head_mode: HeadMode,
    pub stem_channels: usize,
    pub feature_channels: usize,
    pub reduced_channels: usize,
    pub stage_channels: Vec<usize>,
    pub fc_hidden: usize,
    pub init_seed: u64,

    // search
    pub rounds: usize,
    pub samples: usize,
    pub rho: f64,
    pub k: usize,
    pub min_separation_deg: Option<f64>,
    pub grid_factor: usize,

    // training
    pub positives: usize,
    pub negatives: usize,
    pub random: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_seed: u64,

    // evaluation
    pub thresholds_deg: Vec<f64>,

    // runtime
    /// Worker threads; 0 means all available cores.
    pub workers: usize,
    pub dataset_dir: PathBuf,
    pub model_path: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        let model = ModelConfig::default();
        let search = SearchConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            image_size: scene.image_size,
            focal: scene.focal,
            vp_count: scene.vp_count,
            orthogonal: scene.orthogonal,
            max_vp_angle_deg: scene.max_vp_angle.to_degrees().round(),
            lines_per_vp: scene.lines_per_vp,
            clutter_lines: scene.clutter_lines,
            line_width: scene.line_width,
            intensity_min: scene.intensity.0,
            intensity_max: scene.intensity.1,
            length_min: scene.length.0,
            length_max: scene.length.1,
            background: scene.background,
            noise_sigma: scene.noise_sigma,
            dataset_count: 2000,
            val_fraction: 0.1,
            dataset_seed: 1,
            head_mode: model.head_mode,
            stem_channels: model.stem_channels,
            feature_channels: model.feature_channels,
            reduced_channels: model.reduced_channels,
            stage_channels: model.stage_channels,
            fc_hidden: model.fc_hidden,
            init_seed: 0,
            rounds: search.rounds,
            samples: search.samples,
            rho: search.rho,
            k: search.k,
            min_separation_deg: None,
            grid_factor: DEFAULT_GRID_FACTOR,
            positives: train.positives,
            negatives: train.negatives,
            random: train.random,
            lr: train.adam.lr,
            weight_decay: train.adam.weight_decay,
            epochs: train.epochs,
            batch_size: train.batch_size,
            train_seed: 0,
            thresholds_deg: conic_vp::eval::DEFAULT_THRESHOLDS_DEG.to_vec(),
            workers: 0,
            dataset_dir: "data".into(),
            model_path: "model.bin".into(),
            output_dir: "out".into(),
        }
    }
}

/// The commented file written by `init-config`. Parsing it yields
/// `RunConfig::default()`.
pub const DEFAULT_CONFIG: &str = r#"# conic-vp run configuration. Every key is optional; omitted keys take the
# values shown here. Override any key on the command line with
# --set key=value.

# --- synthetic data ---
image_size = 128
# focal = 64.0              # pixels; default is half the image width
vp_count = 1                # 1-3 vanishing points per scene
orthogonal = false          # mutually orthogonal triad (needs vp_count = 3)
max_vp_angle_deg = 60.0     # vanishing directions within this angle of the optical axis
lines_per_vp = 8
clutter_lines = 4
line_width = 1.0
intensity_min = 0.5
intensity_max = 1.0
length_min = 0.3            # segment length as a fraction of the image size
length_max = 0.7
background = 0.0
noise_sigma = 0.05
dataset_count = 2000
val_fraction = 0.1
dataset_seed = 1

# --- model ---
head_mode = "conic"         # "conic" or "plain" (ordinary 3x3 convolutions)
stem_channels = 32
feature_channels = 64
reduced_channels = 32
stage_channels = [32, 64, 128, 256]
fc_hidden = 64
init_seed = 0

# --- coarse-to-fine search ---
rounds = 4                  # R; the model has one output per round
samples = 64                # N_d
rho = 1.2                   # cap shrink factor
k = 1                       # vanishing points per image
# min_separation_deg = 35.4 # between round-1 seeds; default is twice the second cap angle
grid_factor = 256           # covering-angle grid size per lattice point

# --- training ---
positives = 1               # N+ per ground truth and threshold
negatives = 1               # N- per ground truth and threshold
random = 3                  # N* per image
lr = 0.0004                 # Adam learning rate
weight_decay = 0.00001
epochs = 10
batch_size = 16
train_seed = 0

# --- evaluation ---
thresholds_deg = [0.2, 0.5, 1.0, 2.0, 5.0, 10.0]

# --- runtime ---
workers = 0                 # 0 = all available cores
dataset_dir = "data"
model_path = "model.bin"
output_dir = "out"
"#;

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides. Unknown keys are errors.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let Some((key, value)) = o.split_once('=') else {
                bail!("override {o:?} is not key=value");
            };
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_spec()?.validate()?;
        self.model_config().validate()?;
        self.search_config().validate()?;
        self.train_config().validate()?;
        if self.thresholds_deg.iter().any(|t| !(*t > 0.0)) {
            bail!("thresholds_deg must be positive");
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        Ok(SceneSpec {
            image_size: self.image_size,
            focal: self.focal,
            vp_count: self.vp_count,
            orthogonal: self.orthogonal,
            max_vp_angle: self.max_vp_angle_deg.to_radians(),
            lines_per_vp: self.lines_per_vp,
            clutter_lines: self.clutter_lines,
            line_width: self.line_width,
            intensity: (self.intensity_min, self.intensity_max),
            length: (self.length_min, self.length_max),
            background: self.background,
            noise_sigma: self.noise_sigma,
            seed: self.dataset_seed,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_channels: 1,
            image_size: self.image_size,
            stem_channels: self.stem_channels,
            feature_channels: self.feature_channels,
            reduced_channels: self.reduced_channels,
            stage_channels: self.stage_channels.clone(),
            fc_hidden: self.fc_hidden,
            outputs: self.rounds,
            head_mode: self.head_mode,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            rounds: self.rounds,
            samples: self.samples,
            rho: self.rho,
            k: self.k,
            min_separation: self.min_separation_deg.map(f64::to_radians),
            grid_factor: self.grid_factor,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            positives: self.positives,
            negatives: self.negatives,
            random: self.random,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            seed: self.train_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_file_parses_to_defaults() {
        let cfg: RunConfig = toml::from_str(DEFAULT_CONFIG).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = RunConfig::load(
            None,
            &[
                "rounds=5".into(),
                "head_mode=plain".into(),
                "lr = 0.001".into(),
                "stage_channels=[8, 16, 32, 64]".into(),
                "focal=70".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.rounds, 5);
        assert_eq!(cfg.model_config().outputs, 5);
        assert_eq!(cfg.head_mode, HeadMode::Plain);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.stage_channels, vec![8, 16, 32, 64]);
        assert_eq!(cfg.focal, Some(70.0));
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(RunConfig::load(None, &["learning_rate=0.1".into()]).is_err());
        assert!(RunConfig::load(None, &["rounds".into()]).is_err());
        assert!(RunConfig::load(None, &["rounds=\"four\"".into()]).is_err());
        assert!(RunConfig::load(None, &["image_size=32".into()]).is_err());
    }
}
