//! Experiment configuration: a flat TOML document with a schema version.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::Nuisance;
use crate::nn::{arch, LayerSpec};
use crate::optim::LrSchedule;
use crate::regularizers::{DropoutConfig, RegularizerKind, ShadeConfig, StateGranularity};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp3,
    Smallcnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synth,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerName {
    None,
    WeightDecay,
    Dropout,
    Shade,
    ShadeDropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Seed for synthetic data generation; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,

    #[serde(default = "d::architecture")]
    pub architecture: Architecture,
    #[serde(default = "d::mlp_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "d::conv_widths")]
    pub conv_widths: Vec<usize>,

    #[serde(default = "d::dataset")]
    pub dataset: DatasetSource,
    #[serde(default = "d::nuisance")]
    pub synth_nuisance: Nuisance,
    #[serde(default = "d::synth_train")]
    pub synth_train: usize,
    #[serde(default = "d::synth_test")]
    pub synth_test: usize,
    #[serde(default)]
    pub synth_val: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_labels: Option<PathBuf>,
    /// Train on a seeded subsample of this size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(default = "d::yes")]
    pub stratified: bool,

    #[serde(default = "d::regularizer")]
    pub regularizer: RegularizerName,
    /// Penalty weight for `shade`/`shade_dropout` and the weight-decay
    /// coefficient for `weight_decay`.
    #[serde(default = "d::beta")]
    pub beta: f64,
    #[serde(default = "d::lambda")]
    pub shade_lambda: f64,
    #[serde(default)]
    pub shade_include_logits: bool,
    #[serde(default)]
    pub shade_granularity: StateGranularity,
    #[serde(default = "d::yes")]
    pub update_before_grad: bool,
    #[serde(default = "d::dropout_rate")]
    pub dropout_rate: f64,

    #[serde(default = "d::lr")]
    pub lr: f64,
    #[serde(default = "d::momentum")]
    pub momentum: f64,
    #[serde(default = "d::lr_gamma")]
    pub lr_gamma: f64,
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "d::epochs")]
    pub epochs: usize,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    /// When set, overrides `epochs` with the fewest epochs giving at least
    /// this many SGD steps on the (subsampled) training set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_steps: Option<usize>,

    /// Random crop size for training; evaluation center-crops to it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment_crop: Option<usize>,
    #[serde(default)]
    pub augment_hflip: bool,

    /// Evaluate test accuracy every this many epochs (and always at the end).
    #[serde(default = "d::one")]
    pub eval_every: usize,
    /// Layer diagnostics every this many epochs; 0 disables them.
    #[serde(default = "d::one")]
    pub diag_every: usize,
    #[serde(default = "d::diag_bins")]
    pub diag_bins: usize,
    #[serde(default = "d::diag_samples")]
    pub diag_samples: usize,
    #[serde(default = "d::yes")]
    pub checkpoints: bool,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

mod d {
    use super::*;

    pub fn architecture() -> Architecture {
        Architecture::Smallcnn
    }
    pub fn mlp_hidden() -> usize {
        256
    }
    pub fn conv_widths() -> Vec<usize> {
        vec![32, 64]
    }
    pub fn dataset() -> DatasetSource {
        DatasetSource::Synth
    }
    pub fn nuisance() -> Nuisance {
        Nuisance::Texture
    }
    pub fn synth_train() -> usize {
        5000
    }
    pub fn synth_test() -> usize {
        2000
    }
    pub fn yes() -> bool {
        true
    }
    pub fn regularizer() -> RegularizerName {
        RegularizerName::None
    }
    pub fn beta() -> f64 {
        0.01
    }
    pub fn lambda() -> f64 {
        0.8
    }
    pub fn dropout_rate() -> f64 {
        0.5
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn lr_gamma() -> f64 {
        0.1
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn one() -> usize {
        1
    }
    pub fn diag_bins() -> usize {
        64
    }
    pub fn diag_samples() -> usize {
        1000
    }
}

fn cfg_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    /// Defaults for everything except the seed.
    pub fn with_seed(seed: u64) -> Self {
        toml::from_str(&format!("schema_version = {SCHEMA_VERSION}\nseed = {seed}\n")).expect("defaults parse")
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file; relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.train_images,
            &mut cfg.train_labels,
            &mut cfg.test_images,
            &mut cfg.test_labels,
            &mut cfg.val_images,
            &mut cfg.val_labels,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(cfg_err(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(cfg_err(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(cfg_err(format!("lr_gamma {} outside (0, 1]", self.lr_gamma)));
        }
        if self.epochs == 0 || self.train_steps == Some(0) {
            return Err(cfg_err("epochs and train_steps must be positive"));
        }
        if self.eval_every == 0 {
            return Err(cfg_err("eval_every must be positive"));
        }
        if self.diag_every > 0 && (self.diag_bins == 0 || self.diag_samples < 2) {
            return Err(cfg_err("diagnostics need diag_bins >= 1 and diag_samples >= 2"));
        }
        if self.architecture == Architecture::Smallcnn && self.conv_widths.len() != 2 {
            return Err(cfg_err("conv_widths must list two channel counts"));
        }
        if self.conv_widths.contains(&0) || self.mlp_hidden == 0 {
            return Err(cfg_err("layer widths must be positive"));
        }
        self.regularizer_kind().validate().map_err(|e| cfg_err(e.to_string()))?;
        match self.dataset {
            DatasetSource::Synth => {
                if self.synth_train < 10 || self.synth_test < 10 {
                    return Err(cfg_err("synth_train and synth_test must be at least 10"));
                }
                if self.synth_val != 0 && self.synth_val < 10 {
                    return Err(cfg_err("synth_val must be 0 or at least 10"));
                }
            }
            DatasetSource::Idx => {
                let required = [
                    ("train_images", &self.train_images),
                    ("train_labels", &self.train_labels),
                    ("test_images", &self.test_images),
                    ("test_labels", &self.test_labels),
                ];
                for (key, p) in required {
                    match p {
                        None => return Err(cfg_err(format!("{key} is required for dataset = \"idx\""))),
                        Some(p) if !p.is_file() => {
                            return Err(cfg_err(format!("{key}: {} does not exist", p.display())))
                        }
                        _ => {}
                    }
                }
                if self.val_images.is_some() != self.val_labels.is_some() {
                    return Err(cfg_err("val_images and val_labels must be given together"));
                }
                for p in [&self.val_images, &self.val_labels].into_iter().flatten() {
                    if !p.is_file() {
                        return Err(cfg_err(format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn regularizer_kind(&self) -> RegularizerKind {
        let shade = ShadeConfig {
            beta: self.beta,
            lambda: self.shade_lambda,
            include_logits: self.shade_include_logits,
            granularity: self.shade_granularity,
        };
        let dropout = DropoutConfig::uniform(self.dropout_rate);
        match self.regularizer {
            RegularizerName::None => RegularizerKind::None,
            RegularizerName::WeightDecay => RegularizerKind::WeightDecay { coef: self.beta },
            RegularizerName::Dropout => RegularizerKind::Dropout(dropout),
            RegularizerName::Shade => RegularizerKind::Shade(shade),
            RegularizerName::ShadeDropout => RegularizerKind::ShadePlusDropout(shade, dropout),
        }
    }

    /// Number of epochs for a training set of `n` samples.
    pub fn epochs_for(&self, n: usize) -> usize {
        match self.train_steps {
            Some(steps) => steps.div_ceil(n.div_ceil(self.batch_size).max(1)).max(1),
            None => self.epochs,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            gamma: self.lr_gamma,
            milestones: self.lr_milestones.clone(),
        }
    }

    /// Layer stack for a per-sample input shape `(C, H, W)`.
    pub fn layer_specs(&self, input: &[usize], classes: usize) -> Result<Vec<LayerSpec>, HarnessError> {
        match self.architecture {
            Architecture::Mlp3 => Ok(arch::mlp3(input.iter().product(), self.mlp_hidden, classes)),
            Architecture::Smallcnn => {
                let &[c, h, w] = input else {
                    return Err(cfg_err(format!("smallcnn needs (C, H, W) input, got {input:?}")));
                };
                if h != w {
                    return Err(cfg_err(format!("smallcnn needs square images, got {h}x{w}")));
                }
                arch::smallcnn(c, h, (self.conv_widths[0], self.conv_widths[1]), classes)
                    .ok_or_else(|| cfg_err(format!("{h}x{w} images are too small for smallcnn")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\nseed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.architecture, Architecture::Smallcnn);
        assert_eq!(cfg.conv_widths, vec![32, 64]);
        assert_eq!(cfg.regularizer_kind(), RegularizerKind::None);
        assert_eq!(cfg, ExperimentConfig::with_seed(3));
    }

    #[test]
    fn seed_is_mandatory() {
        let err = ExperimentConfig::from_toml("schema_version = 1\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("schema_version = 1\nseed = 1\nbeat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("beat"), "{err}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        assert!(ExperimentConfig::from_toml("schema_version = 2\nseed = 1\n").is_err());
    }

    #[test]
    fn missing_idx_file_is_a_config_error() {
        let text = "schema_version = 1\nseed = 1\ndataset = \"idx\"\ntrain_images = \"/nonexistent/a\"\n\
                    train_labels = \"/nonexistent/b\"\ntest_images = \"/nonexistent/c\"\ntest_labels = \"/nonexistent/d\"\n";
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
        assert!(err.to_string().contains("/nonexistent/a"));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::with_seed(9);
        cfg.regularizer = RegularizerName::Shade;
        cfg.beta = 1e-3;
        cfg.lr_milestones = vec![10, 20];
        cfg.n_train = Some(250);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn regularizer_mapping() {
        let mut cfg = ExperimentConfig::with_seed(0);
        cfg.regularizer = RegularizerName::WeightDecay;
        cfg.beta = 5e-4;
        assert_eq!(cfg.regularizer_kind(), RegularizerKind::WeightDecay { coef: 5e-4 });
        cfg.regularizer = RegularizerName::Shade;
        assert_eq!(cfg.regularizer_kind().beta(), 5e-4);
        cfg.regularizer = RegularizerName::ShadeDropout;
        assert!(cfg.regularizer_kind().dropout().is_some());
    }

    #[test]
    fn step_budget_sets_epochs() {
        let mut cfg = ExperimentConfig::with_seed(0);
        assert_eq!(cfg.epochs_for(100), cfg.epochs);
        cfg.train_steps = Some(100);
        // 100 samples at batch 32 is 4 steps per epoch
        assert_eq!(cfg.epochs_for(100), 25);
        assert_eq!(cfg.epochs_for(5000), 1);
        assert_eq!(cfg.epochs_for(250), 13);
    }

    #[test]
    fn smallcnn_rejects_tiny_images() {
        let cfg = ExperimentConfig::with_seed(0);
        assert!(cfg.layer_specs(&[3, 16, 16], 10).is_ok());
        assert!(cfg.layer_specs(&[3, 8, 8], 10).is_err());
    }
}
