//! Experiment orchestration: training runs, evaluation, sample-count sweeps
//! and layer diagnostics, with CSV metrics and binary checkpoints.
//!
//! A training run writes into its output directory:
//!
//! - `config.toml`: the resolved configuration
//! - `metrics.csv`: one row per epoch (see [`metrics_header`])
//! - `layers.csv`: long-format diagnostics, one row per epoch, layer and stage
//! - `timing.csv`: wall-clock seconds per epoch
//! - `final.ckpt`, `best.ckpt`: checkpoints (see [`checkpoint`])
//!
//! Everything except `timing.csv` is a function of the configuration.

pub mod checkpoint;
pub mod config;
pub mod diagnose;
pub mod sweep;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{self, AugmentConfig, Batch, DataError, Dataset, SamplingSpec};
use crate::info::InfoError;
use crate::nn::{self, Network, NnError};
use crate::optim::{self, Objective, SgdState, StepOptions, TrainError};
use crate::regularizers::ShadeStates;
use crate::TensorError;

use checkpoint::{Checkpoint, CheckpointMeta};
use config::DatasetSource;
pub use config::ExperimentConfig;
use diagnose::{LayerDiagnostics, Stage};

/// Version of the metrics/layers CSV column layout.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("output directory {0} already exists and is not empty")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Info(#[from] InfoError),
}

impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        HarnessError::Train(TrainError::Nn(e))
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Train(TrainError::Tensor(e))
    }
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::OutputExists(_) => 2,
            HarnessError::Data(_) | HarnessError::Checkpoint(_) => 3,
            HarnessError::Io { .. } | HarnessError::Train(_) | HarnessError::Info(_) => 4,
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for stream `stream`, item `index` of a run.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(stream)) ^ index)
}

const STREAM_INIT: u64 = 1;
const STREAM_EPOCH: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_DIAG: u64 = 5;
const STREAM_TEST_DATA: u64 = 6;
const STREAM_VAL_DATA: u64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub val: Option<Dataset>,
}

/// Full train pool plus test (and validation) sets, before subsampling.
pub fn load_pool(cfg: &ExperimentConfig) -> Result<Splits, HarnessError> {
    match cfg.dataset {
        DatasetSource::Synth => {
            let ds = cfg.data_seed();
            let nz = cfg.synth_nuisance;
            Ok(Splits {
                train: data::synth_cluttered(cfg.synth_train, ds, nz)?,
                test: data::synth_cluttered(cfg.synth_test, derive_seed(ds, STREAM_TEST_DATA, 0), nz)?,
                val: (cfg.synth_val > 0)
                    .then(|| data::synth_cluttered(cfg.synth_val, derive_seed(ds, STREAM_VAL_DATA, 0), nz))
                    .transpose()?,
            })
        }
        DatasetSource::Idx => {
            let path = |p: &Option<PathBuf>| p.clone().expect("validated");
            let train = data::load_idx(&path(&cfg.train_images), &path(&cfg.train_labels))?;
            let test = data::load_idx(&path(&cfg.test_images), &path(&cfg.test_labels))?;
            let val = match (&cfg.val_images, &cfg.val_labels) {
                (Some(i), Some(l)) => Some(data::load_idx(i, l)?),
                _ => None,
            };
            if test.sample_shape() != train.sample_shape() {
                return Err(DataError::Invalid(format!(
                    "test images {:?} differ from training images {:?}",
                    test.sample_shape(),
                    train.sample_shape()
                ))
                .into());
            }
            Ok(Splits { train, test, val })
        }
    }
}

/// Applies the configured `n_train` subsample, if any.
pub fn subsample_pool(cfg: &ExperimentConfig, pool: &Splits) -> Result<Splits, HarnessError> {
    let Some(n) = cfg.n_train else {
        return Ok(pool.clone());
    };
    let spec = SamplingSpec {
        n_train: n,
        seed: cfg.seed,
        stratified: cfg.stratified,
    };
    Ok(Splits {
        train: data::subsample(&pool.train, &spec)?,
        ..pool.clone()
    })
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits, HarnessError> {
    subsample_pool(cfg, &load_pool(cfg)?)
}

/// Per-sample network input shape for a dataset under `cfg`.
pub fn input_shape(cfg: &ExperimentConfig, sample: &[usize]) -> Result<Vec<usize>, HarnessError> {
    match cfg.augment_crop {
        None => Ok(sample.to_vec()),
        Some(c) => {
            if sample.len() != 3 || c == 0 || c > sample[1] || c > sample[2] {
                return Err(HarnessError::Config(format!(
                    "augment_crop {c} does not fit images of shape {sample:?}"
                )));
            }
            Ok(vec![sample[0], c, c])
        }
    }
}

/// Images of `batch` center-cropped to the network's input size if needed.
fn fit_input(net: &Network, batch: Batch) -> Result<Batch, HarnessError> {
    let want = net.input_shape();
    let have = &batch.images.shape()[1..];
    if have == want {
        return Ok(batch);
    }
    let compatible =
        want.len() == 3 && have[0] == want[0] && want[1] == want[2] && have[1] >= want[1] && have[2] >= want[2];
    if !compatible {
        return Err(HarnessError::Checkpoint(format!(
            "network expects input {want:?}, data has {have:?}"
        )));
    }
    Ok(data::center_crop(&batch, want[1])?)
}

/// Top-1 accuracy with deterministic center-crop evaluation.
pub fn accuracy(net: &Network, d: &Dataset) -> Result<f64, HarnessError> {
    if d.class_count > net.class_count() {
        return Err(HarnessError::Checkpoint(format!(
            "network predicts {} classes, dataset has {}",
            net.class_count(),
            d.class_count
        )));
    }
    let mut correct = 0usize;
    let n = d.len();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
        let batch = fit_input(net, d.batch(&idx))?;
        let (logits, _) = nn::forward(net, &batch.images)?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
        start += 256;
    }
    Ok(correct as f64 / n as f64)
}

/// One epoch's metrics. `test_acc` and `train_acc` are `None` on epochs
/// without evaluation; `layers` is empty on epochs without diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub layers: Vec<LayerDiagnostics>,
    pub wall_time: f64,
}

/// Header of `metrics.csv`: fixed columns, then `h_cond`, `mi` and `vbound`
/// of the pre-activation stage for each parametric layer index.
pub fn metrics_header(net: &Network) -> String {
    let mut cols: Vec<String> = [
        "epoch",
        "lr",
        "train_loss",
        "cls_loss",
        "reg_loss",
        "train_acc",
        "test_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for l in net.parametric_layers() {
        cols.push(format!("h_cond_{l}"));
        cols.push(format!("mi_{l}"));
        cols.push(format!("vbound_{l}"));
    }
    cols.join(",")
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self, net: &Network) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            self.lr.to_string(),
            self.train_loss.to_string(),
            self.cls_loss.to_string(),
            self.reg_loss.to_string(),
            opt(self.train_acc),
            opt(self.test_acc),
        ];
        for l in net.parametric_layers() {
            let row = self.layers.iter().find(|d| d.layer == l && d.stage == Stage::Pre);
            cols.push(opt(row.map(|d| d.h_cond)));
            cols.push(opt(row.map(|d| d.mi)));
            cols.push(opt(row.map(|d| d.vbound)));
        }
        cols.join(",")
    }
}

/// Line-buffered CSV appender; every row is flushed as it is written.
struct CsvAppender {
    file: File,
    path: PathBuf,
}

impl CsvAppender {
    fn create(path: PathBuf, header: &str) -> Result<Self, HarnessError> {
        let mut file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|e| HarnessError::io(&path, e))?;
        writeln!(file, "{header}").map_err(|e| HarnessError::io(&path, e))?;
        Ok(Self { file, path })
    }

    fn row(&mut self, line: &str) -> Result<(), HarnessError> {
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| HarnessError::io(&self.path, e))
    }
}

struct RunFiles {
    dir: PathBuf,
    metrics: CsvAppender,
    layers: CsvAppender,
    timing: CsvAppender,
}

/// Creates `dir` for a fresh run; refuses a non-empty existing directory.
pub fn prepare_out_dir(dir: &Path) -> Result<(), HarnessError> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
        if entries.next().is_some() {
            return Err(HarnessError::OutputExists(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

impl RunFiles {
    fn create(dir: &Path, cfg: &ExperimentConfig, net: &Network) -> Result<Self, HarnessError> {
        prepare_out_dir(dir)?;
        let cfg_path = dir.join("config.toml");
        std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| HarnessError::io(&cfg_path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: CsvAppender::create(dir.join("metrics.csv"), &metrics_header(net))?,
            layers: CsvAppender::create(dir.join("layers.csv"), &format!("epoch,{}", diagnose::LAYER_HEADER))?,
            timing: CsvAppender::create(dir.join("timing.csv"), "epoch,wall_time")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub net: Network,
    pub states: Option<ShadeStates>,
    pub test_acc: f64,
    pub val_acc: Option<f64>,
    pub best_test_acc: f64,
}

impl TrainOutcome {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("at least one epoch")
    }
}

/// Stratified subset of `diag_samples` training samples used for diagnostics.
pub fn diag_subset(cfg: &ExperimentConfig, train: &Dataset) -> Result<Dataset, HarnessError> {
    if cfg.diag_samples >= train.len() {
        return Ok(train.clone());
    }
    let spec = SamplingSpec {
        n_train: cfg.diag_samples,
        seed: derive_seed(cfg.seed, STREAM_DIAG, 0),
        stratified: true,
    };
    Ok(data::subsample(train, &spec)?)
}

/// Diagnostics of `net` on a dataset, center-cropping as in evaluation.
pub fn diagnose_dataset(net: &Network, d: &Dataset, n_bins: usize) -> Result<Vec<LayerDiagnostics>, HarnessError> {
    let batch = fit_input(net, d.all())?;
    diagnose::diagnose_network(net, &batch.images, &batch.labels, n_bins)
}

/// Trains on already prepared splits. With `out` set, metrics and
/// checkpoints are written there as the run progresses.
pub fn train_on(cfg: &ExperimentConfig, splits: &Splits, out: Option<&Path>) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let train = &splits.train;
    let input = input_shape(cfg, train.sample_shape())?;
    let classes = train.class_count.max(splits.test.class_count);
    let specs = cfg.layer_specs(&input, classes)?;
    let mut net = nn::init_network(&specs, &input, derive_seed(cfg.seed, STREAM_INIT, 0))?;
    let objective = Objective::new(cfg.regularizer_kind());
    let mut states = objective.regularizer.shade().map(|s| ShadeStates::new(&net, s));
    let mut sgd = SgdState::new(&net, cfg.lr, cfg.momentum);
    let schedule = cfg.schedule();
    let augment = (cfg.augment_crop.is_some() || cfg.augment_hflip).then(|| AugmentConfig {
        crop_to: input[input.len() - 1],
        hflip: cfg.augment_hflip,
    });
    let diag_set = if cfg.diag_every > 0 {
        Some(diag_subset(cfg, train)?)
    } else {
        None
    };
    let mut files = out.map(|d| RunFiles::create(d, cfg, &net)).transpose()?;
    let meta = |epoch: usize, test_acc: Option<f64>, sgd: &SgdState| CheckpointMeta {
        epoch,
        input_shape: input.clone(),
        layers: specs.clone(),
        class_count: classes,
        regularizer: objective.regularizer.label().to_string(),
        shade_granularity: objective.regularizer.shade().map(|s| s.granularity),
        lr: Some(sgd.lr),
        momentum: Some(sgd.momentum),
        test_acc,
    };

    let started = Instant::now();
    let n = train.len();
    let epochs = cfg.epochs_for(n);
    let mut records = Vec::with_capacity(epochs);
    let mut best = f64::NEG_INFINITY;
    let mut last_test = None;
    for epoch in 1..=epochs {
        sgd.lr = schedule.lr(epoch - 1);
        let mut sums = (0.0, 0.0);
        for (b, idx) in data::minibatches(n, cfg.batch_size, derive_seed(cfg.seed, STREAM_EPOCH, epoch as u64))
            .iter()
            .enumerate()
        {
            let step_id = ((epoch as u64) << 32) | b as u64;
            let mut batch = train.batch(idx);
            if let Some(a) = &augment {
                batch = data::augment(&batch, a, derive_seed(cfg.seed, STREAM_AUGMENT, step_id))?;
            }
            let opts = StepOptions {
                update_before_grad: cfg.update_before_grad,
                dropout_seed: derive_seed(cfg.seed, STREAM_DROPOUT, step_id),
            };
            let stats = optim::train_step(&mut net, &batch, &objective, states.as_mut(), &mut sgd, &opts)?;
            let w = batch.len() as f64;
            sums.0 += stats.loss.cls * w;
            sums.1 += stats.loss.reg * w;
        }
        let (cls_loss, reg_loss) = (sums.0 / n as f64, sums.1 / n as f64);
        let evaluate = epoch % cfg.eval_every == 0 || epoch == epochs;
        let (train_acc, test_acc) = if evaluate {
            (Some(accuracy(&net, train)?), Some(accuracy(&net, &splits.test)?))
        } else {
            (None, None)
        };
        let layers = match &diag_set {
            Some(d) if epoch % cfg.diag_every == 0 || epoch == epochs => diagnose_dataset(&net, d, cfg.diag_bins)?,
            _ => Vec::new(),
        };
        let rec = MetricsRecord {
            epoch,
            lr: sgd.lr,
            train_loss: cls_loss + reg_loss,
            cls_loss,
            reg_loss,
            train_acc,
            test_acc,
            layers,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}, reg {:.4}) train_acc {} test_acc {}",
            rec.train_loss,
            cls_loss,
            reg_loss,
            opt(train_acc),
            opt(test_acc)
        );
        if let Some(f) = files.as_mut() {
            f.metrics.row(&rec.csv_row(&net))?;
            for d in &rec.layers {
                f.layers.row(&format!("{epoch},{}", d.csv_fields()))?;
            }
            f.timing.row(&format!("{epoch},{}", rec.wall_time))?;
        }
        if let Some(acc) = test_acc {
            last_test = Some(acc);
            if acc > best {
                best = acc;
                if let (Some(f), true) = (&files, cfg.checkpoints) {
                    Checkpoint::capture(&net, meta(epoch, Some(acc), &sgd), Some(&sgd), states.as_ref())
                        .save(&f.dir.join("best.ckpt"))?;
                }
            }
        }
        records.push(rec);
    }
    if let (Some(f), true) = (&files, cfg.checkpoints) {
        Checkpoint::capture(&net, meta(epochs, last_test, &sgd), Some(&sgd), states.as_ref())
            .save(&f.dir.join("final.ckpt"))?;
    }
    let test_acc = match last_test {
        Some(a) => a,
        None => accuracy(&net, &splits.test)?,
    };
    let val_acc = splits.val.as_ref().map(|v| accuracy(&net, v)).transpose()?;
    Ok(TrainOutcome {
        records,
        net,
        states,
        test_acc,
        val_acc,
        best_test_acc: best.max(test_acc),
    })
}

/// Loads data per `cfg`, trains, and writes outputs to `cfg.out_dir` if set.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    train_on(cfg, &splits, cfg.out_dir.as_deref())
}

/// Accuracy of a saved network on `d`.
pub fn cmd_eval(checkpoint: &Path, d: &Dataset) -> Result<f64, HarnessError> {
    let net = Checkpoint::load(checkpoint)?.network()?;
    accuracy(&net, d)
}

/// Per-layer diagnostics of a saved network; written as CSV to `out` if set.
pub fn cmd_diagnose(
    checkpoint: &Path,
    d: &Dataset,
    n_bins: usize,
    out: Option<&Path>,
) -> Result<Vec<LayerDiagnostics>, HarnessError> {
    if n_bins == 0 {
        return Err(HarnessError::Config("bins must be positive".into()));
    }
    let net = Checkpoint::load(checkpoint)?.network()?;
    let rows = diagnose_dataset(&net, d, n_bins)?;
    if let Some(path) = out {
        let mut text = String::from(diagnose::LAYER_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(&r.csv_fields());
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))?;
    }
    Ok(rows)
}
