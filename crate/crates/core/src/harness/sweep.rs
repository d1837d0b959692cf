//! Grid of training runs over sample count × seed × regularizer arm.
//!
//! Every cell subsamples the same training pool with its seed, so for a
//! fixed seed the training sets are nested across counts. Cells run in
//! order; each finished cell leaves `cells/<name>/result.csv`, and a rerun
//! into the same directory with the same grid reuses finished cells.
//!
//! Outputs: `long.csv` (one row per cell), `summary.csv` (mean/std over
//! seeds per count and arm) and `best.csv` (per count and regularizer
//! family, the arm with the best mean selection accuracy next to the
//! unregularized baseline).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RegularizerName};
use super::{load_pool, subsample_pool, train_on, HarnessError};

/// One regularizer setting, written `name` or `name:value`, e.g. `none`,
/// `shade:1e-3`, `weight_decay:5e-4`, `dropout:0.5`. The value is β for
/// SHADE and weight decay and the drop rate for dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepArm {
    pub regularizer: RegularizerName,
    pub value: Option<f64>,
}

impl SweepArm {
    pub fn none() -> Self {
        Self {
            regularizer: RegularizerName::None,
            value: None,
        }
    }

    pub fn shade(beta: f64) -> Self {
        Self {
            regularizer: RegularizerName::Shade,
            value: Some(beta),
        }
    }

    pub fn family(&self) -> &'static str {
        match self.regularizer {
            RegularizerName::None => "none",
            RegularizerName::WeightDecay => "weight_decay",
            RegularizerName::Dropout => "dropout",
            RegularizerName::Shade => "shade",
            RegularizerName::ShadeDropout => "shade_dropout",
        }
    }

    pub fn label(&self) -> String {
        match self.value {
            Some(v) => format!("{}:{v}", self.family()),
            None => self.family().to_string(),
        }
    }

    /// `cfg` with this arm's regularizer applied.
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.regularizer = self.regularizer;
        if let Some(v) = self.value {
            match self.regularizer {
                RegularizerName::Dropout => c.dropout_rate = v,
                RegularizerName::None => {}
                _ => c.beta = v,
            }
        }
        c
    }
}

impl FromStr for SweepArm {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |m: String| HarnessError::Config(format!("regularizer arm '{s}': {m}"));
        let (name, value) = match s.split_once(':') {
            Some((n, v)) => (n, Some(v.trim().parse::<f64>().map_err(|e| err(e.to_string()))?)),
            None => (s, None),
        };
        let regularizer = match name.trim() {
            "none" => RegularizerName::None,
            "weight_decay" => RegularizerName::WeightDecay,
            "dropout" => RegularizerName::Dropout,
            "shade" => RegularizerName::Shade,
            "shade_dropout" => RegularizerName::ShadeDropout,
            other => return Err(err(format!("unknown regularizer '{other}'"))),
        };
        if regularizer == RegularizerName::None && value.is_some() {
            return Err(err("'none' takes no value".into()));
        }
        Ok(Self { regularizer, value })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub arms: Vec<SweepArm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub n_train: usize,
    pub seed: u64,
    pub arm: String,
    pub family: String,
    pub final_train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub test_acc: f64,
}

pub const LONG_HEADER: &str = "n_train,seed,arm,family,final_train_loss,train_acc,val_acc,test_acc";
pub const SUMMARY_HEADER: &str = "n_train,arm,family,runs,mean_test_acc,std_test_acc,mean_val_acc,std_val_acc";
pub const BEST_HEADER: &str = "n_train,family,arm,selected_by,mean_test_acc,baseline_mean_test_acc,gap";

impl CellResult {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n_train,
            self.seed,
            self.arm,
            self.family,
            self.final_train_loss,
            self.train_acc,
            self.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            self.test_acc
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        Some(Self {
            n_train: f[0].parse().ok()?,
            seed: f[1].parse().ok()?,
            arm: f[2].to_string(),
            family: f[3].to_string(),
            final_train_loss: f[4].parse().ok()?,
            train_acc: f[5].parse().ok()?,
            val_acc: if f[6].is_empty() {
                None
            } else {
                Some(f[6].parse().ok()?)
            },
            test_acc: f[7].parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub n_train: usize,
    pub arm: String,
    pub family: String,
    pub runs: usize,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub mean_val_acc: Option<f64>,
    pub std_val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestRow {
    pub n_train: usize,
    pub family: String,
    pub arm: String,
    /// `val` when a validation set exists, otherwise `test`
    pub selected_by: &'static str,
    pub mean_test_acc: f64,
    pub baseline_mean_test_acc: Option<f64>,
    /// `mean_test_acc − baseline_mean_test_acc`
    pub gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub best: Vec<BestRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(spec: &SweepSpec, cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &n in &spec.counts {
        for arm in &spec.arms {
            let label = arm.label();
            let sel: Vec<&CellResult> = cells.iter().filter(|c| c.n_train == n && c.arm == label).collect();
            if sel.is_empty() {
                continue;
            }
            let (mt, st) = mean_std(&sel.iter().map(|c| c.test_acc).collect::<Vec<_>>());
            let vals: Option<Vec<f64>> = sel.iter().map(|c| c.val_acc).collect();
            let val = vals.map(|v| mean_std(&v));
            rows.push(SummaryRow {
                n_train: n,
                arm: label,
                family: arm.family().to_string(),
                runs: sel.len(),
                mean_test_acc: mt,
                std_test_acc: st,
                mean_val_acc: val.map(|v| v.0),
                std_val_acc: val.map(|v| v.1),
            });
        }
    }
    rows
}

/// Per count and non-baseline family, the arm with the highest mean
/// validation accuracy (test accuracy when there is no validation set);
/// ties go to the arm listed first.
pub fn select_best(spec: &SweepSpec, summary: &[SummaryRow]) -> Vec<BestRow> {
    let mut families: Vec<&'static str> = Vec::new();
    for a in &spec.arms {
        if a.regularizer != RegularizerName::None && !families.contains(&a.family()) {
            families.push(a.family());
        }
    }
    let mut out = Vec::new();
    for &n in &spec.counts {
        let baseline = summary
            .iter()
            .find(|r| r.n_train == n && r.family == "none")
            .map(|r| r.mean_test_acc);
        for fam in &families {
            let mut best: Option<(&SummaryRow, f64)> = None;
            let mut selected_by = "val";
            for r in summary.iter().filter(|r| r.n_train == n && r.family == *fam) {
                let score = match r.mean_val_acc {
                    Some(v) => v,
                    None => {
                        selected_by = "test";
                        r.mean_test_acc
                    }
                };
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((r, score));
                }
            }
            if let Some((r, _)) = best {
                out.push(BestRow {
                    n_train: n,
                    family: fam.to_string(),
                    arm: r.arm.clone(),
                    selected_by,
                    mean_test_acc: r.mean_test_acc,
                    baseline_mean_test_acc: baseline,
                    gap: baseline.map(|b| r.mean_test_acc - b),
                });
            }
        }
    }
    out
}

fn cell_name(n: usize, seed: u64, arm: &SweepArm) -> String {
    let label: String = arm
        .label()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-' {
                c
            } else {
                '='
            }
        })
        .collect();
    format!("n{n}_seed{seed}_{label}")
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn read_finished(dir: &Path) -> Option<CellResult> {
    let text = std::fs::read_to_string(dir.join("result.csv")).ok()?;
    CellResult::parse(text.lines().nth(1)?)
}

/// Runs the grid into `out`. Rerunning with the same config and grid
/// resumes; a different config or grid in the same directory is refused.
pub fn cmd_sweep(cfg: &ExperimentConfig, spec: &SweepSpec, out: &Path) -> Result<SweepOutcome, HarnessError> {
    cfg.validate()?;
    if spec.counts.is_empty() || spec.seeds.is_empty() || spec.arms.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one count, seed and arm".into(),
        ));
    }
    for arm in &spec.arms {
        arm.apply(cfg).validate()?;
    }
    let pool = load_pool(cfg)?;
    if let Some(&too_many) = spec.counts.iter().find(|&&n| n > pool.train.len()) {
        return Err(HarnessError::Config(format!(
            "sample count {too_many} exceeds the training pool of {}",
            pool.train.len()
        )));
    }

    let manifest = format!(
        "{}\n[sweep]\n{}",
        cfg.to_toml(),
        toml::to_string(spec).expect("spec serializes")
    );
    let manifest_path = out.join("sweep.toml");
    if manifest_path.exists() {
        let old = std::fs::read_to_string(&manifest_path).map_err(|e| HarnessError::io(&manifest_path, e))?;
        if old != manifest {
            return Err(HarnessError::OutputExists(out.to_path_buf()));
        }
    } else {
        super::prepare_out_dir(out)?;
        write(&manifest_path, &manifest)?;
    }
    let cells_dir = out.join("cells");
    std::fs::create_dir_all(&cells_dir).map_err(|e| HarnessError::io(&cells_dir, e))?;

    let mut base = cfg.clone();
    base.data_seed = Some(cfg.data_seed());
    base.checkpoints = false;
    base.out_dir = None;

    let mut cells = Vec::new();
    for &n in &spec.counts {
        for &seed in &spec.seeds {
            for arm in &spec.arms {
                let name = cell_name(n, seed, arm);
                let dir = cells_dir.join(&name);
                if let Some(done) = read_finished(&dir) {
                    log::info!("cell {name}: reusing finished result");
                    cells.push(done);
                    continue;
                }
                let partial: PathBuf = cells_dir.join(format!(".{name}.partial"));
                if partial.exists() {
                    log::warn!("cell {name}: discarding incomplete earlier attempt");
                    std::fs::remove_dir_all(&partial).map_err(|e| HarnessError::io(&partial, e))?;
                }
                let mut c = arm.apply(&base);
                c.seed = seed;
                c.n_train = Some(n);
                let splits = subsample_pool(&c, &pool)?;
                let outcome = train_on(&c, &splits, Some(&partial))?;
                let last = outcome.last();
                let result = CellResult {
                    n_train: n,
                    seed,
                    arm: arm.label(),
                    family: arm.family().to_string(),
                    final_train_loss: last.train_loss,
                    train_acc: last.train_acc.unwrap_or(f64::NAN),
                    val_acc: outcome.val_acc,
                    test_acc: outcome.test_acc,
                };
                log::info!("cell {name}: test_acc {} val_acc {:?}", result.test_acc, result.val_acc);
                write(
                    &partial.join("result.csv"),
                    &format!("{LONG_HEADER}\n{}\n", result.csv_row()),
                )?;
                std::fs::rename(&partial, &dir).map_err(|e| HarnessError::io(&dir, e))?;
                cells.push(result);
            }
        }
    }

    let summary = summarize(spec, &cells);
    let best = select_best(spec, &summary);
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut long = format!("{LONG_HEADER}\n");
    for c in &cells {
        long.push_str(&c.csv_row());
        long.push('\n');
    }
    write(&out.join("long.csv"), &long)?;
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in &summary {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.n_train,
            r.arm,
            r.family,
            r.runs,
            r.mean_test_acc,
            r.std_test_acc,
            opt(r.mean_val_acc),
            opt(r.std_val_acc)
        ));
    }
    write(&out.join("summary.csv"), &s)?;
    let mut b = format!("{BEST_HEADER}\n");
    for r in &best {
        b.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.n_train,
            r.family,
            r.arm,
            r.selected_by,
            r.mean_test_acc,
            opt(r.baseline_mean_test_acc),
            opt(r.gap)
        ));
    }
    write(&out.join("best.csv"), &b)?;
    Ok(SweepOutcome { cells, summary, best })
}
