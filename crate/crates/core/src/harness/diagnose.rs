//! Per-layer entropy diagnostics over parametric-layer outputs.

use crate::info::{self, InfoError};
use crate::nn::{self, LayerSpec, Network};
use crate::par;
use crate::Tensor;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// the layer output itself
    Pre,
    /// ReLU of the layer output, binned on the pre-activation's edges
    Post,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pre => "pre",
            Stage::Post => "post",
        }
    }
}

/// Unit-averaged information quantities for one layer and stage.
///
/// Convolutional channels are single units with all spatial positions as
/// samples. Quantities that can be `−∞` (constant units) are averaged over
/// the units where they are finite; `degenerate_units` counts units whose
/// `h_cond` is `−∞`. A layer with no finite unit reports `−∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub name: String,
    pub stage: Stage,
    pub units: usize,
    pub degenerate_units: usize,
    /// H(Y), differential
    pub h: f64,
    /// H(Y | C), differential
    pub h_cond: f64,
    /// H(Y | C) without the bin-width term
    pub h_cond_discrete: f64,
    /// I(Y, C)
    pub mi: f64,
    /// Σ_c p(c) · ½ ln(2πe·Var(Y | c))
    pub vbound: f64,
}

pub const LAYER_HEADER: &str = "layer,name,stage,units,degenerate_units,h,h_cond,h_cond_discrete,mi,vbound";

impl LayerDiagnostics {
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.layer,
            self.name,
            self.stage.as_str(),
            self.units,
            self.degenerate_units,
            self.h,
            self.h_cond,
            self.h_cond_discrete,
            self.mi,
            self.vbound
        )
    }
}

struct UnitStats {
    h: f64,
    h_cond: f64,
    h_cond_discrete: f64,
    mi: f64,
    vbound: f64,
}

/// Outputs of every parametric layer over `images`, in chunks to bound
/// memory; rows are in input order.
pub fn layer_outputs(net: &Network, images: &Tensor, chunk: usize) -> Result<Vec<(usize, Tensor)>, HarnessError> {
    let layers = net.parametric_layers();
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
    let k = images.batch();
    let mut start = 0;
    while start < k {
        let idx: Vec<usize> = (start..(start + chunk).min(k)).collect();
        let x = images.select_rows(&idx);
        let (_, cache) = nn::forward(net, &x)?;
        for (a, &l) in acc.iter_mut().zip(&layers) {
            a.extend_from_slice(cache.output(l).data());
        }
        start += chunk;
    }
    layers
        .iter()
        .zip(acc)
        .map(|(&l, data)| {
            let mut shape = vec![k];
            shape.extend_from_slice(net.layer_shape(l));
            Ok((l, Tensor::new(shape, data)?))
        })
        .collect()
}

fn unit_samples(t: &Tensor, labels: &[usize], unit: usize) -> (Vec<f64>, Vec<usize>) {
    let shape = t.shape();
    let spatial: usize = if shape.len() == 4 { shape[2] * shape[3] } else { 1 };
    let row = t.row_len();
    let mut ys = Vec::with_capacity(labels.len() * spatial);
    let mut cs = Vec::with_capacity(labels.len() * spatial);
    for (s, &c) in labels.iter().enumerate() {
        let start = s * row + unit * spatial;
        ys.extend_from_slice(&t.data()[start..start + spatial]);
        cs.extend(std::iter::repeat_n(c, spatial));
    }
    (ys, cs)
}

fn class_variance_bound(ys: &[f64], cs: &[usize]) -> Result<f64, InfoError> {
    let n_classes = cs.iter().copied().max().map_or(0, |m| m + 1);
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    for (&y, &c) in ys.iter().zip(cs) {
        per[c].push(y);
    }
    let used: usize = per.iter().filter(|v| v.len() >= 2).map(Vec::len).sum();
    if used == 0 {
        return Err(InfoError::AllClassesDegenerate);
    }
    let mut total = 0.0;
    for v in per.iter().filter(|v| v.len() >= 2) {
        total += v.len() as f64 / used as f64 * info::variance_bound(v)?;
    }
    Ok(total)
}

fn unit_stats(ys: &[f64], cs: &[usize], n_bins: usize, range: Option<(f64, f64)>) -> Result<UnitStats, InfoError> {
    let ce = info::conditional_entropy_in(ys, cs, n_bins, range)?;
    let mi = info::mutual_information_in(ys, cs, n_bins, range)?;
    let (lo, hi) = range.unwrap_or_else(|| minmax(ys));
    let h = if hi > lo {
        let mut hist = info::Histogram::with_range(lo, hi, n_bins);
        hist.add_all(ys);
        hist.differential_entropy()
    } else {
        info::DEGENERATE
    };
    Ok(UnitStats {
        h,
        h_cond: ce.value,
        h_cond_discrete: ce.discrete,
        mi: mi.value,
        vbound: class_variance_bound(ys, cs)?,
    })
}

fn minmax(ys: &[f64]) -> (f64, f64) {
    ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
        (lo.min(y), hi.max(y))
    })
}

fn finite_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs
        .filter(|x| x.is_finite())
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        info::DEGENERATE
    } else {
        sum / n as f64
    }
}

fn aggregate(layer: usize, name: String, stage: Stage, stats: &[UnitStats]) -> LayerDiagnostics {
    LayerDiagnostics {
        layer,
        name,
        stage,
        units: stats.len(),
        degenerate_units: stats.iter().filter(|s| !s.h_cond.is_finite()).count(),
        h: finite_mean(stats.iter().map(|s| s.h)),
        h_cond: finite_mean(stats.iter().map(|s| s.h_cond)),
        h_cond_discrete: stats.iter().map(|s| s.h_cond_discrete).sum::<f64>() / stats.len().max(1) as f64,
        mi: stats.iter().map(|s| s.mi).sum::<f64>() / stats.len().max(1) as f64,
        vbound: finite_mean(stats.iter().map(|s| s.vbound)),
    }
}

/// Diagnostics for every parametric layer of `net` on `(images, labels)`.
///
/// Layers followed by a ReLU also get a [`Stage::Post`] row; it reuses the
/// pre-activation bin edges, so the binned post-activation is a function of
/// the binned pre-activation and its plug-in entropies cannot exceed the
/// pre-activation ones.
pub fn diagnose_network(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    n_bins: usize,
) -> Result<Vec<LayerDiagnostics>, HarnessError> {
    let outputs = layer_outputs(net, images, 256)?;
    let mut rows = Vec::new();
    for (layer, t) in outputs {
        let shape = net.layer_shape(layer);
        let units = shape[0];
        let name = net.layers()[layer].spec.name();
        let followed_by_relu = net.layers().get(layer + 1).map(|l| l.spec) == Some(LayerSpec::Relu);
        let per_unit: Vec<Result<(UnitStats, Option<UnitStats>), InfoError>> = par::map_range(units, |u| {
            let (ys, cs) = unit_samples(&t, labels, u);
            let pre = unit_stats(&ys, &cs, n_bins, None)?;
            let post = if followed_by_relu {
                let (lo, hi) = minmax(&ys);
                let relu: Vec<f64> = ys.iter().map(|&y| y.max(0.0)).collect();
                Some(unit_stats(&relu, &cs, n_bins, (hi > lo).then_some((lo, hi)))?)
            } else {
                None
            };
            Ok((pre, post))
        });
        let mut pre = Vec::with_capacity(units);
        let mut post = Vec::with_capacity(units);
        for r in per_unit {
            let (a, b) = r.map_err(HarnessError::Info)?;
            pre.push(a);
            post.extend(b);
        }
        rows.push(aggregate(layer, name.clone(), Stage::Pre, &pre));
        if followed_by_relu {
            rows.push(aggregate(layer, name, Stage::Post, &post));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{arch, init_network};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, seed: u64) -> (Network, Tensor, Vec<usize>) {
        let net = init_network(&arch::mlp3(5, 8, 3), &[5], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![n, 5], (0..n * 5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels = (0..n).map(|i| i % 3).collect();
        (net, x, labels)
    }

    #[test]
    fn rows_cover_layers_and_stages() {
        let (net, x, labels) = toy(300, 1);
        let rows = diagnose_network(&net, &x, &labels, 16).unwrap();
        let keys: Vec<(usize, &str)> = rows.iter().map(|r| (r.layer, r.stage.as_str())).collect();
        assert_eq!(keys, vec![(1, "pre"), (1, "post"), (3, "pre"), (3, "post"), (5, "pre")]);
        assert_eq!(rows[0].units, 8);
        assert_eq!(rows[4].units, 3);
    }

    #[test]
    fn relu_does_not_raise_discrete_conditional_entropy() {
        for seed in 0..5 {
            let (net, x, labels) = toy(400, seed);
            let rows = diagnose_network(&net, &x, &labels, 32).unwrap();
            for pair in rows.windows(2) {
                if let [a, b] = pair {
                    if a.stage == Stage::Pre && b.stage == Stage::Post {
                        assert!(b.h_cond_discrete <= a.h_cond_discrete + 1e-12);
                        assert!(b.mi <= a.mi + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_class_has_zero_mi() {
        let (net, x, _) = toy(200, 2);
        let labels = vec![0; 200];
        for r in diagnose_network(&net, &x, &labels, 16).unwrap() {
            assert_eq!(r.mi, 0.0);
        }
    }

    #[test]
    fn chunking_does_not_change_outputs() {
        let (net, x, _) = toy(50, 3);
        let a = layer_outputs(&net, &x, 7).unwrap();
        let b = layer_outputs(&net, &x, 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_variance_bound_matches_weighted_oracle() {
        let ys = [0.0, 2.0, 1.0, 1.0, 3.0, 5.0, 4.0];
        let cs = [0, 0, 1, 1, 1, 1, 2];
        // class 2 has a single sample and is skipped
        let v0: f64 = 2.0;
        let v1: f64 = {
            let xs = [1.0, 1.0, 3.0, 5.0];
            let m = 2.5;
            xs.iter().map(|x: &f64| (x - m).powi(2)).sum::<f64>() / 3.0
        };
        let b = |v: f64| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln();
        let want = 2.0 / 6.0 * b(v0) + 4.0 / 6.0 * b(v1);
        assert!((class_variance_bound(&ys, &cs).unwrap() - want).abs() < 1e-12);
    }
}
