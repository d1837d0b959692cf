//! SHADE conditional-entropy penalty and the weight-decay / dropout baselines.
//!
//! SHADE attaches a binary latent code `Z` to every regularized unit. The
//! probability that the unit's pattern is present is modelled by the gate
//! `σ(y) = 1 − exp(−ReLU(y))`, and the penalty is the gate-weighted squared
//! deviation of the pre-activation from the running class-code means
//! `μ⁰, μ¹`. Those means and the code priors `p⁰, p¹` are exponential moving
//! averages updated once per minibatch and held constant while
//! differentiating.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{LayerSpec, Network, ParamGrads, Params};
use crate::par;
use crate::tensor::Tensor;

/// Priors smaller than this are treated as collapsed when dividing.
const MIN_PRIOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegularizerError {
    #[error("expected pre-activations for {expected} layers, got {found}")]
    LayerCount { expected: usize, found: usize },
    #[error("layer {layer}: {found} units in pre-activation, {expected} SHADE states")]
    UnitCount {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid regularizer setting: {0}")]
    Invalid(String),
}

/// `p(Z = 1 | y)`.
pub fn gate(y: f64) -> f64 {
    if y > 0.0 {
        -(-y).exp_m1()
    } else {
        0.0
    }
}

/// Derivative of [`gate`]; 0 on `(−∞, 0]`.
pub fn gate_deriv(y: f64) -> f64 {
    if y > 0.0 {
        (-y).exp()
    } else {
        0.0
    }
}

/// Moving-average state of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadeUnitState {
    /// running estimate of E(Y | Z = 0)
    pub mu0: f64,
    /// running estimate of E(Y | Z = 1)
    pub mu1: f64,
    pub p0: f64,
    pub p1: f64,
}

impl Default for ShadeUnitState {
    fn default() -> Self {
        Self {
            mu0: -1.0,
            mu1: 1.0,
            p0: 0.5,
            p1: 0.5,
        }
    }
}

impl ShadeUnitState {
    /// Penalty contribution of one sample, before batch normalization.
    #[inline]
    pub fn sample_penalty(&self, y: f64) -> f64 {
        let s = gate(y);
        s * (y - self.mu1).powi(2) + (1.0 - s) * (y - self.mu0).powi(2)
    }

    /// Derivative of [`sample_penalty`](Self::sample_penalty) w.r.t. `y`.
    #[inline]
    pub fn sample_grad(&self, y: f64) -> f64 {
        let s = gate(y);
        let d1 = y - self.mu1;
        let d0 = y - self.mu0;
        gate_deriv(y) * (d1 * d1 - d0 * d0) + 2.0 * s * d1 + 2.0 * (1.0 - s) * d0
    }

    /// One moving-average step from the batch means of `p(1|y)`, `p(1|y)·y`
    /// and `p(0|y)·y`. Priors are refreshed first and the means divide by
    /// the refreshed priors.
    pub fn update(&mut self, lambda: f64, mean_gate: f64, mean_gate_y: f64, mean_off_y: f64) {
        let keep = 1.0 - lambda;
        self.p1 = lambda * self.p1 + keep * mean_gate;
        self.p0 = lambda * self.p0 + keep * (1.0 - mean_gate);
        self.mu1 = lambda * self.mu1 + keep * mean_gate_y / guard_prior(self.p1);
        self.mu0 = lambda * self.mu0 + keep * mean_off_y / guard_prior(self.p0);
    }
}

fn guard_prior(p: f64) -> f64 {
    if p < MIN_PRIOR {
        log::warn!("SHADE code prior collapsed to {p:e}; clamping to {MIN_PRIOR:e}");
        MIN_PRIOR
    } else {
        p
    }
}

/// How convolutional feature maps are split into SHADE units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateGranularity {
    /// One unit per channel; spatial positions count as extra samples.
    #[default]
    PerChannel,
    /// One unit per (channel, row, col).
    PerLocation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadeConfig {
    pub beta: f64,
    pub lambda: f64,
    pub include_logits: bool,
    pub granularity: StateGranularity,
}

impl Default for ShadeConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            lambda: 0.8,
            include_logits: false,
            granularity: StateGranularity::PerChannel,
        }
    }
}

impl ShadeConfig {
    pub fn validate(&self) -> Result<(), RegularizerError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(RegularizerError::Invalid(format!("beta {} must be >= 0", self.beta)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(RegularizerError::Invalid(format!(
                "lambda {} must lie in (0, 1)",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Unit layout of one regularized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct UnitLayout {
    units: usize,
    /// consecutive elements of a sample row belonging to the same unit
    spatial: usize,
}

impl UnitLayout {
    fn of(sample_shape: &[usize], granularity: StateGranularity) -> Self {
        let row: usize = sample_shape.iter().product();
        match (sample_shape.len(), granularity) {
            (3, StateGranularity::PerChannel) => UnitLayout {
                units: sample_shape[0],
                spatial: sample_shape[1] * sample_shape[2],
            },
            _ => UnitLayout { units: row, spatial: 1 },
        }
    }

    fn row(&self) -> usize {
        self.units * self.spatial
    }

    /// Calls `f(y)` for every sample value of unit `u`.
    #[inline]
    fn for_each(&self, data: &[f64], u: usize, mut f: impl FnMut(f64)) {
        let row = self.row();
        let k = data.len() / row;
        for s in 0..k {
            let start = s * row + u * self.spatial;
            for &y in &data[start..start + self.spatial] {
                f(y);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadeLayerState {
    /// index of the regularized layer in the network
    pub layer: usize,
    pub units: Vec<ShadeUnitState>,
    layout: (usize, usize),
}

impl ShadeLayerState {
    fn layout(&self) -> UnitLayout {
        UnitLayout {
            units: self.layout.0,
            spatial: self.layout.1,
        }
    }
}

/// SHADE states for every regularized layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadeStates {
    pub granularity: StateGranularity,
    pub layers: Vec<ShadeLayerState>,
}

impl ShadeStates {
    pub fn new(net: &Network, config: &ShadeConfig) -> Self {
        let layers = net
            .representation_layers(config.include_logits)
            .into_iter()
            .map(|layer| Self::fresh_layer(layer, net.layer_shape(layer), config.granularity))
            .collect();
        Self {
            granularity: config.granularity,
            layers,
        }
    }

    /// Builds states for explicit per-sample shapes, with layer ids `0..n`.
    pub fn for_shapes(shapes: &[&[usize]], granularity: StateGranularity) -> Self {
        Self {
            granularity,
            layers: shapes
                .iter()
                .enumerate()
                .map(|(i, s)| Self::fresh_layer(i, s, granularity))
                .collect(),
        }
    }

    fn fresh_layer(layer: usize, shape: &[usize], granularity: StateGranularity) -> ShadeLayerState {
        let lay = UnitLayout::of(shape, granularity);
        ShadeLayerState {
            layer,
            units: vec![ShadeUnitState::default(); lay.units],
            layout: (lay.units, lay.spatial),
        }
    }

    /// Replaces unit states (e.g. from a checkpoint), checking counts.
    pub fn set_units(&mut self, idx: usize, units: Vec<ShadeUnitState>) -> Result<(), RegularizerError> {
        let l = &mut self.layers[idx];
        if units.len() != l.units.len() {
            return Err(RegularizerError::UnitCount {
                layer: l.layer,
                expected: l.units.len(),
                found: units.len(),
            });
        }
        l.units = units;
        Ok(())
    }

    pub fn unit_count(&self) -> usize {
        self.layers.iter().map(|l| l.units.len()).sum()
    }

    fn check(&self, preacts: &[&Tensor]) -> Result<(), RegularizerError> {
        if preacts.len() != self.layers.len() {
            return Err(RegularizerError::LayerCount {
                expected: self.layers.len(),
                found: preacts.len(),
            });
        }
        for (l, t) in self.layers.iter().zip(preacts) {
            if t.row_len() != l.layout().row() {
                return Err(RegularizerError::UnitCount {
                    layer: l.layer,
                    expected: l.units.len(),
                    found: t.row_len(),
                });
            }
        }
        Ok(())
    }
}

/// Batch-mean SHADE penalty: for each unit, the mean over its samples of
/// `Σ_z p(z|y)(y − μ^z)²`, summed over units and layers.
pub fn shade_penalty(preacts: &[&Tensor], states: &ShadeStates) -> Result<f64, RegularizerError> {
    states.check(preacts)?;
    let mut total = 0.0;
    for (l, t) in states.layers.iter().zip(preacts) {
        let lay = l.layout();
        let n = (t.batch() * lay.spatial) as f64;
        let per_unit = par::map_range(lay.units, |u| {
            let st = &l.units[u];
            let mut acc = 0.0;
            lay.for_each(t.data(), u, |y| acc += st.sample_penalty(y));
            acc
        });
        total += per_unit.iter().sum::<f64>() / n;
    }
    Ok(total)
}

/// Gradient of [`shade_penalty`] w.r.t. each pre-activation, states frozen.
pub fn shade_grad(preacts: &[&Tensor], states: &ShadeStates) -> Result<Vec<Tensor>, RegularizerError> {
    states.check(preacts)?;
    Ok(states
        .layers
        .iter()
        .zip(preacts)
        .map(|(l, t)| {
            let lay = l.layout();
            let inv_n = 1.0 / (t.batch() * lay.spatial) as f64;
            let mut g = Tensor::zeros(t.shape());
            let row = lay.row();
            par::for_each_chunk_mut(g.data_mut(), row, |s, grow| {
                let yrow = &t.data()[s * row..(s + 1) * row];
                for (j, (gv, &y)) in grow.iter_mut().zip(yrow).enumerate() {
                    *gv = l.units[j / lay.spatial].sample_grad(y) * inv_n;
                }
            });
            g
        })
        .collect())
}

/// One moving-average step of every unit state from the current batch.
pub fn update_shade_states(states: &mut ShadeStates, preacts: &[&Tensor], lambda: f64) -> Result<(), RegularizerError> {
    states.check(preacts)?;
    for (l, t) in states.layers.iter_mut().zip(preacts) {
        let lay = l.layout();
        let n = (t.batch() * lay.spatial) as f64;
        let moments = par::map_range(lay.units, |u| {
            let (mut g, mut gy, mut off_y) = (0.0, 0.0, 0.0);
            lay.for_each(t.data(), u, |y| {
                let s = gate(y);
                g += s;
                gy += s * y;
                off_y += (1.0 - s) * y;
            });
            (g / n, gy / n, off_y / n)
        });
        for (st, (g, gy, off_y)) in l.units.iter_mut().zip(moments) {
            st.update(lambda, g, gy, off_y);
        }
    }
    Ok(())
}

/// `½ Σ ‖W‖²` over weight tensors (biases excluded) and its gradient `W`.
pub fn weight_decay(net: &Network) -> (f64, ParamGrads) {
    let mut penalty = 0.0;
    let layers = net
        .layers()
        .iter()
        .map(|l| {
            l.params.as_ref().map(|p| {
                penalty += 0.5 * p.weight.sum_sq();
                Params {
                    weight: p.weight.clone(),
                    bias: Tensor::zeros(p.bias.shape()),
                }
            })
        })
        .collect();
    (penalty, ParamGrads { layers })
}

/// Inverted-dropout mask: entries are `0` or `1/(1−rate)` while training and
/// all ones at evaluation.
pub fn dropout_mask(shape: &[usize], rate: f64, seed: u64, train: bool) -> Tensor {
    if !train || rate == 0.0 {
        return Tensor::full(shape, 1.0);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        if rng.gen::<f64>() < keep {
            *v = scale;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    /// Rate per ReLU layer in order; a single value applies to all of them.
    pub rates: Vec<f64>,
}

impl DropoutConfig {
    pub fn uniform(rate: f64) -> Self {
        Self { rates: vec![rate] }
    }

    /// Rate for the `i`-th ReLU layer.
    pub fn rate(&self, i: usize) -> f64 {
        match self.rates.as_slice() {
            [r] => *r,
            rs => rs.get(i).copied().unwrap_or(0.0),
        }
    }

    /// Masks for every ReLU output of `net`, one seed per layer.
    pub fn masks(&self, net: &Network, batch: usize, seed: u64) -> Vec<Option<Tensor>> {
        let mut relu_idx = 0;
        net.layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if l.spec != LayerSpec::Relu {
                    return None;
                }
                let rate = self.rate(relu_idx);
                relu_idx += 1;
                (rate > 0.0).then(|| {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(net.layer_shape(i));
                    dropout_mask(&shape, rate, seed ^ ((i as u64 + 1) << 48), true)
                })
            })
            .collect()
    }

    fn validate(&self) -> Result<(), RegularizerError> {
        for &r in &self.rates {
            if !(0.0..1.0).contains(&r) {
                return Err(RegularizerError::Invalid(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegularizerKind {
    None,
    WeightDecay { coef: f64 },
    Dropout(DropoutConfig),
    Shade(ShadeConfig),
    ShadePlusDropout(ShadeConfig, DropoutConfig),
}

impl RegularizerKind {
    pub fn validate(&self) -> Result<(), RegularizerError> {
        match self {
            RegularizerKind::None => Ok(()),
            RegularizerKind::WeightDecay { coef } => {
                if *coef >= 0.0 && coef.is_finite() {
                    Ok(())
                } else {
                    Err(RegularizerError::Invalid(format!("weight decay {coef} must be >= 0")))
                }
            }
            RegularizerKind::Dropout(d) => d.validate(),
            RegularizerKind::Shade(s) => s.validate(),
            RegularizerKind::ShadePlusDropout(s, d) => s.validate().and(d.validate()),
        }
    }

    /// Weight `β` on the penalty term of the objective.
    pub fn beta(&self) -> f64 {
        match self {
            RegularizerKind::WeightDecay { coef } => *coef,
            RegularizerKind::Shade(s) | RegularizerKind::ShadePlusDropout(s, _) => s.beta,
            _ => 0.0,
        }
    }

    pub fn shade(&self) -> Option<&ShadeConfig> {
        match self {
            RegularizerKind::Shade(s) | RegularizerKind::ShadePlusDropout(s, _) => Some(s),
            _ => None,
        }
    }

    pub fn dropout(&self) -> Option<&DropoutConfig> {
        match self {
            RegularizerKind::Dropout(d) | RegularizerKind::ShadePlusDropout(_, d) => Some(d),
            _ => None,
        }
    }

    /// Short identifier used in sweep outputs, e.g. `shade`, `weight_decay`.
    pub fn label(&self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::WeightDecay { .. } => "weight_decay",
            RegularizerKind::Dropout(_) => "dropout",
            RegularizerKind::Shade(_) => "shade",
            RegularizerKind::ShadePlusDropout(..) => "shade_dropout",
        }
    }
}
