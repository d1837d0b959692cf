//! Composite objective `cls + β·Ω`, momentum SGD and the per-batch step.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::nn::{self, ForwardCache, Network, NnError, ParamGrads, Params};
use crate::regularizers::{self, RegularizerError, RegularizerKind, ShadeStates};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("SHADE regularizer selected but no SHADE states supplied")]
    MissingStates,
    #[error("SHADE states supplied for a non-SHADE regularizer")]
    UnexpectedStates,
    #[error("gradient for layer {0} does not match its parameters")]
    GradShape(usize),
    #[error("non-finite loss {0}")]
    Diverged(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    /// β·Ω
    pub reg: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub regularizer: RegularizerKind,
}

impl Objective {
    pub fn new(regularizer: RegularizerKind) -> Self {
        Self { regularizer }
    }

    pub fn beta(&self) -> f64 {
        self.regularizer.beta()
    }
}

fn check_states<'a>(
    objective: &Objective,
    states: Option<&'a ShadeStates>,
) -> Result<Option<&'a ShadeStates>, TrainError> {
    match (objective.regularizer.shade(), states) {
        (Some(_), None) => Err(TrainError::MissingStates),
        (None, Some(_)) => Err(TrainError::UnexpectedStates),
        (_, s) => Ok(s),
    }
}

fn preacts<'a>(cache: &'a ForwardCache, states: &ShadeStates) -> Vec<&'a Tensor> {
    states.layers.iter().map(|l| cache.output(l.layer)).collect()
}

/// Loss terms for an already computed forward pass.
pub fn loss_terms(
    net: &Network,
    cache: &ForwardCache,
    labels: &[usize],
    objective: &Objective,
    states: Option<&ShadeStates>,
) -> Result<LossBreakdown, TrainError> {
    let states = check_states(objective, states)?;
    let (cls, _) = nn::softmax_cross_entropy(cache.logits(), labels)?;
    let beta = objective.beta();
    let omega = match (&objective.regularizer, states) {
        (RegularizerKind::WeightDecay { .. }, _) => regularizers::weight_decay(net).0,
        (_, Some(st)) => regularizers::shade_penalty(&preacts(cache, st), st)?,
        _ => 0.0,
    };
    Ok(LossBreakdown { cls, reg: beta * omega })
}

/// Loss terms and parameter gradients of `cls + β·Ω` with SHADE states held
/// constant.
pub fn loss_and_grads(
    net: &Network,
    cache: &ForwardCache,
    labels: &[usize],
    objective: &Objective,
    states: Option<&ShadeStates>,
) -> Result<(LossBreakdown, ParamGrads), TrainError> {
    let states = check_states(objective, states)?;
    let (cls, logit_grad) = nn::softmax_cross_entropy(cache.logits(), labels)?;
    let beta = objective.beta();
    let mut breakdown = LossBreakdown { cls, reg: 0.0 };
    let mut extra: Vec<Option<Tensor>> = Vec::new();
    if let Some(st) = states {
        let pre = preacts(cache, st);
        breakdown.reg = beta * regularizers::shade_penalty(&pre, st)?;
        if beta != 0.0 {
            extra = vec![None; net.layers().len()];
            for (l, g) in st.layers.iter().zip(regularizers::shade_grad(&pre, st)?) {
                extra[l.layer] = Some(g.scale(beta));
            }
        }
    }
    let mut grads = nn::backward(net, cache, &logit_grad, &extra)?;
    if let RegularizerKind::WeightDecay { coef } = objective.regularizer {
        let (omega, wd) = regularizers::weight_decay(net);
        breakdown.reg = coef * omega;
        for (g, w) in grads.layers.iter_mut().zip(wd.layers) {
            if let (Some(g), Some(w)) = (g, w) {
                g.weight.add_scaled(&w.weight, coef)?;
            }
        }
    }
    Ok((breakdown, grads))
}

/// `cls + β·Ω` on a batch, evaluated without dropout.
pub fn total_loss(
    net: &Network,
    batch: &Batch,
    objective: &Objective,
    states: Option<&ShadeStates>,
) -> Result<(f64, LossBreakdown), TrainError> {
    let (_, cache) = nn::forward(net, &batch.images)?;
    let b = loss_terms(net, &cache, &batch.labels, objective, states)?;
    Ok((b.total(), b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Option<Params>>,
}

impl SgdState {
    pub fn new(net: &Network, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: ParamGrads::zeros_like(net).layers,
        }
    }
}

/// `v ← m·v + g; p ← p − lr·v` for every parameter tensor.
pub fn sgd_step(net: &mut Network, grads: &ParamGrads, state: &mut SgdState) -> Result<(), TrainError> {
    let layers = net.layers_mut();
    if grads.layers.len() != layers.len() || state.velocity.len() != layers.len() {
        return Err(TrainError::GradShape(grads.layers.len().min(state.velocity.len())));
    }
    for (i, ((layer, g), v)) in layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity)
        .enumerate()
    {
        match (&mut layer.params, g, v) {
            (Some(p), Some(g), Some(v)) => {
                for (param, grad, vel) in [
                    (&mut p.weight, &g.weight, &mut v.weight),
                    (&mut p.bias, &g.bias, &mut v.bias),
                ] {
                    if param.shape() != grad.shape() || param.shape() != vel.shape() {
                        return Err(TrainError::GradShape(i));
                    }
                    for ((pv, &gv), vv) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                        *vv = state.momentum * *vv + gv;
                        *pv -= state.lr * *vv;
                    }
                }
            }
            (None, None, None) => {}
            _ => return Err(TrainError::GradShape(i)),
        }
    }
    Ok(())
}

/// Step decay: `base · gamma^(number of milestones ≤ epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub gamma: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            gamma: 1.0,
            milestones: Vec::new(),
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    /// Run the SHADE moving-average update before differentiating (the
    /// default) rather than after the parameter step.
    pub update_before_grad: bool,
    /// Seed for this step's dropout masks.
    pub dropout_seed: u64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            update_before_grad: true,
            dropout_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: LossBreakdown,
    pub correct: usize,
}

/// One training step: forward (with dropout masks if configured), SHADE
/// state update, loss and gradients with frozen states, momentum update.
pub fn train_step(
    net: &mut Network,
    batch: &Batch,
    objective: &Objective,
    mut states: Option<&mut ShadeStates>,
    sgd: &mut SgdState,
    opts: &StepOptions,
) -> Result<StepStats, TrainError> {
    let masks = objective
        .regularizer
        .dropout()
        .map(|d| d.masks(net, batch.len(), opts.dropout_seed))
        .unwrap_or_default();
    let (logits, cache) = nn::forward_masked(net, &batch.images, &masks)?;
    let shade = objective.regularizer.shade().copied();
    if let (Some(cfg), Some(st), true) = (shade, states.as_deref_mut(), opts.update_before_grad) {
        regularizers::update_shade_states(st, &preacts(&cache, st), cfg.lambda)?;
    }
    let (loss, grads) = loss_and_grads(net, &cache, &batch.labels, objective, states.as_deref())?;
    if !loss.total().is_finite() {
        return Err(TrainError::Diverged(loss.total()));
    }
    if let (Some(cfg), Some(st), false) = (shade, states, opts.update_before_grad) {
        regularizers::update_shade_states(st, &preacts(&cache, st), cfg.lambda)?;
    }
    sgd_step(net, &grads, sgd)?;
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(StepStats { loss, correct })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{arch, init_network, LayerSpec};
    use crate::regularizers::ShadeConfig;

    fn one_param_net(w: f64) -> Network {
        let mut net = init_network(&[LayerSpec::Dense { input: 1, output: 1 }], &[1], 0).unwrap();
        net.layers_mut()[0].params.as_mut().unwrap().weight = Tensor::new(vec![1, 1], vec![w]).unwrap();
        net
    }

    fn grads_of(g: f64) -> ParamGrads {
        ParamGrads {
            layers: vec![Some(Params {
                weight: Tensor::new(vec![1, 1], vec![g]).unwrap(),
                bias: Tensor::from_vec(vec![0.0]),
            })],
        }
    }

    fn weight(net: &Network) -> f64 {
        net.layers()[0].params.as_ref().unwrap().weight.data()[0]
    }

    #[test]
    fn plain_sgd_and_zero_grads() {
        let mut net = one_param_net(1.0);
        let mut st = SgdState::new(&net, 0.1, 0.0);
        sgd_step(&mut net, &grads_of(2.0), &mut st).unwrap();
        assert!((weight(&net) - 0.8).abs() < 1e-15);
        let before = net.clone();
        let mut st = SgdState::new(&net, 0.1, 0.9);
        sgd_step(&mut net, &grads_of(0.0), &mut st).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn two_momentum_steps() {
        let (p, g) = (0.5, 0.3);
        let mut net = one_param_net(p);
        let mut st = SgdState::new(&net, 0.1, 0.9);
        sgd_step(&mut net, &grads_of(g), &mut st).unwrap();
        sgd_step(&mut net, &grads_of(g), &mut st).unwrap();
        let expected = p - 0.1 * g - 0.1 * 1.9 * g;
        assert!((weight(&net) - expected).abs() < 1e-15);
    }

    #[test]
    fn schedule() {
        let s = LrSchedule {
            base: 0.1,
            gamma: 0.1,
            milestones: vec![10, 20],
        };
        assert_eq!(s.lr(0), 0.1);
        assert_eq!(s.lr(9), 0.1);
        assert!((s.lr(10) - 0.01).abs() < 1e-15);
        let lrs: Vec<f64> = (0..40).map(|e| s.lr(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn batch() -> Batch {
        Batch {
            images: Tensor::new(
                vec![4, 3],
                vec![0.2, -0.5, 1.0, 0.3, 0.8, -1.2, -0.7, 0.1, 0.4, 1.5, 0.2, -0.3],
            )
            .unwrap(),
            labels: vec![0, 1, 1, 0],
        }
    }

    fn shade(beta: f64) -> Objective {
        Objective::new(RegularizerKind::Shade(ShadeConfig {
            beta,
            ..ShadeConfig::default()
        }))
    }

    #[test]
    fn objective_composition() {
        let net = init_network(&arch::mlp3(3, 5, 2), &[3], 2).unwrap();
        let b = batch();
        let st = ShadeStates::new(&net, &ShadeConfig::default());
        let (loss0, parts0) = total_loss(&net, &b, &shade(0.0), Some(&st)).unwrap();
        assert_eq!(loss0, parts0.cls);
        let (logits, _) = nn::forward(&net, &b.images).unwrap();
        assert_eq!(parts0.cls, nn::softmax_cross_entropy(&logits, &b.labels).unwrap().0);
        let (_, p1) = total_loss(&net, &b, &shade(0.01), Some(&st)).unwrap();
        let (_, p2) = total_loss(&net, &b, &shade(0.02), Some(&st)).unwrap();
        assert_eq!(p2.reg, 2.0 * p1.reg);
        assert!(matches!(
            total_loss(&net, &b, &shade(0.01), None),
            Err(TrainError::MissingStates)
        ));
        assert!(matches!(
            total_loss(&net, &b, &Objective::new(RegularizerKind::None), Some(&st)),
            Err(TrainError::UnexpectedStates)
        ));
    }

    #[test]
    fn beta_zero_step_equals_unregularized_step() {
        let net = init_network(&arch::mlp3(3, 5, 2), &[3], 2).unwrap();
        let b = batch();
        let mut a = net.clone();
        let mut sa = SgdState::new(&a, 0.1, 0.9);
        let mut st = ShadeStates::new(&a, &ShadeConfig::default());
        train_step(&mut a, &b, &shade(0.0), Some(&mut st), &mut sa, &StepOptions::default()).unwrap();
        let mut c = net.clone();
        let mut sc = SgdState::new(&c, 0.1, 0.9);
        train_step(
            &mut c,
            &b,
            &Objective::new(RegularizerKind::None),
            None,
            &mut sc,
            &StepOptions::default(),
        )
        .unwrap();
        assert_eq!(a, c);
        assert_eq!(sa, sc);
    }

    #[test]
    fn beta_scales_shade_gradient_linearly() {
        let net = init_network(&arch::mlp3(3, 5, 2), &[3], 2).unwrap();
        let b = batch();
        let st = ShadeStates::new(&net, &ShadeConfig::default());
        let (_, cache) = nn::forward(&net, &b.images).unwrap();
        let (_, g0) = loss_and_grads(&net, &cache, &b.labels, &shade(0.0), Some(&st)).unwrap();
        let (_, g1) = loss_and_grads(&net, &cache, &b.labels, &shade(0.5), Some(&st)).unwrap();
        let (_, g2) = loss_and_grads(&net, &cache, &b.labels, &shade(1.0), Some(&st)).unwrap();
        for ((a, b1), c) in g0.layers.iter().zip(&g1.layers).zip(&g2.layers) {
            let (Some(a), Some(b1), Some(c)) = (a, b1, c) else {
                continue;
            };
            for ((x, y), z) in a.weight.data().iter().zip(b1.weight.data()).zip(c.weight.data()) {
                // reg part of c is exactly twice that of b
                assert!(((z - x) - 2.0 * (y - x)).abs() < 1e-12);
            }
        }
    }
}
