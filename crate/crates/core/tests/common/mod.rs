//! Finite-difference oracle shared by the integration suites. It only calls
//! the forward pass and the loss; no gradient code is used.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use shade_core::data::Batch;
use shade_core::nn::{self, ForwardCache, Network, ParamGrads};
use shade_core::optim::{loss_terms, Objective};
use shade_core::regularizers::{ShadeStates, ShadeUnitState};
use shade_core::Tensor;

/// Objective value with fixed dropout masks and frozen SHADE states.
pub fn objective_value(
    net: &Network,
    batch: &Batch,
    objective: &Objective,
    states: Option<&ShadeStates>,
    masks: &[Option<Tensor>],
) -> f64 {
    let (_, cache) = nn::forward_masked(net, &batch.images, masks).unwrap();
    loss_terms(net, &cache, &batch.labels, objective, states)
        .unwrap()
        .total()
}

fn param_mut(net: &mut Network, layer: usize, bias: bool) -> &mut Tensor {
    let p = net.layers_mut()[layer].params.as_mut().unwrap();
    if bias {
        &mut p.bias
    } else {
        &mut p.weight
    }
}

/// Central differences of `f` w.r.t. every parameter, in `ParamGrads` layout.
pub fn numeric_grads(net: &Network, eps: f64, f: impl Fn(&Network) -> f64) -> ParamGrads {
    let mut out = ParamGrads::zeros_like(net);
    let mut probe = net.clone();
    for li in 0..net.layers().len() {
        if net.layers()[li].params.is_none() {
            continue;
        }
        for bias in [false, true] {
            let n = param_mut(&mut probe, li, bias).len();
            for j in 0..n {
                let orig = param_mut(&mut probe, li, bias).data()[j];
                param_mut(&mut probe, li, bias).data_mut()[j] = orig + eps;
                let plus = f(&probe);
                param_mut(&mut probe, li, bias).data_mut()[j] = orig - eps;
                let minus = f(&probe);
                param_mut(&mut probe, li, bias).data_mut()[j] = orig;
                let g = out.layers[li].as_mut().unwrap();
                let t = if bias { &mut g.bias } else { &mut g.weight };
                t.data_mut()[j] = (plus - minus) / (2.0 * eps);
            }
        }
    }
    out
}

/// Largest elementwise relative error, with `floor` guarding near-zero entries.
pub fn max_rel_error(analytic: &ParamGrads, numeric: &ParamGrads, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.layers.iter().zip(&numeric.layers) {
        let (Some(a), Some(n)) = (a, n) else { continue };
        for (x, y) in a
            .weight
            .data()
            .iter()
            .chain(a.bias.data())
            .zip(n.weight.data().iter().chain(n.bias.data()))
        {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Smallest |value| over every cached pre-activation and ReLU input; used to
/// keep finite-difference probes away from kinks.
pub fn kink_margin(net: &Network, cache: &ForwardCache) -> f64 {
    net.parametric_layers()
        .iter()
        .flat_map(|&i| cache.output(i).data().iter())
        .fold(f64::INFINITY, |m, &v| m.min(v.abs()))
}

/// Smallest gap between the two largest entries of every 2×2 pooling window.
pub fn pool_margin(net: &Network, cache: &ForwardCache) -> f64 {
    let mut m = f64::INFINITY;
    for (i, l) in net.layers().iter().enumerate() {
        if l.spec != nn::LayerSpec::MaxPool2 {
            continue;
        }
        let x = &cache.activations[i];
        let s = x.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        for k in 0..s[0] {
            let row = x.row(k);
            for ch in 0..c {
                for oh in 0..h / 2 {
                    for ow in 0..w / 2 {
                        let mut v: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|(dh, dw)| row[ch * h * w + (2 * oh + dh) * w + 2 * ow + dw])
                            .collect();
                        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        m = m.min(v[0] - v[1]);
                    }
                }
            }
        }
    }
    m
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_batch(shape: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Batch {
    Batch {
        images: random_tensor(shape, rng),
        labels: (0..shape[0]).map(|_| rng.gen_range(0..classes)).collect(),
    }
}

/// Randomizes biases and SHADE states so no term is trivially zero.
pub fn perturb(net: &mut Network, states: Option<&mut ShadeStates>, rng: &mut ChaCha8Rng) {
    for l in net.layers_mut() {
        if let Some(p) = &mut l.params {
            for b in p.bias.data_mut() {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
    }
    if let Some(st) = states {
        for l in &mut st.layers {
            for u in &mut l.units {
                let p1 = rng.gen_range(0.1..0.9);
                *u = ShadeUnitState {
                    mu0: rng.gen_range(-1.5..0.0),
                    mu1: rng.gen_range(0.0..1.5),
                    p0: 1.0 - p1,
                    p1,
                };
            }
        }
    }
}

/// Draws seeds until every pre-activation sits at least `margin` from a kink.
pub fn well_conditioned(mut make: impl FnMut(u64) -> (Network, Batch), margin: f64) -> (Network, Batch) {
    for seed in 0..500 {
        let (net, batch) = make(seed);
        let (_, cache) = nn::forward(&net, &batch.images).unwrap();
        if kink_margin(&net, &cache) > margin && pool_margin(&net, &cache) > margin {
            return (net, batch);
        }
    }
    panic!("no well-conditioned draw found");
}
