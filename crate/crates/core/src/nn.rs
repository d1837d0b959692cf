//! Layer stack, forward pass with activation caching, and manual backprop.
//!
//! Batches are leading-axis tensors: `(K, features)` for dense layers and
//! `(K, C, H, W)` channels-first for convolutions. The output of every
//! parametric layer (dense or conv) is its pre-activation, which is what the
//! SHADE regularizer acts on; the following `Relu` produces the
//! post-activation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::par;
use crate::tensor::{matmul_into, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer} ({kind}) cannot accept input shape {found:?}")]
    NonComposing {
        layer: usize,
        kind: String,
        found: Vec<usize>,
    },
    #[error("network expects per-sample input {expected:?}, got batch shape {found:?}")]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("network output must be a flat logit vector, got {0:?}")]
    BadHead(Vec<usize>),
    #[error("forward cache does not match network: {0}")]
    CacheMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter shape mismatch for layer {layer}: expected {expected:?}, found {found:?}")]
    ParamShape {
        layer: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    /// 2×2 max pooling with stride 2 (odd trailing rows/cols are dropped).
    MaxPool2,
    Flatten,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn name(&self) -> String {
        match *self {
            LayerSpec::Dense { input, output } => format!("dense({input},{output})"),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => format!("conv2d({in_ch},{out_ch},{kernel},{stride},{pad})"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::MaxPool2 => "maxpool2".into(),
            LayerSpec::Flatten => "flatten".into(),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { input: i, output } => (input == [i]).then(|| vec![output]),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let &[c, h, w] = input else { return None };
                if c != in_ch || stride == 0 || kernel == 0 {
                    return None;
                }
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return None;
                }
                Some(vec![
                    out_ch,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::MaxPool2 => {
                let &[c, h, w] = input else { return None };
                (h >= 2 && w >= 2).then(|| vec![c, h / 2, w / 2])
            }
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { input, output } => Some((vec![input, output], vec![output])),
            LayerSpec::Conv2d {
                in_ch, out_ch, kernel, ..
            } => Some((vec![out_ch, in_ch, kernel, kernel], vec![out_ch])),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Option<Params>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Per-sample output shape of each layer.
    shapes: Vec<Vec<usize>>,
}

/// Activations captured by [`forward`]: `activations[0]` is the input and
/// `activations[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<u32>>>,
    masks: Vec<Option<Tensor>>,
}

impl ForwardCache {
    /// Output of layer `i`; for a parametric layer this is its pre-activation.
    pub fn output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].batch()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Option<Params>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    l.params.as_ref().map(|p| Params {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.layers.iter_mut().flatten() {
            p.weight = p.weight.scale(s);
            p.bias = p.bias.scale(s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()))
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

pub fn init_network(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Network, NnError> {
    let shapes = infer_shapes(specs, input_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .map(|&spec| {
            let params = spec.param_shapes().map(|(ws, bs)| {
                // dense weights are (in, out); conv kernels are (out, in, k, k)
                let fan_in: usize = if ws.len() == 2 { ws[0] } else { ws[1..].iter().product() };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let n: usize = ws.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Params {
                    weight: Tensor::new(ws, data).expect("length matches"),
                    bias: Tensor::zeros(&bs),
                }
            });
            Layer { spec, params }
        })
        .collect();
    Ok(Network {
        input_shape: input_shape.to_vec(),
        layers,
        shapes,
    })
}

fn infer_shapes(specs: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>, NnError> {
    let mut cur = input_shape.to_vec();
    let mut shapes = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        cur = spec.output_shape(&cur).ok_or_else(|| NnError::NonComposing {
            layer: i,
            kind: spec.name(),
            found: cur.clone(),
        })?;
        shapes.push(cur.clone());
    }
    if cur.len() != 1 {
        return Err(NnError::BadHead(cur));
    }
    Ok(shapes)
}

impl Network {
    /// Rebuilds a network from explicit parameters (e.g. a checkpoint).
    pub fn from_parts(
        specs: &[LayerSpec],
        input_shape: &[usize],
        params: Vec<Option<Params>>,
    ) -> Result<Network, NnError> {
        let shapes = infer_shapes(specs, input_shape)?;
        if params.len() != specs.len() {
            return Err(NnError::CacheMismatch(format!(
                "{} parameter slots for {} layers",
                params.len(),
                specs.len()
            )));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, (&spec, p)) in specs.iter().zip(params).enumerate() {
            match (spec.param_shapes(), &p) {
                (Some((ws, bs)), Some(p)) => {
                    for (expected, found) in [(ws, p.weight.shape()), (bs, p.bias.shape())] {
                        if expected != found {
                            return Err(NnError::ParamShape {
                                layer: i,
                                expected,
                                found: found.to_vec(),
                            });
                        }
                    }
                }
                (None, None) => {}
                (expected, _) => {
                    return Err(NnError::ParamShape {
                        layer: i,
                        expected: expected.map(|e| e.0).unwrap_or_default(),
                        found: p.as_ref().map(|p| p.weight.shape().to_vec()).unwrap_or_default(),
                    })
                }
            }
            layers.push(Layer { spec, params: p });
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn class_count(&self) -> usize {
        self.shapes.last().map_or(0, |s| s[0])
    }

    /// Indices of dense/conv layers. The last one is the logits layer.
    pub fn parametric_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].spec.is_parametric())
            .collect()
    }

    /// Layers whose pre-activations are regularized (and diagnosed).
    pub fn representation_layers(&self, include_logits: bool) -> Vec<usize> {
        let mut v = self.parametric_layers();
        if !include_logits {
            v.pop();
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Derivative of ReLU with the subgradient at 0 taken as 0.
pub fn relu_grad(pre: &Tensor) -> Tensor {
    pre.map(|x| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn forward(net: &Network, input: &Tensor) -> Result<(Tensor, ForwardCache), NnError> {
    forward_masked(net, input, &[])
}

/// Forward pass where `masks[i]`, when present, multiplies the output of
/// layer `i` (used for dropout after activations).
pub fn forward_masked(
    net: &Network,
    input: &Tensor,
    masks: &[Option<Tensor>],
) -> Result<(Tensor, ForwardCache), NnError> {
    if input.rank() == 0 || input.shape()[1..] != net.input_shape[..] {
        return Err(NnError::InputShape {
            expected: net.input_shape.clone(),
            found: input.shape().to_vec(),
        });
    }
    let k = input.batch();
    let mut activations = Vec::with_capacity(net.layers.len() + 1);
    let mut pool_argmax = vec![None; net.layers.len()];
    activations.push(input.clone());
    for (i, layer) in net.layers.iter().enumerate() {
        let x = activations.last().expect("non-empty");
        let in_shape = x.shape()[1..].to_vec();
        let mut y = match (layer.spec, &layer.params) {
            (LayerSpec::Dense { output, .. }, Some(p)) => dense_forward(x, p, output),
            (
                LayerSpec::Conv2d {
                    stride, pad, kernel, ..
                },
                Some(p),
            ) => conv_forward(x, &in_shape, p, kernel, stride, pad, &net.shapes[i]),
            (LayerSpec::Relu, _) => relu(x),
            (LayerSpec::MaxPool2, _) => {
                let (y, idx) = maxpool_forward(x, &in_shape);
                pool_argmax[i] = Some(idx);
                y
            }
            (LayerSpec::Flatten, _) => x.clone().reshape(&[k, in_shape.iter().product()])?,
            (spec, None) => {
                return Err(NnError::CacheMismatch(format!(
                    "layer {i} ({}) has no parameters",
                    spec.name()
                )))
            }
        };
        if let Some(Some(m)) = masks.get(i) {
            y = y.mul(m)?;
        }
        activations.push(y);
    }
    let logits = activations.last().expect("non-empty").clone();
    Ok((
        logits,
        ForwardCache {
            activations,
            pool_argmax,
            masks: masks.to_vec(),
        },
    ))
}

/// Backpropagates `logit_grad` through the network. `extra_preact_grads[i]`,
/// when present, is added to the gradient arriving at layer `i`'s output
/// before it continues downstream.
pub fn backward(
    net: &Network,
    cache: &ForwardCache,
    logit_grad: &Tensor,
    extra_preact_grads: &[Option<Tensor>],
) -> Result<ParamGrads, NnError> {
    let n = net.layers.len();
    if cache.activations.len() != n + 1 {
        return Err(NnError::CacheMismatch(format!(
            "{} cached activations for {} layers",
            cache.activations.len(),
            n
        )));
    }
    if logit_grad.shape() != cache.logits().shape() {
        return Err(NnError::CacheMismatch(format!(
            "logit gradient {:?} vs logits {:?}",
            logit_grad.shape(),
            cache.logits().shape()
        )));
    }
    let mut grads = ParamGrads { layers: vec![None; n] };
    let mut g = logit_grad.clone();
    for i in (0..n).rev() {
        if let Some(Some(m)) = cache.masks.get(i) {
            g = g.mul(m)?;
        }
        if let Some(Some(extra)) = extra_preact_grads.get(i) {
            g.add_scaled(extra, 1.0)?;
        }
        let x = &cache.activations[i];
        let in_shape = &x.shape()[1..];
        let layer = &net.layers[i];
        g = match (layer.spec, &layer.params) {
            (LayerSpec::Dense { .. }, Some(p)) => {
                let (dx, pg) = dense_backward(x, p, &g)?;
                grads.layers[i] = Some(pg);
                dx
            }
            (
                LayerSpec::Conv2d {
                    kernel, stride, pad, ..
                },
                Some(p),
            ) => {
                let (dx, pg) = conv_backward(x, in_shape, p, &g, kernel, stride, pad, &net.shapes[i]);
                grads.layers[i] = Some(pg);
                dx
            }
            (LayerSpec::Relu, _) => g.mul(&relu_grad(x))?,
            (LayerSpec::MaxPool2, _) => {
                let idx = cache.pool_argmax[i]
                    .as_ref()
                    .ok_or_else(|| NnError::CacheMismatch(format!("no pool indices for layer {i}")))?;
                let mut dx = Tensor::zeros(x.shape());
                let row = x.row_len();
                let out_row = g.row_len();
                for (j, &src) in idx.iter().enumerate() {
                    let s = j / out_row;
                    dx.data_mut()[s * row + src as usize] += g.data()[j];
                }
                dx
            }
            (LayerSpec::Flatten, _) => g.reshape(x.shape())?,
            (spec, None) => {
                return Err(NnError::CacheMismatch(format!(
                    "layer {i} ({}) has no parameters",
                    spec.name()
                )))
            }
        };
    }
    Ok(grads)
}

fn dense_forward(x: &Tensor, p: &Params, output: usize) -> Tensor {
    let k = x.batch();
    let input = x.row_len();
    let mut out = Vec::with_capacity(k * output);
    for _ in 0..k {
        out.extend_from_slice(p.bias.data());
    }
    matmul_into(x.data(), p.weight.data(), &mut out, input, output);
    Tensor::new(vec![k, output], out).expect("dense output shape")
}

fn dense_backward(x: &Tensor, p: &Params, g: &Tensor) -> Result<(Tensor, Params), NnError> {
    let k = x.batch();
    let x2 = x.clone().reshape(&[k, x.row_len()])?;
    let dw = x2.transpose()?.matmul(g)?;
    let db = g.reduce(crate::tensor::ReduceOp::Sum, Some(0))?;
    let dx = g.matmul(&p.weight.transpose()?)?;
    Ok((dx, Params { weight: dw, bias: db }))
}

/// Range of output positions `o` such that `o * stride + offset - pad` lies in `[0, len)`.
fn valid_range(len: usize, out_len: usize, offset: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > offset {
        ((len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Geometry of one convolution over a batch.
struct ConvGeom {
    k: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(k: usize, in_shape: &[usize], out_shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            k,
            c_in: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            c_out: out_shape[0],
            ho: out_shape[1],
            wo: out_shape[2],
            kernel,
            stride,
            pad,
        }
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Column matrix `(c_in·k·k) × (K·ho·wo)`; out-of-image taps are zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols_n = self.k * self.positions();
        let in_len = self.c_in * self.h * self.w;
        let mut cols = vec![0.0; self.patch() * cols_n];
        par::for_each_chunk_mut(&mut cols, cols_n, |r, row| {
            let kw = r % self.kernel;
            let kh = (r / self.kernel) % self.kernel;
            let ic = r / (self.kernel * self.kernel);
            let (oh0, oh1) = valid_range(self.h, self.ho, kh, self.stride, self.pad);
            let (ow0, ow1) = valid_range(self.w, self.wo, kw, self.stride, self.pad);
            for s in 0..self.k {
                let plane = &x[s * in_len + ic * self.h * self.w..s * in_len + (ic + 1) * self.h * self.w];
                let dst = &mut row[s * self.positions()..(s + 1) * self.positions()];
                for oh in oh0..oh1 {
                    let ih = oh * self.stride + kh - self.pad;
                    let src = &plane[ih * self.w..(ih + 1) * self.w];
                    for ow in ow0..ow1 {
                        dst[oh * self.wo + ow] = src[ow * self.stride + kw - self.pad];
                    }
                }
            }
        });
        cols
    }

    /// Inverse scatter of [`im2col`](Self::im2col): sums column entries back
    /// into a `(K, c_in, h, w)` buffer.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let cols_n = self.k * self.positions();
        let in_len = self.c_in * self.h * self.w;
        let mut dx = vec![0.0; self.k * in_len];
        par::for_each_chunk_mut(&mut dx, in_len, |s, dxs| {
            for r in 0..self.patch() {
                let kw = r % self.kernel;
                let kh = (r / self.kernel) % self.kernel;
                let ic = r / (self.kernel * self.kernel);
                let (oh0, oh1) = valid_range(self.h, self.ho, kh, self.stride, self.pad);
                let (ow0, ow1) = valid_range(self.w, self.wo, kw, self.stride, self.pad);
                let src = &cols[r * cols_n + s * self.positions()..r * cols_n + (s + 1) * self.positions()];
                let plane = &mut dxs[ic * self.h * self.w..(ic + 1) * self.h * self.w];
                for oh in oh0..oh1 {
                    let ih = oh * self.stride + kh - self.pad;
                    let dst = &mut plane[ih * self.w..(ih + 1) * self.w];
                    for ow in ow0..ow1 {
                        dst[ow * self.stride + kw - self.pad] += src[oh * self.wo + ow];
                    }
                }
            }
        });
        dx
    }

    /// `(c_out, K·P)` → `(K, c_out, P)`.
    fn channel_major_to_batch(&self, y: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut out = vec![0.0; y.len()];
        for oc in 0..self.c_out {
            for s in 0..self.k {
                let src = &y[oc * self.k * p + s * p..oc * self.k * p + (s + 1) * p];
                out[(s * self.c_out + oc) * p..(s * self.c_out + oc + 1) * p].copy_from_slice(src);
            }
        }
        out
    }

    /// `(K, c_out, P)` → `(c_out, K·P)`.
    fn batch_to_channel_major(&self, g: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut out = vec![0.0; g.len()];
        for s in 0..self.k {
            for oc in 0..self.c_out {
                let src = &g[(s * self.c_out + oc) * p..(s * self.c_out + oc + 1) * p];
                out[oc * self.k * p + s * p..oc * self.k * p + (s + 1) * p].copy_from_slice(src);
            }
        }
        out
    }
}

fn conv_forward(
    x: &Tensor,
    in_shape: &[usize],
    p: &Params,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor {
    let geo = ConvGeom::new(x.batch(), in_shape, out_shape, kernel, stride, pad);
    let cols = geo.im2col(x.data());
    let n = geo.k * geo.positions();
    let mut y = vec![0.0; geo.c_out * n];
    for (oc, row) in y.chunks_mut(n.max(1)).enumerate() {
        row.iter_mut().for_each(|v| *v = p.bias.data()[oc]);
    }
    matmul_into(p.weight.data(), &cols, &mut y, geo.patch(), n);
    let mut shape = vec![geo.k];
    shape.extend_from_slice(out_shape);
    Tensor::new(shape, geo.channel_major_to_batch(&y)).expect("conv output shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    in_shape: &[usize],
    p: &Params,
    g: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> (Tensor, Params) {
    let geo = ConvGeom::new(x.batch(), in_shape, out_shape, kernel, stride, pad);
    let n = geo.k * geo.positions();
    let patch = geo.patch();
    let g2 = geo.batch_to_channel_major(g.data());
    let cols = geo.im2col(x.data());

    // dW = G · colsᵀ
    let mut cols_t = vec![0.0; n * patch];
    for r in 0..patch {
        for (j, &v) in cols[r * n..(r + 1) * n].iter().enumerate() {
            cols_t[j * patch + r] = v;
        }
    }
    let mut dw = vec![0.0; geo.c_out * patch];
    matmul_into(&g2, &cols_t, &mut dw, n, patch);

    // dcols = Wᵀ · G
    let w_t = p
        .weight
        .clone()
        .reshape(&[geo.c_out, patch])
        .and_then(|w| w.transpose())
        .expect("kernel shape");
    let mut dcols = vec![0.0; patch * n];
    matmul_into(w_t.data(), &g2, &mut dcols, geo.c_out, n);
    let dx = geo.col2im(&dcols);

    let db = g2.chunks(n.max(1)).map(|row| row.iter().sum()).collect();
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Params {
            weight: Tensor::new(p.weight.shape().to_vec(), dw).expect("dw shape"),
            bias: Tensor::new(vec![geo.c_out], db).expect("db shape"),
        },
    )
}

fn maxpool_forward(x: &Tensor, in_shape: &[usize]) -> (Tensor, Vec<u32>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    let k = x.batch();
    let mut out = Vec::with_capacity(k * c * ho * wo);
    let mut idx = Vec::with_capacity(k * c * ho * wo);
    for s in 0..k {
        let xs = x.row(s);
        for ch in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = ch * h * w + (2 * oh) * w + 2 * ow;
                    for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                        let j = ch * h * w + (2 * oh + dh) * w + 2 * ow + dw;
                        if xs[j] > xs[best] {
                            best = j;
                        }
                    }
                    out.push(xs[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (Tensor::new(vec![k, c, ho, wo], out).expect("pool shape"), idx)
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnError> {
    let k = logits.batch();
    let c = logits.row_len();
    if labels.len() != k {
        return Err(NnError::CacheMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            k
        )));
    }
    let mut grad = Vec::with_capacity(k * c);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(NnError::LabelOutOfRange { label, classes: c });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad.push((p - if j == label { 1.0 } else { 0.0 }) / k as f64);
        }
    }
    Ok((loss / k as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Standard architectures used by the experiment harness.
pub mod arch {
    use super::LayerSpec;

    /// Dense → ReLU → Dense → ReLU → Dense over flattened input.
    pub fn mlp3(input: usize, hidden: usize, classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { input, output: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense {
                input: hidden,
                output: hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                input: hidden,
                output: classes,
            },
        ]
    }

    /// conv(5×5) → ReLU → pool → conv(5×5) → ReLU → pool → dense head.
    /// Returns `None` when the image is too small for two conv/pool stages.
    pub fn smallcnn(channels: usize, size: usize, widths: (usize, usize), classes: usize) -> Option<Vec<LayerSpec>> {
        let s1 = size.checked_sub(4)? / 2;
        let s2 = s1.checked_sub(4)? / 2;
        if s2 == 0 {
            return None;
        }
        Some(vec![
            LayerSpec::Conv2d {
                in_ch: channels,
                out_ch: widths.0,
                kernel: 5,
                stride: 1,
                pad: 0,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv2d {
                in_ch: widths.0,
                out_ch: widths.1,
                kernel: 5,
                stride: 1,
                pad: 0,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                input: widths.1 * s2 * s2,
                output: classes,
            },
        ])
    }
}
