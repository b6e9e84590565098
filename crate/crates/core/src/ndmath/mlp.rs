use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::tensor::Tensor;
use super::{NdError, Result};

/// Variance channel of a gaussian head is softplus-transformed and then
/// clamped to this range.
pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const VARIANCE_CEIL: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Raw affine output.
    Linear,
    /// Elementwise logistic sigmoid, outputs in (0, 1).
    Sigmoid,
    /// `(mean, variance)` pairs: parameter output dim is `2 * output_dim`,
    /// variance channel is `clamp(softplus(raw), floor, ceil)`.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_head: OutputHead,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        hidden_activation: Activation,
        output_head: OutputHead,
    ) -> Self {
        assert!(input_dim >= 1 && output_dim >= 1, "all dims must be >= 1");
        assert!(hidden_dims.iter().all(|&d| d >= 1), "all dims must be >= 1");
        MlpSpec {
            input_dim,
            hidden_dims,
            output_dim,
            hidden_activation,
            output_head,
        }
    }

    /// Width of the final affine layer (`2 * output_dim` for a gaussian head).
    pub fn param_output_dim(&self) -> usize {
        match self.output_head {
            OutputHead::Gaussian => 2 * self.output_dim,
            _ => self.output_dim,
        }
    }

    /// Per-layer `(in, out)` dims including the output layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.param_output_dim()));
        dims
    }
}

/// Weight/bias pair for one affine layer, with Adam state per parameter.
///
/// Weights are stored `(in_dim, out_dim)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub weight_adam: AdamState,
    pub bias_adam: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub layers: Vec<LayerParams>,
}

impl ParamBlock {
    /// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Self {
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                LayerParams {
                    weight: Tensor::uniform(&[fan_in, fan_out], bound, rng),
                    bias: Tensor::uniform(&[fan_out], bound, rng),
                    weight_adam: AdamState::zeros(&[fan_in, fan_out]),
                    bias_adam: AdamState::zeros(&[fan_out]),
                }
            })
            .collect();
        ParamBlock { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Stable `(name, tensor)` walk over all parameters, for checkpointing.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &l.weight));
            out.push((format!("layer{i}.bias"), &l.bias));
            out.push((format!("layer{i}.weight.m1"), &l.weight_adam.first_moment));
            out.push((format!("layer{i}.weight.m2"), &l.weight_adam.second_moment));
            out.push((format!("layer{i}.bias.m1"), &l.bias_adam.first_moment));
            out.push((format!("layer{i}.bias.m2"), &l.bias_adam.second_moment));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.weight"), &mut l.weight));
            out.push((format!("layer{i}.bias"), &mut l.bias));
            out.push((format!("layer{i}.weight.m1"), &mut l.weight_adam.first_moment));
            out.push((format!("layer{i}.weight.m2"), &mut l.weight_adam.second_moment));
            out.push((format!("layer{i}.bias.m1"), &mut l.bias_adam.first_moment));
            out.push((format!("layer{i}.bias.m2"), &mut l.bias_adam.second_moment));
        }
        out
    }
}

/// Per-layer parameter gradients mirroring a `ParamBlock`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Tensor, Tensor)>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor,
    /// Post-activation output of each hidden layer.
    hidden: Vec<Tensor>,
    /// Pre-head output of the final affine layer.
    pre_head: Tensor,
    /// Head output (what `mlp_forward` returns).
    output: Tensor,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

fn check_params(spec: &MlpSpec, params: &ParamBlock) -> Result<()> {
    let dims = spec.layer_dims();
    if params.layers.len() != dims.len() {
        return Err(NdError::ShapeMismatch(format!(
            "params have {} layers, spec implies {}",
            params.layers.len(),
            dims.len()
        )));
    }
    for (i, ((fan_in, fan_out), l)) in dims.iter().zip(&params.layers).enumerate() {
        if l.weight.shape() != [*fan_in, *fan_out] || l.bias.shape() != [*fan_out] {
            return Err(NdError::ShapeMismatch(format!(
                "layer {i}: expected weight ({fan_in}, {fan_out}), got {:?} / bias {:?}",
                l.weight.shape(),
                l.bias.shape()
            )));
        }
    }
    Ok(())
}

/// `out[b, j] = sum_i in[b, i] * w[i, j] + bias[j]`
fn affine(input: &Tensor, layer: &LayerParams) -> Tensor {
    let batch = input.rows();
    let in_dim = input.cols();
    let out_dim = layer.bias.len();
    let mut out = Tensor::zeros(&[batch, out_dim]);
    let w = layer.weight.data();
    let b = layer.bias.data();
    let x = input.data();
    let o = out.data_mut();
    for r in 0..batch {
        let orow = &mut o[r * out_dim..(r + 1) * out_dim];
        orow.copy_from_slice(b);
        let xrow = &x[r * in_dim..(r + 1) * in_dim];
        for (i, &xi) in xrow.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * out_dim..(i + 1) * out_dim];
            for (oj, &wj) in orow.iter_mut().zip(wrow) {
                *oj += xi * wj;
            }
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_head(spec: &MlpSpec, pre: &Tensor) -> Tensor {
    match spec.output_head {
        OutputHead::Linear => pre.clone(),
        OutputHead::Sigmoid => {
            let data = pre.data().iter().map(|&v| sigmoid(v)).collect();
            Tensor::from_vec(pre.shape(), data).expect("same shape")
        }
        OutputHead::Gaussian => {
            let batch = pre.rows();
            let m = spec.output_dim;
            let mut out = Tensor::zeros(&[batch, 2 * m]);
            let p = pre.data();
            let o = out.data_mut();
            for r in 0..batch {
                for j in 0..m {
                    o[r * 2 * m + j] = p[r * 2 * m + j];
                    let v = softplus(p[r * 2 * m + m + j]);
                    o[r * 2 * m + m + j] = v.clamp(VARIANCE_FLOOR, VARIANCE_CEIL);
                }
            }
            out
        }
    }
}

/// Batched forward pass. Input shape `(batch, input_dim)`; output shape
/// `(batch, output_dim)` (`(batch, 2*output_dim)` for a gaussian head).
pub fn mlp_forward(spec: &MlpSpec, params: &ParamBlock, input: &Tensor) -> Result<Tensor> {
    Ok(mlp_forward_cached(spec, params, input)?.output)
}

pub fn mlp_forward_cached(
    spec: &MlpSpec,
    params: &ParamBlock,
    input: &Tensor,
) -> Result<ForwardCache> {
    check_params(spec, params)?;
    if input.cols() != spec.input_dim {
        return Err(NdError::ShapeMismatch(format!(
            "input has {} columns, spec expects {}",
            input.cols(),
            spec.input_dim
        )));
    }
    let n_hidden = spec.hidden_dims.len();
    let mut hidden = Vec::with_capacity(n_hidden);
    let mut cur = input.clone();
    if cur.shape().len() == 1 {
        cur = Tensor::from_vec(&[1, spec.input_dim], cur.into_data())?;
    }
    let input2 = cur.clone();
    for l in 0..n_hidden {
        let mut z = affine(&cur, &params.layers[l]);
        match spec.hidden_activation {
            Activation::Relu => z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => z.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
        }
        hidden.push(z.clone());
        cur = z;
    }
    let pre_head = affine(&cur, &params.layers[n_hidden]);
    let output = apply_head(spec, &pre_head);
    Ok(ForwardCache {
        input: input2,
        hidden,
        pre_head,
        output,
    })
}

/// `dW[i, j] += sum_b x[b, i] * dy[b, j]`; `db[j] += sum_b dy[b, j]`;
/// `dx[b, i] = sum_j dy[b, j] * w[i, j]`.
fn affine_backward(
    input: &Tensor,
    layer: &LayerParams,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let batch = input.rows();
    let in_dim = input.cols();
    let out_dim = layer.bias.len();
    let mut dw = Tensor::zeros(&[in_dim, out_dim]);
    let mut db = Tensor::zeros(&[out_dim]);
    let mut dx = Tensor::zeros(&[batch, in_dim]);
    let x = input.data();
    let g = dy.data();
    let w = layer.weight.data();
    {
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        let dxd = dx.data_mut();
        for r in 0..batch {
            let grow = &g[r * out_dim..(r + 1) * out_dim];
            let xrow = &x[r * in_dim..(r + 1) * in_dim];
            for (dbj, &gj) in dbd.iter_mut().zip(grow) {
                *dbj += gj;
            }
            for i in 0..in_dim {
                let xi = xrow[i];
                let wrow = &w[i * out_dim..(i + 1) * out_dim];
                let dwrow = &mut dwd[i * out_dim..(i + 1) * out_dim];
                let mut acc = 0.0;
                for j in 0..out_dim {
                    dwrow[j] += xi * grow[j];
                    acc += grow[j] * wrow[j];
                }
                dxd[r * in_dim + i] = acc;
            }
        }
    }
    (dw, db, dx)
}

/// Backward pass. `upstream` is the gradient of the scalar objective with
/// respect to the head output; returns parameter gradients and the gradient
/// with respect to the input batch.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &ParamBlock,
    cache: &ForwardCache,
    upstream: &Tensor,
) -> Result<(Gradients, Tensor)> {
    check_params(spec, params)?;
    if upstream.shape() != cache.output.shape() {
        return Err(NdError::ShapeMismatch(format!(
            "upstream grad shape {:?} does not match output shape {:?}",
            upstream.shape(),
            cache.output.shape()
        )));
    }
    let n_hidden = spec.hidden_dims.len();

    // Head backward: gradient w.r.t. the pre-head affine output.
    let mut dpre = match spec.output_head {
        OutputHead::Linear => upstream.clone(),
        OutputHead::Sigmoid => {
            let y = cache.output.data();
            let data = upstream
                .data()
                .iter()
                .zip(y)
                .map(|(&g, &s)| g * s * (1.0 - s))
                .collect();
            Tensor::from_vec(upstream.shape(), data)?
        }
        OutputHead::Gaussian => {
            let batch = upstream.rows();
            let m = spec.output_dim;
            let mut d = Tensor::zeros(&[batch, 2 * m]);
            let g = upstream.data();
            let pre = cache.pre_head.data();
            let dd = d.data_mut();
            for r in 0..batch {
                for j in 0..m {
                    dd[r * 2 * m + j] = g[r * 2 * m + j];
                    let raw = pre[r * 2 * m + m + j];
                    let sp = softplus(raw);
                    // clamp kills the gradient outside the bounds
                    let dsp = if sp <= VARIANCE_FLOOR || sp >= VARIANCE_CEIL {
                        0.0
                    } else {
                        sigmoid(raw)
                    };
                    dd[r * 2 * m + m + j] = g[r * 2 * m + m + j] * dsp;
                }
            }
            d
        }
    };

    let mut grads: Vec<(Tensor, Tensor)> = vec![];
    // Output layer.
    let last_in = if n_hidden == 0 {
        &cache.input
    } else {
        &cache.hidden[n_hidden - 1]
    };
    let (dw, db, mut dcur) = affine_backward(last_in, &params.layers[n_hidden], &dpre);
    grads.push((dw, db));

    for l in (0..n_hidden).rev() {
        // Backward through activation of hidden layer l.
        let h = cache.hidden[l].data();
        {
            let d = dcur.data_mut();
            match spec.hidden_activation {
                Activation::Relu => {
                    for (dv, &hv) in d.iter_mut().zip(h) {
                        if hv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                }
                Activation::Tanh => {
                    for (dv, &hv) in d.iter_mut().zip(h) {
                        *dv *= 1.0 - hv * hv;
                    }
                }
            }
        }
        dpre = dcur;
        let layer_in = if l == 0 {
            &cache.input
        } else {
            &cache.hidden[l - 1]
        };
        let (dw, db, dx) = affine_backward(layer_in, &params.layers[l], &dpre);
        grads.push((dw, db));
        dcur = dx;
    }
    grads.reverse();
    Ok((Gradients { layers: grads }, dcur))
}
