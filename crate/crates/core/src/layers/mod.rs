//! Differentiable building blocks: gated convolution, layer normalization,
//! bidirectional LSTM, dense layers, and the utterance-level SDR loss.
//!
//! A layer owns only [`ParamId`]s; values live in a [`ParamStore`]. Calling
//! `forward` binds the parameters into the caller's [`Graph`], so any number
//! of graphs can evaluate the same layer concurrently.

mod loss;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::metrics::MetricsError;

pub use loss::{guarded_sdr, usdr_loss, UsdrLoss, LOSS_EPS};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Initial value of every LSTM forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{layer}: expected {expected} input features, got shape {found:?}")]
    InputShape {
        layer: String,
        expected: usize,
        found: Vec<usize>,
    },
    #[error("recurrent layer received an empty sequence")]
    EmptySequence,
    #[error("invalid layer size: {0}")]
    InvalidSize(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// Tensor of `shape` drawn uniformly from `[-bound, bound]`.
fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
    t
}

fn init_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

fn require_positive(what: &str, n: usize) -> Result<(), LayerError> {
    if n == 0 {
        return Err(LayerError::InvalidSize(format!("{what} must be positive")));
    }
    Ok(())
}

/// Gated 1-D convolution: `(i*W + b) ⊗ σ(i*W_g + b_g)`.
///
/// Input is `[in_channels × time]`, output `[out_channels × time']` with
/// valid-convolution length arithmetic on both paths.
#[derive(Clone, Debug)]
pub struct GConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_len: usize,
    pub stride: usize,
}

impl GConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_len: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, LayerError> {
        require_positive("in_channels", in_channels)?;
        require_positive("out_channels", out_channels)?;
        require_positive("kernel_len", kernel_len)?;
        require_positive("stride", stride)?;
        let shape = [out_channels, in_channels, kernel_len];
        let bound = init_bound(in_channels * kernel_len);
        let w = store.add(format!("{name}.w"), uniform(rng, &shape, bound))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_channels, 1]))?;
        let w_g = store.add(format!("{name}.w_g"), uniform(rng, &shape, bound))?;
        let b_g = store.add(format!("{name}.b_g"), Tensor::zeros(&[out_channels, 1]))?;
        Ok(Self {
            w,
            b,
            w_g,
            b_g,
            in_channels,
            out_channels,
            kernel_len,
            stride,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.out_channels * (self.in_channels * self.kernel_len + 1)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
    ) -> Result<Var, LayerError> {
        let shape = g.value(input).shape();
        if shape.len() != 2 || shape[0] != self.in_channels {
            return Err(LayerError::InputShape {
                layer: "gconv".into(),
                expected: self.in_channels,
                found: shape.to_vec(),
            });
        }
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let (w_g, b_g) = (g.param(store, self.w_g), g.param(store, self.b_g));
        let lin = g.conv1d_valid(input, w, self.stride)?;
        let lin = g.broadcast_add(lin, b)?;
        let gate = g.conv1d_valid(input, w_g, self.stride)?;
        let gate = g.broadcast_add(gate, b_g)?;
        let gate = g.sigmoid(gate)?;
        Ok(g.mul(lin, gate)?)
    }
}

/// Normalization over the feature axis of `[features × positions]` input.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub features: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self, LayerError> {
        require_positive("features", features)?;
        let gain = store.add(format!("{name}.gain"), Tensor::filled(&[features], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[features]))?;
        Ok(Self {
            gain,
            bias,
            features,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.features
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
    ) -> Result<Var, LayerError> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        Ok(g.layer_norm(input, gain, bias, self.eps)?)
    }
}

/// One direction of an LSTM. Gate blocks are laid out `[input, forget,
/// cell, output]` along the last axis of `w_x`, `w_h` and `b`.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input_size: usize,
    pub hidden: usize,
}

impl LstmDirection {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, LayerError> {
        require_positive("input_size", input_size)?;
        require_positive("hidden", hidden)?;
        let w_x = uniform(rng, &[input_size, 4 * hidden], init_bound(input_size));
        let w_h = uniform(rng, &[hidden, 4 * hidden], init_bound(hidden));
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS);
        Ok(Self {
            w_x: store.add(format!("{name}.w_x"), w_x)?,
            w_h: store.add(format!("{name}.w_h"), w_h)?,
            b: store.add(format!("{name}.b"), b)?,
            input_size,
            hidden,
        })
    }

    pub fn num_params(&self) -> usize {
        4 * self.hidden * (self.input_size + self.hidden + 1)
    }

    /// Runs the recurrence over the rows of `[time × input_size]` input,
    /// right to left when `reverse` is set, from zero initial state. Row `t`
    /// of the `[time × hidden]` result is the state after consuming row `t`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        reverse: bool,
    ) -> Result<Var, LayerError> {
        let steps = match g.value(input).dims2() {
            Some((t, f)) if f == self.input_size => t,
            _ => {
                return Err(LayerError::InputShape {
                    layer: "lstm".into(),
                    expected: self.input_size,
                    found: g.value(input).shape().to_vec(),
                })
            }
        };
        let h = self.hidden;
        let (w_x, w_h, b) = (
            g.param(store, self.w_x),
            g.param(store, self.w_h),
            g.param(store, self.b),
        );
        // Input contributions for every step in one product.
        let xw = g.matmul(input, w_x)?;
        let xw = g.broadcast_add(xw, b)?;
        let mut outputs: Vec<Option<Var>> = vec![None; steps];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let mut z = g.slice(xw, 0, t, 1)?;
            if let Some((h_prev, _)) = state {
                let rec = g.matmul(h_prev, w_h)?;
                z = g.add(z, rec)?;
            }
            let act = g.sigmoid(z)?;
            let i = g.slice(act, 1, 0, h)?;
            let o = g.slice(act, 1, 3 * h, h)?;
            let cand = g.slice(z, 1, 2 * h, h)?;
            let cand = g.tanh(cand)?;
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let f = g.slice(act, 1, h, h)?;
                let kept = g.mul(f, c_prev)?;
                c = g.add(kept, c)?;
            }
            let squashed = g.tanh(c)?;
            let h_t = g.mul(o, squashed)?;
            outputs[t] = Some(h_t);
            state = Some((h_t, c));
        }
        let rows: Vec<Var> = outputs
            .into_iter()
            .map(|v| v.expect("every step visited"))
            .collect();
        Ok(g.concat(&rows, 0)?)
    }
}

/// Bidirectional LSTM: `[time × input]` in, `[time × 2·hidden]` out, with the
/// left-to-right states in the first `hidden` columns.
#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub forward_dir: LstmDirection,
    pub backward_dir: LstmDirection,
}

impl BiLstmLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, LayerError> {
        let forward_dir =
            LstmDirection::new(store, &format!("{name}.fwd"), input_size, hidden, rng)?;
        let backward_dir =
            LstmDirection::new(store, &format!("{name}.bwd"), input_size, hidden, rng)?;
        Ok(Self {
            forward_dir,
            backward_dir,
        })
    }

    pub fn hidden(&self) -> usize {
        self.forward_dir.hidden
    }

    pub fn output_size(&self) -> usize {
        2 * self.hidden()
    }

    pub fn num_params(&self) -> usize {
        self.forward_dir.num_params() + self.backward_dir.num_params()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
    ) -> Result<Var, LayerError> {
        if g.value(input).shape().first() == Some(&0) {
            return Err(LayerError::EmptySequence);
        }
        let fwd = self.forward_dir.forward(g, store, input, false)?;
        let bwd = self.backward_dir.forward(g, store, input, true)?;
        Ok(g.concat(&[fwd, bwd], 1)?)
    }
}

/// `activation(x·W + b)` applied to every row of `[positions × input]`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub input_size: usize,
    pub output_size: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        output_size: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self, LayerError> {
        require_positive("input_size", input_size)?;
        require_positive("output_size", output_size)?;
        let w = uniform(rng, &[input_size, output_size], init_bound(input_size));
        Ok(Self {
            w: store.add(format!("{name}.w"), w)?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[output_size]))?,
            input_size,
            output_size,
            activation,
        })
    }

    pub fn num_params(&self) -> usize {
        self.output_size * (self.input_size + 1)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
    ) -> Result<Var, LayerError> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let pre = g.matmul(input, w)?;
        let pre = g.broadcast_add(pre, b)?;
        Ok(match self.activation {
            Activation::Relu => g.relu(pre)?,
            Activation::Linear => pre,
        })
    }
}
