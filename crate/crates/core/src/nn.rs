//! Parameterized layers that record onto a [`Tape`], plus eager wrappers for
//! the basic sequence primitives.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Affine map `x · w + b` with `w: [fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform init in `±1/√fan_in`, zero bias.
    pub fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::uniform(vec![fan_in, fan_out], -bound, bound, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Depthwise causal convolution along the token axis.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv {
    pub fn init(store: &mut ParamStore, name: &str, k: usize, dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        DepthwiseConv {
            kernel: store.add(
                format!("{name}.kernel"),
                Tensor::uniform(vec![k, dim], -bound, bound, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (k, b) = (tape.param(self.kernel), tape.param(self.bias));
        tape.causal_conv(x, k, b)
    }
}

fn tokens_dim(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *x.shape() {
        [t, d] => Ok((t, d)),
        ref s => shape_err(format!("{what}: expected [tokens, dim], got {s:?}")),
    }
}

/// Depthwise causal convolution of `x[tokens, dim]` with `kernel[k, dim]`.
/// Output token `t` sees inputs `t-k+1 ..= t`; the last kernel row
/// multiplies the current token.
pub fn causal_conv1d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (t, d) = tokens_dim(x, "causal_conv1d")?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(vec![1, t, d])?);
    let kv = tape.constant(kernel.clone());
    let bv = tape.constant(bias.clone());
    let y = tape.causal_conv(xv, kv, bv)?;
    tape.value(y).clone().reshape(vec![t, d])
}

/// Row-wise layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let y = tape.layer_norm(xv, g, b, eps)?;
    Ok(tape.value(y).clone())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(crate::autodiff::kernels::silu)
}
