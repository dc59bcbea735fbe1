//! Selective state-space scan and the interactive Mamba block.
//!
//! The state matrix is diagonal: each of the `dim` input channels owns
//! `state` scalar recurrences `h ← ā·h + b̄·x` with `ā = exp(Δ·a)`. The input
//! and readout vectors `B_t`, `C_t` (width `state`) and the step `Δ_t`
//! (width `dim`) are linear functions of the current token, so the
//! recurrence is input-selective.
//!
//! The block runs two such branches with different causal kernel lengths
//! and lets each gate the other:
//!
//! ```text
//! h_i = LN(SSM_i(silu(conv_i(in_proj_i(x)))))      i = 1, 2
//! H_1 = silu(h_1) ⊙ h_2 ⊙ g,   H_2 = silu(h_2) ⊙ h_1 ⊙ g,   g = gate_proj(x)
//! out = out_proj(conv_3(H_1 + H_2))
//! ```

use crate::autodiff::kernels;
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{DepthwiseConv, LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STATE: usize = 16;

/// Elementwise zero-order-hold discretization of diagonal `a` with input
/// vector `b` and step `delta`, all the same shape.
pub fn discretize(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() || a.shape() != delta.shape() {
        return shape_err(format!(
            "discretize: a {:?}, b {:?}, delta {:?}",
            a.shape(),
            b.shape(),
            delta.shape()
        ));
    }
    let (abar, bbar): (Vec<f64>, Vec<f64>) = a
        .data()
        .iter()
        .zip(b.data())
        .zip(delta.data())
        .map(|((&a, &b), &d)| kernels::zoh(a, b, d))
        .unzip();
    Ok((
        Tensor::new(a.shape().to_vec(), abar)?,
        Tensor::new(a.shape().to_vec(), bbar)?,
    ))
}

fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `[dim, state]`; the continuous diagonal is `A = −exp(a_log)`.
    pub a_log: ParamId,
    /// `[dim, state]`
    pub w_b: ParamId,
    /// `[dim, state]`
    pub w_c: ParamId,
    /// `[dim, dim]`
    pub w_delta: ParamId,
    /// `[dim]`
    pub delta_bias: ParamId,
    pub dim: usize,
    pub state: usize,
}

impl SsmParams {
    /// `a_log[i, j] = ln(j + 1)`; step biases chosen so `softplus(bias)` is
    /// log-uniform in `[1e-3, 1e-1]`.
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, state: usize, rng: &mut Rng) -> Self {
        let a_log = (0..dim * state).map(|i| ((i % state) as f64 + 1.0).ln()).collect();
        let bound = 1.0 / (dim as f64).sqrt();
        let bias = (0..dim)
            .map(|_| inverse_softplus((rng.uniform(1e-3f64.ln(), 1e-1f64.ln())).exp()))
            .collect();
        SsmParams {
            a_log: store.add(format!("{name}.a_log"), Tensor::new(vec![dim, state], a_log).expect("shape")),
            w_b: store.add(format!("{name}.w_b"), Tensor::uniform(vec![dim, state], -bound, bound, rng)),
            w_c: store.add(format!("{name}.w_c"), Tensor::uniform(vec![dim, state], -bound, bound, rng)),
            w_delta: store.add(
                format!("{name}.w_delta"),
                Tensor::uniform(vec![dim, dim], -0.1 * bound, 0.1 * bound, rng),
            ),
            delta_bias: store.add(format!("{name}.delta_bias"), Tensor::from_vec(bias)),
            dim,
            state,
        }
    }
}

/// Selective scan of `x[seqs, z, dim]` from a zero state.
pub fn ssm_tape(tape: &mut Tape, p: &SsmParams, x: Var) -> Result<Var> {
    let wb = tape.param(p.w_b);
    let wc = tape.param(p.w_c);
    let wd = tape.param(p.w_delta);
    let bd = tape.param(p.delta_bias);
    let b = tape.matmul(x, wb)?;
    let c = tape.matmul(x, wc)?;
    let pre = tape.linear(x, wd, bd)?;
    let delta = tape.softplus(pre);
    let a_log = tape.param(p.a_log);
    let ea = tape.exp(a_log);
    let a = tape.scale(ea, -1.0);
    tape.selective_scan(x, delta, a, b, c)
}

fn lift(tape: &mut Tape, tokens: &Tensor) -> Result<Var> {
    match *tokens.shape() {
        [z, d] if z >= 1 => Ok(tape.constant(tokens.clone().reshape(vec![1, z, d])?)),
        ref s => shape_err(format!("expected [tokens, dim], got {s:?}")),
    }
}

fn lower(tape: &Tape, v: Var) -> Result<Tensor> {
    let t = tape.value(v).clone();
    let shape = t.shape()[1..].to_vec();
    t.reshape(shape)
}

/// Runs the scan on `x[z, dim]`.
pub fn ssm_scan(store: &ParamStore, p: &SsmParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::with_params(store);
    let xv = lift(&mut tape, x)?;
    let y = ssm_tape(&mut tape, p, xv)?;
    lower(&tape, y)
}

#[derive(Clone, Debug)]
pub struct ImbOptions {
    pub state: usize,
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
    pub concat_fusion: bool,
    pub share_in_proj: bool,
}

impl Default for ImbOptions {
    fn default() -> Self {
        ImbOptions {
            state: DEFAULT_STATE,
            k1: 2,
            k2: 4,
            k3: 1,
            concat_fusion: false,
            share_in_proj: false,
        }
    }
}

/// One branch: projection, causal conv, scan and normalization.
#[derive(Clone, Debug)]
pub struct Branch {
    pub in_proj: Linear,
    pub conv: DepthwiseConv,
    pub ssm: SsmParams,
    pub ln: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct ImbParams {
    pub branch_1: Branch,
    pub branch_2: Branch,
    pub gate_proj: Linear,
    pub conv_3: DepthwiseConv,
    pub out_proj: Linear,
    pub concat_fusion: bool,
}

impl ImbParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, opts: &ImbOptions, rng: &mut Rng) -> Self {
        let in_1 = Linear::init(store, &format!("{name}.in_proj_1"), dim, dim, rng);
        let (in_2, gate) = if opts.share_in_proj {
            (in_1.clone(), in_1.clone())
        } else {
            (
                Linear::init(store, &format!("{name}.in_proj_2"), dim, dim, rng),
                Linear::init(store, &format!("{name}.gate_proj"), dim, dim, rng),
            )
        };
        let mut branch = |i: usize, in_proj: Linear, k: usize, store: &mut ParamStore| Branch {
            in_proj,
            conv: DepthwiseConv::init(store, &format!("{name}.conv_{i}"), k, dim, rng),
            ssm: SsmParams::init(store, &format!("{name}.ssm_{i}"), dim, opts.state, rng),
            ln: LayerNorm::init(store, &format!("{name}.ln_{i}"), dim),
        };
        let branch_1 = branch(1, in_1, opts.k1, store);
        let branch_2 = branch(2, in_2, opts.k2, store);
        let fused = if opts.concat_fusion { 2 * dim } else { dim };
        ImbParams {
            branch_1,
            branch_2,
            gate_proj: gate,
            conv_3: DepthwiseConv::init(store, &format!("{name}.conv_3"), opts.k3, fused, rng),
            out_proj: Linear::init(store, &format!("{name}.out_proj"), fused, dim, rng),
            concat_fusion: opts.concat_fusion,
        }
    }

    pub fn branch(&self, index: usize) -> &Branch {
        match index {
            1 => &self.branch_1,
            2 => &self.branch_2,
            _ => panic!("branch index must be 1 or 2, got {index}"),
        }
    }
}

pub fn branch_tape(tape: &mut Tape, b: &Branch, x: Var) -> Result<Var> {
    let u = b.in_proj.forward(tape, x)?;
    let u = b.conv.forward(tape, u)?;
    let u = tape.silu(u);
    let u = ssm_tape(tape, &b.ssm, u)?;
    b.ln.forward(tape, u)
}

#[derive(Clone, Copy, Debug)]
pub struct ImbTrace {
    pub h1: Var,
    pub h2: Var,
    pub output: Var,
}

pub fn imb_tape(tape: &mut Tape, p: &ImbParams, x: Var) -> Result<ImbTrace> {
    let g = p.gate_proj.forward(tape, x)?;
    let h1 = branch_tape(tape, &p.branch_1, x)?;
    let h2 = branch_tape(tape, &p.branch_2, x)?;
    let s1 = tape.silu(h1);
    let s2 = tape.silu(h2);
    let m1 = tape.mul(s1, h2)?;
    let big_h1 = tape.mul(m1, g)?;
    let m2 = tape.mul(s2, h1)?;
    let big_h2 = tape.mul(m2, g)?;
    let fused = if p.concat_fusion {
        tape.concat(big_h1, big_h2)?
    } else {
        tape.add(big_h1, big_h2)?
    };
    let y = p.conv_3.forward(tape, fused)?;
    let output = p.out_proj.forward(tape, y)?;
    Ok(ImbTrace { h1, h2, output })
}

/// One branch applied to `tokens[z, dim]`; `index` is 1 or 2.
pub fn imb_branch(store: &ParamStore, p: &ImbParams, tokens: &Tensor, index: usize) -> Result<Tensor> {
    let mut tape = Tape::with_params(store);
    let x = lift(&mut tape, tokens)?;
    let y = branch_tape(&mut tape, p.branch(index), x)?;
    lower(&tape, y)
}

/// Full block on `tokens[z, dim]`.
pub fn imb_forward(store: &ParamStore, p: &ImbParams, tokens: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::with_params(store);
    let x = lift(&mut tape, tokens)?;
    let tr = imb_tape(&mut tape, p, x)?;
    lower(&tape, tr.output)
}
