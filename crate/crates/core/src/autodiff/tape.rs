//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node holding its output
//! and enough information to run its vector-Jacobian product. `backward`
//! walks the nodes once in reverse recording order.

use crate::error::{Error, Result};
use crate::spectral::{self, MaskDirection};
use crate::tensor::Tensor;

use super::kernels::{self, ScanDims};
use super::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Part {
    Re,
    Im,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf {
        trainable: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    MulBins {
        x: Var,
        mask: Var,
        bins: usize,
        d: usize,
    },
    MatMul {
        x: Var,
        w: Var,
        n: usize,
        k: usize,
        m: usize,
    },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Sin(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        da: usize,
        db: usize,
    },
    Slice {
        x: Var,
        start: usize,
        d: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalConv {
        x: Var,
        kernel: Var,
        bias: Var,
        seqs: usize,
        z: usize,
        d: usize,
        k: usize,
    },
    Rfft {
        x: Var,
        part: Part,
        seqs: usize,
        n: usize,
        d: usize,
    },
    Irfft {
        re: Var,
        im: Var,
        seqs: usize,
        n: usize,
        d: usize,
    },
    BandMask {
        theta: Var,
        direction: MaskDirection,
        tau: f64,
    },
    Scan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        dims: ScanDims,
    },
    MeanAxis1 {
        x: Var,
        outer: usize,
        k: usize,
        d: usize,
    },
    MaskReplace {
        x: Var,
        token: Var,
        mask: Vec<f64>,
        width: usize,
    },
    AddPositional {
        x: Var,
        pos: Var,
        seqs: usize,
        z: usize,
        d: usize,
    },
    SmoothedCe {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
        batch: usize,
    },
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
        width: usize,
        denom: f64,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
}

/// Recording of primitive applications in evaluation order.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    n_params: usize,
}

/// Gradients of a scalar with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for non-leaf or non-trainable values.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for the parameters bound with [`Tape::with_params`], in store order.
    pub fn params(&self, store: &ParamStore) -> Vec<Tensor> {
        (0..store.len())
            .map(|i| {
                self.grads[i]
                    .clone()
                    .expect("bound parameters are trainable leaves")
            })
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape whose first `store.len()` nodes are trainable leaves holding
    /// the store's parameters, so [`Tape::param`] is a constant-time lookup.
    pub fn with_params(store: &ParamStore) -> Self {
        let mut tape = Tape::new();
        for t in store.values() {
            tape.leaf(t.clone());
        }
        tape.n_params = store.len();
        tape
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(
            id.0 < self.n_params,
            "parameter {} is not bound on this tape",
            id.0
        );
        Var(id.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub(crate) fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { trainable: true }, value)
    }

    /// Non-trainable leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { trainable: false }, value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.node_backward(&node.op, &node.value, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match node.op {
                Op::Leaf { trainable: true } => {
                    let data = grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn node_backward(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                accumulate(grads, a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                accumulate(grads, b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, s) => accumulate(grads, a, g.iter().map(|v| v * s).collect()),
            Op::AddBias { x, bias } => {
                let d = self.value(bias).numel();
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, x, g.to_vec());
                accumulate(grads, bias, gb);
            }
            Op::MulBins { x, mask, bins, d } => {
                let (xv, mv) = (self.data(x), self.data(mask));
                let mut gx = vec![0.0; g.len()];
                let mut gm = vec![0.0; bins];
                for (i, (&gv, &xi)) in g.iter().zip(xv).enumerate() {
                    let k = (i / d) % bins;
                    gx[i] = gv * mv[k];
                    gm[k] += gv * xi;
                }
                accumulate(grads, x, gx);
                accumulate(grads, mask, gm);
            }
            Op::MatMul { x, w, n, k, m } => {
                let wt = kernels::transpose(self.data(w), k, m);
                accumulate(grads, x, kernels::matmul(g, &wt, n, m, k));
                accumulate(grads, w, kernels::matmul_grad_w(self.data(x), g, n, k, m));
            }
            Op::Relu(a) => {
                let av = self.data(a);
                accumulate(
                    grads,
                    a,
                    g.iter()
                        .zip(av)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Silu(a) => {
                let av = self.data(a);
                accumulate(
                    grads,
                    a,
                    g.iter()
                        .zip(av)
                        .map(|(g, &x)| {
                            let s = spectral::sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => accumulate(
                grads,
                a,
                g.iter()
                    .zip(out.data())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect(),
            ),
            Op::Softplus(a) => {
                let av = self.data(a);
                accumulate(
                    grads,
                    a,
                    g.iter()
                        .zip(av)
                        .map(|(g, &x)| g * spectral::sigmoid(x))
                        .collect(),
                );
            }
            Op::Exp(a) => accumulate(
                grads,
                a,
                g.iter().zip(out.data()).map(|(g, &e)| g * e).collect(),
            ),
            Op::Sin(a) => {
                let av = self.data(a);
                accumulate(
                    grads,
                    a,
                    g.iter().zip(av).map(|(g, &x)| g * x.cos()).collect(),
                );
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                accumulate(grads, a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                accumulate(grads, a, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
            Op::Concat { a, b, da, db } => {
                let rows = g.len() / (da + db);
                let mut ga = Vec::with_capacity(rows * da);
                let mut gb = Vec::with_capacity(rows * db);
                for row in g.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            Op::Slice { x, start, d } => {
                let width = out.last_dim();
                let mut gx = vec![0.0; self.value(x).numel()];
                for (r, row) in g.chunks(width).enumerate() {
                    gx[r * d + start..r * d + start + width].copy_from_slice(row);
                }
                accumulate(grads, x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref rstd,
            } => {
                let gm = self.data(gamma);
                let d = gm.len();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gxhat = vec![0.0; d];
                for (r, row) in g.chunks(d).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for c in 0..d {
                        gxhat[c] = row[c] * gm[c];
                        mean_g += gxhat[c];
                        mean_gx += gxhat[c] * xh[c];
                        gg[c] += row[c] * xh[c];
                        gbeta[c] += row[c];
                    }
                    mean_g /= d as f64;
                    mean_gx /= d as f64;
                    for c in 0..d {
                        gx[r * d + c] = rstd[r] * (gxhat[c] - mean_g - xh[c] * mean_gx);
                    }
                }
                accumulate(grads, x, gx);
                accumulate(grads, gamma, gg);
                accumulate(grads, beta, gbeta);
            }
            Op::CausalConv {
                x,
                kernel,
                bias,
                seqs,
                z,
                d,
                k,
            } => {
                let (xv, kv) = (self.data(x), self.data(kernel));
                let mut gx = vec![0.0; xv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gb = vec![0.0; d];
                for s in 0..seqs {
                    for t in 0..z {
                        let grow = &g[(s * z + t) * d..(s * z + t + 1) * d];
                        for (acc, v) in gb.iter_mut().zip(grow) {
                            *acc += v;
                        }
                        for j in 0..k {
                            let Some(src) = (t + j).checked_sub(k - 1) else {
                                continue;
                            };
                            let xo = (s * z + src) * d;
                            for c in 0..d {
                                gx[xo + c] += grow[c] * kv[j * d + c];
                                gk[j * d + c] += grow[c] * xv[xo + c];
                            }
                        }
                    }
                }
                accumulate(grads, x, gx);
                accumulate(grads, kernel, gk);
                accumulate(grads, bias, gb);
            }
            Op::Rfft {
                x,
                part,
                seqs,
                n,
                d,
            } => {
                let zeros = vec![0.0; g.len()];
                let gx = match part {
                    Part::Re => spectral::rfft_adjoint_columns(g, &zeros, seqs, n, d),
                    Part::Im => spectral::rfft_adjoint_columns(&zeros, g, seqs, n, d),
                };
                accumulate(grads, x, gx);
            }
            Op::Irfft {
                re,
                im,
                seqs,
                n,
                d,
            } => {
                let (gr, gi) = spectral::irfft_adjoint_columns(g, seqs, n, d);
                accumulate(grads, re, gr);
                accumulate(grads, im, gi);
            }
            Op::BandMask {
                theta,
                direction,
                tau,
                ..
            } => {
                let sign = match direction {
                    MaskDirection::KeepBelow => 1.0,
                    MaskDirection::KeepAbove => -1.0,
                };
                let gt: f64 = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, &m)| g * sign * m * (1.0 - m) / tau)
                    .sum();
                accumulate(grads, theta, vec![gt]);
            }
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                dims,
            } => {
                let sg = kernels::scan_backward(
                    self.data(x),
                    self.data(delta),
                    self.data(a),
                    self.data(b),
                    self.data(c),
                    g,
                    dims,
                );
                accumulate(grads, x, sg.x);
                accumulate(grads, delta, sg.delta);
                accumulate(grads, a, sg.a);
                accumulate(grads, b, sg.b);
                accumulate(grads, c, sg.c);
            }
            Op::MeanAxis1 { x, outer, k, d } => {
                let mut gx = vec![0.0; outer * k * d];
                let inv = 1.0 / k as f64;
                for o in 0..outer {
                    for j in 0..k {
                        for c in 0..d {
                            gx[(o * k + j) * d + c] = g[o * d + c] * inv;
                        }
                    }
                }
                accumulate(grads, x, gx);
            }
            Op::MaskReplace {
                x,
                token,
                ref mask,
                width,
            } => {
                let mut gx = g.to_vec();
                let mut gt = vec![0.0; width];
                for (r, &m) in mask.iter().enumerate() {
                    if m != 0.0 {
                        for c in 0..width {
                            gt[c] += g[r * width + c];
                            gx[r * width + c] = 0.0;
                        }
                    }
                }
                accumulate(grads, x, gx);
                accumulate(grads, token, gt);
            }
            Op::AddPositional {
                x,
                pos,
                seqs,
                z,
                d,
            } => {
                let mut gp = vec![0.0; self.value(pos).numel()];
                for s in 0..seqs {
                    for t in 0..z {
                        for c in 0..d {
                            gp[t * d + c] += g[(s * z + t) * d + c];
                        }
                    }
                }
                accumulate(grads, x, g.to_vec());
                accumulate(grads, pos, gp);
            }
            Op::SmoothedCe {
                logits,
                ref targets,
                ref probs,
                batch,
                ..
            } => {
                let scale = g[0] / batch as f64;
                accumulate(
                    grads,
                    logits,
                    probs
                        .iter()
                        .zip(targets)
                        .map(|(p, t)| scale * (p - t))
                        .collect(),
                );
            }
            Op::MaskedMse {
                pred,
                ref target,
                ref mask,
                width,
                denom,
            } => {
                let pv = self.data(pred);
                let mut gp = vec![0.0; pv.len()];
                if denom > 0.0 {
                    let scale = g[0] * 2.0 / (width as f64 * denom);
                    for (r, &m) in mask.iter().enumerate() {
                        if m == 0.0 {
                            continue;
                        }
                        for c in 0..width {
                            let i = r * width + c;
                            gp[i] = scale * m * (pv[i] - target[i]);
                        }
                    }
                }
                accumulate(grads, pred, gp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
