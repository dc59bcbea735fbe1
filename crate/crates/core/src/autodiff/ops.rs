//! Forward constructors for every differentiable primitive.

use crate::error::{shape_err, Result};
use crate::spectral::{self, MaskDirection};
use crate::tensor::Tensor;

use super::kernels::{self, ScanDims};
use super::tape::{Op, Part, Tape, Var};

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return shape_err(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    Ok(())
}

/// Splits a rank-3 shape `[seqs, z, d]`.
fn seq_layout(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [s, z, d] => Ok((s, z, d)),
        _ => shape_err(format!("{what}: expected [seqs, tokens, dim], got {shape:?}")),
    }
}

impl Tape {
    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// `x[..., d] + bias[d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(bias).numel();
        if self.value(x).last_dim() != d {
            return shape_err(format!(
                "bias of width {d} for input {:?}",
                self.shape(x)
            ));
        }
        let b = self.data(bias).to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        Ok(self.push(Op::AddBias { x, bias }, value))
    }

    /// `x[s, k, d] * mask[k]`, broadcasting the mask over the outer and
    /// trailing axes.
    pub fn mul_bins(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (_, bins, d) = seq_layout(self.shape(x), "mul_bins")?;
        if self.value(mask).numel() != bins {
            return shape_err(format!(
                "mask of {} values for {bins} bins",
                self.value(mask).numel()
            ));
        }
        let m = self.data(mask).to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= m[(i / d) % bins];
        }
        Ok(self.push(Op::MulBins { x, mask, bins, d }, value))
    }

    /// `x[..., k] · w[k, m]`, treating all leading axes as rows.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (k, m) = match *self.shape(w) {
            [k, m] => (k, m),
            ref s => return shape_err(format!("weight must be 2-D, got {s:?}")),
        };
        let xv = self.value(x);
        if xv.last_dim() != k {
            return shape_err(format!(
                "matmul {:?} · {:?}",
                xv.shape(),
                self.shape(w)
            ));
        }
        let n = xv.rows();
        let data = kernels::matmul(xv.data(), self.data(w), n, k, m);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = m;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::MatMul { x, w, n, k, m }, value))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), kernels::silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), spectral::sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), kernels::softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (da, db) = (av.last_dim(), bv.last_dim());
        let lead_a = &av.shape()[..av.ndim() - 1];
        if lead_a != &bv.shape()[..bv.ndim() - 1] {
            return shape_err(format!("concat {:?} with {:?}", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.data().chunks(da).zip(bv.data().chunks(db)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = lead_a.to_vec();
        shape.push(da + db);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat { a, b, da, db }, value))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if start + len > d {
            return shape_err(format!("slice {start}..{} of width {d}", start + len));
        }
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Slice { x, start, d }, value))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(gamma).numel();
        if self.value(x).last_dim() != d || self.value(beta).numel() != d {
            return shape_err(format!(
                "layer_norm over {:?} with gamma {:?} beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = gm[c] * h + bt[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            value,
        ))
    }

    /// Depthwise causal convolution over the token axis of `x[seqs, z, d]`
    /// with `kernel[k, d]` (tap `k-1` aligned with the current token) and
    /// `bias[d]`. The input is implicitly left-padded with `k-1` zeros.
    pub fn causal_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (seqs, z, d) = seq_layout(self.shape(x), "causal_conv")?;
        let k = match *self.shape(kernel) {
            [k, kd] if kd == d && k >= 1 => k,
            ref s => {
                return shape_err(format!(
                    "kernel {s:?} does not match input width {d}"
                ))
            }
        };
        if self.value(bias).numel() != d {
            return shape_err(format!("conv bias must have {d} values"));
        }
        let (xv, kv, bv) = (self.data(x), self.data(kernel), self.data(bias));
        let mut out = vec![0.0; xv.len()];
        for s in 0..seqs {
            for t in 0..z {
                let orow = &mut out[(s * z + t) * d..(s * z + t + 1) * d];
                orow.copy_from_slice(bv);
                for j in 0..k {
                    let Some(src) = (t + j).checked_sub(k - 1) else {
                        continue;
                    };
                    let xrow = &xv[(s * z + src) * d..(s * z + src + 1) * d];
                    let krow = &kv[j * d..(j + 1) * d];
                    for c in 0..d {
                        orow[c] += krow[c] * xrow[c];
                    }
                }
            }
        }
        let value = Tensor::new(vec![seqs, z, d], out)?;
        Ok(self.push(
            Op::CausalConv {
                x,
                kernel,
                bias,
                seqs,
                z,
                d,
                k,
            },
            value,
        ))
    }

    /// Real DFT of `x[seqs, n, d]` along the token axis; returns `(re, im)`
    /// each shaped `[seqs, n/2+1, d]`.
    pub fn rfft(&mut self, x: Var) -> Result<(Var, Var)> {
        let (seqs, n, d) = seq_layout(self.shape(x), "rfft")?;
        if n == 0 {
            return shape_err("rfft of an empty sequence");
        }
        let (re, im) = spectral::rfft_columns(self.data(x), seqs, n, d);
        let shape = vec![seqs, spectral::n_freq(n), d];
        let re = self.push(
            Op::Rfft {
                x,
                part: Part::Re,
                seqs,
                n,
                d,
            },
            Tensor::new(shape.clone(), re)?,
        );
        let im = self.push(
            Op::Rfft {
                x,
                part: Part::Im,
                seqs,
                n,
                d,
            },
            Tensor::new(shape, im)?,
        );
        Ok((re, im))
    }

    /// Inverse of [`Tape::rfft`] producing `n` tokens.
    pub fn irfft(&mut self, re: Var, im: Var, n: usize) -> Result<Var> {
        same_shape(self, re, im, "irfft")?;
        let (seqs, nf, d) = seq_layout(self.shape(re), "irfft")?;
        if n == 0 || nf != spectral::n_freq(n) {
            return shape_err(format!("{nf} bins cannot invert to {n} tokens"));
        }
        let out = spectral::irfft_columns(self.data(re), self.data(im), seqs, n, d);
        let value = Tensor::new(vec![seqs, n, d], out)?;
        Ok(self.push(
            Op::Irfft {
                re,
                im,
                seqs,
                n,
                d,
            },
            value,
        ))
    }

    /// Soft frequency mask over `n_time/2+1` bins, differentiable in the
    /// scalar threshold `theta`.
    pub fn band_mask(
        &mut self,
        theta: Var,
        n_time: usize,
        direction: MaskDirection,
        tau: f64,
    ) -> Result<Var> {
        if self.value(theta).numel() != 1 {
            return shape_err("mask threshold must be a single value");
        }
        let th = self.data(theta)[0];
        let values = (0..spectral::n_freq(n_time))
            .map(|k| spectral::mask_value(spectral::bin_frequency(k, n_time), th, direction, tau))
            .collect();
        Ok(self.push(
            Op::BandMask {
                theta,
                direction,
                tau,
            },
            Tensor::from_vec(values),
        ))
    }

    /// Selective scan with zero-order-hold discretization.
    ///
    /// `x, delta: [seqs, z, d]`, `a: [d, n]`, `b, c: [seqs, z, n]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (seqs, z, d) = seq_layout(self.shape(x), "scan input")?;
        same_shape(self, x, delta, "scan delta")?;
        let n = match *self.shape(a) {
            [ad, n] if ad == d => n,
            ref s => return shape_err(format!("state matrix {s:?} for width {d}")),
        };
        same_shape(self, b, c, "scan B/C")?;
        if self.shape(b) != [seqs, z, n] {
            return shape_err(format!(
                "scan B {:?}, expected {:?}",
                self.shape(b),
                [seqs, z, n]
            ));
        }
        let dims = ScanDims { seqs, z, d, n };
        let y = kernels::scan_forward(
            self.data(x),
            self.data(delta),
            self.data(a),
            self.data(b),
            self.data(c),
            dims,
        );
        let value = Tensor::new(vec![seqs, z, d], y)?;
        Ok(self.push(
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                dims,
            },
            value,
        ))
    }

    /// Mean over the middle axis: `[outer, k, d] -> [outer, d]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let (outer, k, d) = seq_layout(self.shape(x), "mean_axis1")?;
        let xv = self.data(x);
        let mut out = vec![0.0; outer * d];
        for o in 0..outer {
            for j in 0..k {
                for c in 0..d {
                    out[o * d + c] += xv[(o * k + j) * d + c];
                }
            }
        }
        let inv = 1.0 / k as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![outer, d], out)?;
        Ok(self.push(Op::MeanAxis1 { x, outer, k, d }, value))
    }

    /// Replaces each row of `x` whose `mask` entry is nonzero with `token`.
    pub fn mask_replace(&mut self, x: Var, token: Var, mask: &[f64]) -> Result<Var> {
        let width = self.value(token).numel();
        let xv = self.value(x);
        if xv.last_dim() != width || xv.rows() != mask.len() {
            return shape_err(format!(
                "mask_replace: input {:?}, token width {width}, mask length {}",
                xv.shape(),
                mask.len()
            ));
        }
        let tok = self.data(token).to_vec();
        let mut value = xv.clone();
        for (row, &m) in value.data_mut().chunks_mut(width).zip(mask) {
            if m != 0.0 {
                row.copy_from_slice(&tok);
            }
        }
        Ok(self.push(
            Op::MaskReplace {
                x,
                token,
                mask: mask.to_vec(),
                width,
            },
            value,
        ))
    }

    /// `x[s, t, :] + pos[t, :]` using the first `z` rows of `pos`.
    pub fn add_positional(&mut self, x: Var, pos: Var) -> Result<Var> {
        let (seqs, z, d) = seq_layout(self.shape(x), "add_positional")?;
        match *self.shape(pos) {
            [zmax, pd] if pd == d && zmax >= z => {}
            ref s => {
                return shape_err(format!(
                    "position table {s:?} cannot cover {z} tokens of width {d}"
                ))
            }
        }
        let pv = self.data(pos)[..z * d].to_vec();
        let mut value = self.value(x).clone();
        for seq in value.data_mut().chunks_mut(z * d) {
            for (v, p) in seq.iter_mut().zip(&pv) {
                *v += p;
            }
        }
        Ok(self.push(
            Op::AddPositional {
                x,
                pos,
                seqs,
                z,
                d,
            },
            value,
        ))
    }

    /// Mean cross-entropy of `logits[batch, k]` against per-row target
    /// distributions `targets[batch * k]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (batch, k) = match *self.shape(logits) {
            [b, k] => (b, k),
            ref s => return shape_err(format!("logits must be [batch, classes], got {s:?}")),
        };
        if targets.len() != batch * k {
            return shape_err(format!(
                "{} targets for logits {:?}",
                targets.len(),
                [batch, k]
            ));
        }
        let lv = self.data(logits);
        let mut probs = vec![0.0; batch * k];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &lv[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..k {
                let logp = row[c] - lse;
                probs[r * k + c] = logp.exp();
                loss -= targets[r * k + c] * logp;
            }
        }
        loss /= batch as f64;
        Ok(self.push(
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                probs,
                batch,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Masked mean-squared reconstruction error. `pred` and `target` are
    /// viewed as rows of width `last_dim` (one row per patch); `mask` holds
    /// one weight per row. The loss is the mask-weighted sum of per-row mean
    /// squared errors divided by the mask sum, and 0 when the mask is empty.
    pub fn masked_mse(&mut self, pred: Var, target: &[f64], mask: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        let width = pv.last_dim();
        if target.len() != pv.numel() || mask.len() != pv.rows() {
            return shape_err(format!(
                "masked_mse: prediction {:?}, {} targets, {} mask entries",
                pv.shape(),
                target.len(),
                mask.len()
            ));
        }
        let denom: f64 = mask.iter().sum();
        let mut loss = 0.0;
        if denom > 0.0 {
            for (r, &m) in mask.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                let se: f64 = (0..width)
                    .map(|c| (pv.data()[r * width + c] - target[r * width + c]).powi(2))
                    .sum();
                loss += m * se / width as f64;
            }
            loss /= denom;
        }
        Ok(self.push(
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                width,
                denom,
            },
            Tensor::scalar(loss),
        ))
    }
}
