//! Discrete Fourier machinery and frequency-band masks.
//!
//! Power-of-two lengths go through an iterative radix-2 Cooley-Tukey
//! transform; every other length falls back to the direct O(N²) sum. Token
//! counts in this crate are small, so the fallback is never the bottleneck.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{shape_err, Result};
use crate::tensor::{CTensor, Tensor};

/// Precomputed twiddles for one transform length.
#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    /// `e^{-2πik/n}` for `k in 0..n`.
    twiddles: Vec<Complex64>,
    /// Bit-reversal permutation, only for power-of-two `n`.
    bitrev: Option<Vec<usize>>,
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "transform length must be positive");
        let twiddles = (0..n)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        let bitrev = n.is_power_of_two().then(|| {
            let bits = n.trailing_zeros();
            (0..n)
                .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
                .collect()
        });
        FftPlan {
            n,
            twiddles,
            bitrev,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place unnormalized forward transform (`e^{-j...}` kernel).
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    /// In-place unnormalized inverse transform (`e^{+j...}` kernel, no 1/N).
    pub fn inverse_unnormalized(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        assert_eq!(buf.len(), self.n, "buffer length does not match plan");
        let tw = |k: usize| {
            let w = self.twiddles[k];
            if inverse {
                w.conj()
            } else {
                w
            }
        };
        match &self.bitrev {
            Some(rev) => {
                for (i, &j) in rev.iter().enumerate() {
                    if i < j {
                        buf.swap(i, j);
                    }
                }
                let mut len = 2;
                while len <= self.n {
                    let half = len / 2;
                    let step = self.n / len;
                    for start in (0..self.n).step_by(len) {
                        for j in 0..half {
                            let w = tw(j * step);
                            let u = buf[start + j];
                            let v = buf[start + j + half] * w;
                            buf[start + j] = u + v;
                            buf[start + j + half] = u - v;
                        }
                    }
                    len <<= 1;
                }
            }
            None => {
                let src = buf.to_vec();
                for (k, out) in buf.iter_mut().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (m, &x) in src.iter().enumerate() {
                        acc += x * tw((k * m) % self.n);
                    }
                    *out = acc;
                }
            }
        }
    }
}

/// Number of retained bins for a real transform of length `n`.
pub fn n_freq(n: usize) -> usize {
    n / 2 + 1
}

/// Forward real transform of every column of a `[seqs, n, d]` block along
/// the middle axis. Returns `(re, im)`, each laid out `[seqs, n/2+1, d]`.
pub(crate) fn rfft_columns(x: &[f64], seqs: usize, n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let nf = n_freq(n);
    let plan = FftPlan::new(n);
    let mut re = vec![0.0; seqs * nf * d];
    let mut im = vec![0.0; seqs * nf * d];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for s in 0..seqs {
        for c in 0..d {
            for (t, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(x[(s * n + t) * d + c], 0.0);
            }
            plan.forward(&mut buf);
            for k in 0..nf {
                let o = (s * nf + k) * d + c;
                re[o] = buf[k].re;
                im[o] = buf[k].im;
            }
        }
    }
    (re, im)
}

/// Inverse real transform of `[seqs, n/2+1, d]` half spectra back to
/// `[seqs, n, d]`. Imaginary parts of the DC and (even-length) Nyquist bins
/// are ignored, matching the usual real-inverse convention.
pub(crate) fn irfft_columns(re: &[f64], im: &[f64], seqs: usize, n: usize, d: usize) -> Vec<f64> {
    let nf = n_freq(n);
    let plan = FftPlan::new(n);
    let mut out = vec![0.0; seqs * n * d];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for s in 0..seqs {
        for c in 0..d {
            let bin = |k: usize| {
                let o = (s * nf + k) * d + c;
                Complex64::new(re[o], im[o])
            };
            buf[0] = Complex64::new(bin(0).re, 0.0);
            for k in 1..nf {
                let v = bin(k);
                if 2 * k == n {
                    buf[k] = Complex64::new(v.re, 0.0);
                } else {
                    buf[k] = v;
                    buf[n - k] = v.conj();
                }
            }
            plan.inverse_unnormalized(&mut buf);
            for t in 0..n {
                out[(s * n + t) * d + c] = buf[t].re * scale;
            }
        }
    }
    out
}

/// Adjoint of [`rfft_columns`]: maps gradients on `(re, im)` half spectra
/// back to a gradient on the real input.
pub(crate) fn rfft_adjoint_columns(
    g_re: &[f64],
    g_im: &[f64],
    seqs: usize,
    n: usize,
    d: usize,
) -> Vec<f64> {
    let nf = n_freq(n);
    let plan = FftPlan::new(n);
    let mut out = vec![0.0; seqs * n * d];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for s in 0..seqs {
        for c in 0..d {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for k in 0..nf {
                let o = (s * nf + k) * d + c;
                buf[k] = Complex64::new(g_re[o], g_im[o]);
            }
            plan.inverse_unnormalized(&mut buf);
            for t in 0..n {
                out[(s * n + t) * d + c] = buf[t].re;
            }
        }
    }
    out
}

/// Adjoint of [`irfft_columns`]. Returns gradients on `(re, im)`.
pub(crate) fn irfft_adjoint_columns(
    g: &[f64],
    seqs: usize,
    n: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let nf = n_freq(n);
    let (mut re, mut im) = rfft_columns(g, seqs, n, d);
    for s in 0..seqs {
        for k in 0..nf {
            let edge = k == 0 || 2 * k == n;
            let w = if edge { 1.0 } else { 2.0 } / n as f64;
            for c in 0..d {
                let o = (s * nf + k) * d + c;
                re[o] *= w;
                im[o] = if edge { 0.0 } else { im[o] * w };
            }
        }
    }
    (re, im)
}

/// Half spectrum of a real signal along its first (token) axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// `[n_freq, dim]`, or `[n_freq]` for a 1-D signal.
    pub bins: CTensor,
    /// Token count of the signal before the transform.
    pub n_time: usize,
}

impl Spectrum {
    pub fn n_freq(&self) -> usize {
        self.bins.shape()[0]
    }

    fn dim(&self) -> usize {
        self.bins.shape().get(1).copied().unwrap_or(1)
    }
}

fn token_layout(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [n] if n >= 1 => Ok((n, 1)),
        [n, d] if n >= 1 => Ok((n, d)),
        _ => shape_err(format!(
            "expected [tokens] or [tokens, dim] with tokens >= 1, got {:?}",
            x.shape()
        )),
    }
}

/// Real-input DFT along the token axis, one column per feature.
pub fn rfft(x: &Tensor) -> Result<Spectrum> {
    let (n, d) = token_layout(x)?;
    let (re, im) = rfft_columns(x.data(), 1, n, d);
    let mut shape = x.shape().to_vec();
    shape[0] = n_freq(n);
    let bins = CTensor::from_parts(&Tensor::new(shape.clone(), re)?, &Tensor::new(shape, im)?)?;
    Ok(Spectrum { bins, n_time: n })
}

/// Inverse of [`rfft`]; output length is the stored `n_time`.
pub fn irfft(s: &Spectrum) -> Result<Tensor> {
    if s.n_time == 0 || s.bins.shape().is_empty() || s.n_freq() != n_freq(s.n_time) {
        return shape_err(format!(
            "spectrum with {:?} bins is inconsistent with n_time {}",
            s.bins.shape(),
            s.n_time
        ));
    }
    let d = s.dim();
    let out = irfft_columns(s.bins.re().data(), s.bins.im().data(), 1, s.n_time, d);
    let mut shape = s.bins.shape().to_vec();
    shape[0] = s.n_time;
    Tensor::new(shape, out)
}

/// Full-length complex DFT of a real 1-D signal (all `n` bins).
pub fn dft_full(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if !buf.is_empty() {
        FftPlan::new(buf.len()).forward(&mut buf);
    }
    buf
}

/// Normalized inverse of a full-length complex DFT.
pub fn idft_full(bins: &[Complex64]) -> Vec<Complex64> {
    let mut buf = bins.to_vec();
    if !buf.is_empty() {
        FftPlan::new(buf.len()).inverse_unnormalized(&mut buf);
        let scale = 1.0 / buf.len() as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }
    buf
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskDirection {
    /// Pass frequencies below the threshold (suppresses high-frequency content).
    KeepBelow,
    /// Pass frequencies above the threshold (suppresses low-frequency content).
    KeepAbove,
}

/// Soft band-pass mask over the bins of a spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct BandMask {
    /// `[n_freq]`, each in [0, 1].
    pub values: Tensor,
    pub threshold: f64,
    pub direction: MaskDirection,
    pub temperature: f64,
}

/// Normalized frequency `k / n_time` of bin `k`.
#[inline]
pub fn bin_frequency(k: usize, n_time: usize) -> f64 {
    k as f64 / n_time as f64
}

/// Value of a soft mask at normalized frequency `f`.
#[inline]
pub fn mask_value(f: f64, theta: f64, direction: MaskDirection, tau: f64) -> f64 {
    match direction {
        MaskDirection::KeepBelow => sigmoid((theta - f) / tau),
        MaskDirection::KeepAbove => sigmoid((f - theta) / tau),
    }
}

pub fn band_mask(s: &Spectrum, theta: f64, direction: MaskDirection, tau: f64) -> BandMask {
    assert!(tau > 0.0, "mask temperature must be positive");
    let values = (0..s.n_freq())
        .map(|k| mask_value(bin_frequency(k, s.n_time), theta, direction, tau))
        .collect();
    BandMask {
        values: Tensor::from_vec(values),
        threshold: theta,
        direction,
        temperature: tau,
    }
}

/// Scales every bin by the matching mask value.
pub fn apply_mask(s: &Spectrum, m: &BandMask) -> Result<Spectrum> {
    if m.values.numel() != s.n_freq() {
        return shape_err(format!(
            "mask has {} values, spectrum has {} bins",
            m.values.numel(),
            s.n_freq()
        ));
    }
    let d = s.dim();
    let mut bins = s.bins.clone();
    for (i, b) in bins.data_mut().iter_mut().enumerate() {
        *b *= m.values.data()[i / d];
    }
    Ok(Spectrum {
        bins,
        n_time: s.n_time,
    })
}

/// Direct-sum circular convolution `y[n] = Σ_m x[m]·h[(n−m) mod N]`.
pub fn circular_convolve(x: &Tensor, h: &Tensor) -> Result<Tensor> {
    if x.ndim() != 1 || x.shape() != h.shape() {
        return shape_err(format!(
            "circular convolution needs equal-length 1-D inputs, got {:?} and {:?}",
            x.shape(),
            h.shape()
        ));
    }
    let n = x.numel();
    let (x, h) = (x.data(), h.data());
    let y = (0..n)
        .map(|i| (0..n).map(|m| x[m] * h[(i + n - m) % n]).sum())
        .collect();
    Ok(Tensor::from_vec(y))
}
