//! Adaptive filtering block.
//!
//! Tokens are moved to the frequency domain along the token axis, split into
//! a low-pass and a high-pass view by two soft threshold masks, reweighted by
//! three small learned complex filters, summed, and transformed back.
//!
//! A filter `ψ` is a two-layer MLP applied to each bin independently, with
//! weights shared across bins. Its input is the bin's stacked real and
//! imaginary parts (`2·dim` values) and its output is read as a complex gain
//! `g[k]` of width `dim`, which multiplies the bin as a complex number.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::spectral::{BandMask, MaskDirection, Spectrum};
use crate::tensor::{CTensor, Tensor};

pub const DEFAULT_THETA_HIGH: f64 = 0.4;
pub const DEFAULT_THETA_LOW: f64 = 0.05;
pub const DEFAULT_TAU: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct PsiFilter {
    /// `[2·dim, hidden]`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[hidden, 2·dim]`
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
}

impl PsiFilter {
    /// Random hidden layer; the output layer starts small so the filter
    /// begins near the constant gain `gain + 0j`.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(hidden >= 1 && dim >= 1);
        let b_in = 1.0 / ((2 * dim) as f64).sqrt();
        let b_out = 0.1 / (hidden as f64).sqrt();
        let mut b2 = vec![0.0; 2 * dim];
        b2[..dim].iter_mut().for_each(|v| *v = gain);
        PsiFilter {
            w1: store.add(
                format!("{name}.w1"),
                Tensor::uniform(vec![2 * dim, hidden], -b_in, b_in, rng),
            ),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(vec![hidden])),
            w2: store.add(
                format!("{name}.w2"),
                Tensor::uniform(vec![hidden, 2 * dim], -b_out, b_out, rng),
            ),
            b2: store.add(format!("{name}.b2"), Tensor::from_vec(b2)),
            dim,
        }
    }

    /// Complex gain `(g_re, g_im)` for each bin of `(re, im)`.
    pub fn gains(&self, tape: &mut Tape, re: Var, im: Var) -> Result<(Var, Var)> {
        let stacked = tape.concat(re, im)?;
        let (w1, b1) = (tape.param(self.w1), tape.param(self.b1));
        let h = tape.linear(stacked, w1, b1)?;
        let h = tape.relu(h);
        let (w2, b2) = (tape.param(self.w2), tape.param(self.b2));
        let g = tape.linear(h, w2, b2)?;
        Ok((tape.slice_last(g, 0, self.dim)?, tape.slice_last(g, self.dim, self.dim)?))
    }
}

/// Complex product `(ar + i·ai)(br + i·bi)`.
pub fn complex_mul(tape: &mut Tape, a: (Var, Var), b: (Var, Var)) -> Result<(Var, Var)> {
    let rr = tape.mul(a.0, b.0)?;
    let ii = tape.mul(a.1, b.1)?;
    let ri = tape.mul(a.0, b.1)?;
    let ir = tape.mul(a.1, b.0)?;
    Ok((tape.sub(rr, ii)?, tape.add(ri, ir)?))
}

/// `ψ(source) ⊙ target`.
pub fn psi_filter(
    tape: &mut Tape,
    psi: &PsiFilter,
    source: (Var, Var),
    target: (Var, Var),
) -> Result<(Var, Var)> {
    let g = psi.gains(tape, source.0, source.1)?;
    complex_mul(tape, g, target)
}

#[derive(Clone, Debug)]
pub struct AfbParams {
    /// Scalar; bins below it survive the high-frequency filter.
    pub theta_high: ParamId,
    /// Scalar; bins above it survive the low-frequency filter.
    pub theta_low: ParamId,
    pub psi_global: PsiFilter,
    pub psi_high_local: PsiFilter,
    pub psi_low_local: PsiFilter,
    pub tau: f64,
    /// Pair the high-band gain with the low-band spectrum in the first
    /// local term instead of with the high-band spectrum.
    pub literal_eq10: bool,
    pub use_high: bool,
    pub use_low: bool,
}

/// Construction options for [`AfbParams::init`].
#[derive(Clone, Debug)]
pub struct AfbOptions {
    pub hidden: Option<usize>,
    pub theta_high: f64,
    pub theta_low: f64,
    pub tau: f64,
    pub literal_eq10: bool,
    pub use_high: bool,
    pub use_low: bool,
}

impl Default for AfbOptions {
    fn default() -> Self {
        AfbOptions {
            hidden: None,
            theta_high: DEFAULT_THETA_HIGH,
            theta_low: DEFAULT_THETA_LOW,
            tau: DEFAULT_TAU,
            literal_eq10: false,
            use_high: true,
            use_low: true,
        }
    }
}

impl AfbParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, opts: &AfbOptions, rng: &mut Rng) -> Self {
        assert!(opts.tau > 0.0, "mask temperature must be positive");
        let hidden = opts.hidden.unwrap_or(dim);
        let third = 1.0 / 3.0;
        AfbParams {
            theta_high: store.add(format!("{name}.theta_high"), Tensor::scalar(opts.theta_high)),
            theta_low: store.add(format!("{name}.theta_low"), Tensor::scalar(opts.theta_low)),
            psi_global: PsiFilter::init(store, &format!("{name}.psi_global"), dim, hidden, third, rng),
            psi_high_local: PsiFilter::init(store, &format!("{name}.psi_high"), dim, hidden, third, rng),
            psi_low_local: PsiFilter::init(store, &format!("{name}.psi_low"), dim, hidden, third, rng),
            tau: opts.tau,
            literal_eq10: opts.literal_eq10,
            use_high: opts.use_high,
            use_low: opts.use_low,
        }
    }
}

/// Tape handles for every intermediate of one block application.
#[derive(Clone, Debug)]
pub struct AfbTrace {
    pub spectrum: (Var, Var),
    pub mask_high: Var,
    pub mask_low: Var,
    pub filtered_high: (Var, Var),
    pub filtered_low: (Var, Var),
    pub global: (Var, Var),
    pub local_high: Option<(Var, Var)>,
    pub local_low: Option<(Var, Var)>,
    pub integrated: (Var, Var),
    pub output: Var,
}

/// Block forward on `x[seqs, z, dim]`.
pub fn afb_tape(tape: &mut Tape, p: &AfbParams, x: Var) -> Result<AfbTrace> {
    let z = match *tape.shape(x) {
        [_, z, d] if d == p.psi_global.dim => z,
        ref s => return shape_err(format!("filter block of width {} got {s:?}", p.psi_global.dim)),
    };
    let spectrum = tape.rfft(x)?;
    let th_high = tape.param(p.theta_high);
    let th_low = tape.param(p.theta_low);
    let mask_high = tape.band_mask(th_high, z, MaskDirection::KeepBelow, p.tau)?;
    let mask_low = tape.band_mask(th_low, z, MaskDirection::KeepAbove, p.tau)?;
    let filtered_high = (
        tape.mul_bins(spectrum.0, mask_high)?,
        tape.mul_bins(spectrum.1, mask_high)?,
    );
    let filtered_low = (
        tape.mul_bins(spectrum.0, mask_low)?,
        tape.mul_bins(spectrum.1, mask_low)?,
    );

    let global = psi_filter(tape, &p.psi_global, spectrum, spectrum)?;
    let mut integrated = global;
    let local_high = if p.use_high {
        let target = if p.literal_eq10 { filtered_low } else { filtered_high };
        let lh = psi_filter(tape, &p.psi_high_local, filtered_high, target)?;
        integrated = (tape.add(integrated.0, lh.0)?, tape.add(integrated.1, lh.1)?);
        Some(lh)
    } else {
        None
    };
    let local_low = if p.use_low {
        let ll = psi_filter(tape, &p.psi_low_local, filtered_low, filtered_low)?;
        integrated = (tape.add(integrated.0, ll.0)?, tape.add(integrated.1, ll.1)?);
        Some(ll)
    } else {
        None
    };
    let output = tape.irfft(integrated.0, integrated.1, z)?;
    Ok(AfbTrace {
        spectrum,
        mask_high,
        mask_low,
        filtered_high,
        filtered_low,
        global,
        local_high,
        local_low,
        integrated,
        output,
    })
}

/// Intermediate values of one layer, kept for inspection and tests.
#[derive(Clone, Debug, Default)]
pub struct LayerActivations {
    pub spectrum: Option<Spectrum>,
    pub mask_high: Option<BandMask>,
    pub mask_low: Option<BandMask>,
    pub filtered_high: Option<Spectrum>,
    pub filtered_low: Option<Spectrum>,
    pub global: Option<Spectrum>,
    pub local_high: Option<Spectrum>,
    pub local_low: Option<Spectrum>,
    pub integrated: Option<Spectrum>,
    pub afb_output: Option<Tensor>,
    pub imb_branch_1: Option<Tensor>,
    pub imb_branch_2: Option<Tensor>,
    pub imb_output: Option<Tensor>,
    pub layer_output: Option<Tensor>,
}

/// Reads a `[1, n_freq, dim]` pair off the tape as a spectrum.
pub(crate) fn spectrum_of(tape: &Tape, v: (Var, Var), n_time: usize) -> Result<Spectrum> {
    let squeeze = |t: &Tensor| t.clone().reshape(t.shape()[1..].to_vec());
    let bins = CTensor::from_parts(&squeeze(tape.value(v.0))?, &squeeze(tape.value(v.1))?)?;
    Ok(Spectrum { bins, n_time })
}

/// Places a `[n_freq, dim]` spectrum on the tape as constants.
pub(crate) fn spectrum_constants(tape: &mut Tape, s: &Spectrum) -> Result<(Var, Var)> {
    let (nf, d) = match *s.bins.shape() {
        [nf, d] => (nf, d),
        ref sh => return shape_err(format!("expected [bins, dim] spectrum, got {sh:?}")),
    };
    let re = tape.constant(s.bins.re().reshape(vec![1, nf, d])?);
    let im = tape.constant(s.bins.im().reshape(vec![1, nf, d])?);
    Ok((re, im))
}

fn mask_of(tape: &Tape, v: Var, store: &ParamStore, id: ParamId, dir: MaskDirection, tau: f64) -> BandMask {
    BandMask {
        values: tape.value(v).clone(),
        threshold: store.get(id).data()[0],
        direction: dir,
        temperature: tau,
    }
}

/// `ψ(s) ⊙ s` on a `[n_freq, dim]` spectrum.
pub fn psi_apply(store: &ParamStore, psi: &PsiFilter, s: &Spectrum) -> Result<Spectrum> {
    let mut tape = Tape::with_params(store);
    let v = spectrum_constants(&mut tape, s)?;
    let out = psi_filter(&mut tape, psi, v, v)?;
    spectrum_of(&tape, out, s.n_time)
}

/// Applies the block to `tokens[z, dim]`.
pub fn afb_forward(
    store: &ParamStore,
    p: &AfbParams,
    tokens: &Tensor,
) -> Result<(Tensor, LayerActivations)> {
    let (z, d) = match *tokens.shape() {
        [z, d] if z >= 1 => (z, d),
        ref s => return shape_err(format!("expected [tokens, dim], got {s:?}")),
    };
    let mut tape = Tape::with_params(store);
    let x = tape.constant(tokens.clone().reshape(vec![1, z, d])?);
    let tr = afb_tape(&mut tape, p, x)?;
    let spec = |v| spectrum_of(&tape, v, z);
    let output = tape.value(tr.output).clone().reshape(vec![z, d])?;
    let acts = LayerActivations {
        spectrum: Some(spec(tr.spectrum)?),
        mask_high: Some(mask_of(&tape, tr.mask_high, store, p.theta_high, MaskDirection::KeepBelow, p.tau)),
        mask_low: Some(mask_of(&tape, tr.mask_low, store, p.theta_low, MaskDirection::KeepAbove, p.tau)),
        filtered_high: Some(spec(tr.filtered_high)?),
        filtered_low: Some(spec(tr.filtered_low)?),
        global: Some(spec(tr.global)?),
        local_high: tr.local_high.map(spec).transpose()?,
        local_low: tr.local_low.map(spec).transpose()?,
        integrated: Some(spec(tr.integrated)?),
        afb_output: Some(output.clone()),
        ..LayerActivations::default()
    };
    Ok((output, acts))
}
