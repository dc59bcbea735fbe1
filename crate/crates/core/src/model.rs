//! Full classifier: patch embedding, a stack of (filter block → Mamba block
//! → residual layer norm) layers, and two heads.
//!
//! Channels are processed independently with shared weights. A batch of `B`
//! samples with `C` channels is laid out as `B·C` sequences (sample-major,
//! channel-minor) of `Z` patch tokens. Pooling first averages tokens within
//! each sequence, then averages the channels of a sample, so the pooled
//! feature of a sample does not depend on what else is in the batch.
//!
//! # Checkpoint format
//!
//! A checkpoint is UTF-8 text. The first line is the magic string `FAIM1`;
//! the rest is one JSON object:
//!
//! ```text
//! FAIM1
//! {"config": {...}, "meta": {...}, "params": [{"name": .., "shape": [..], "data": [..]}, ..]}
//! ```
//!
//! `config` is a [`FaimConfig`] (which includes the seed), `meta` a
//! [`ModelMeta`]. Parameters appear in construction order. Loading rebuilds
//! the architecture from `config` and `meta` and then assigns every
//! parameter by name, so a checkpoint with missing, extra or reshaped
//! parameters is rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::afb::{self, AfbOptions, AfbParams, LayerActivations};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::rng::{derive_seed, Rng};
use crate::ssm::{self, ImbOptions, ImbParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "FAIM1";
pub const MAX_BATCH: usize = 256;

/// Architecture switches for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAfb,
    NoHf,
    NoLf,
    NoHfLf,
    NoImb,
    /// Same network as `Full`; the training driver skips pretraining.
    NoPretrain,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoAfb,
        Variant::NoHf,
        Variant::NoLf,
        Variant::NoHfLf,
        Variant::NoImb,
        Variant::NoPretrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAfb => "no_afb",
            Variant::NoHf => "no_hf",
            Variant::NoLf => "no_lf",
            Variant::NoHfLf => "no_hf_lf",
            Variant::NoImb => "no_imb",
            Variant::NoPretrain => "no_pretrain",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "FAIM",
            Variant::NoAfb => "w/o AFB",
            Variant::NoHf => "w/o HF",
            Variant::NoLf => "w/o LF",
            Variant::NoHfLf => "w/o HF+LF",
            Variant::NoImb => "w/o IMB",
            Variant::NoPretrain => "w/o Pretrain",
        }
    }

    pub fn has_afb(self) -> bool {
        self != Variant::NoAfb
    }

    pub fn has_imb(self) -> bool {
        self != Variant::NoImb
    }

    pub fn uses_pretraining(self) -> bool {
        self != Variant::NoPretrain
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Hyperparameters of the model and of both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaimConfig {
    pub patch_len: usize,
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub ssm_state: usize,
    pub conv_k1: usize,
    pub conv_k2: usize,
    pub conv_k3: usize,
    /// Hidden width of each spectral filter MLP; 0 means `embed_dim`.
    pub psi_hidden: usize,
    pub theta_high: f64,
    pub theta_low: f64,
    pub tau: f64,
    pub literal_eq10: bool,
    pub concat_fusion: bool,
    pub share_in_proj: bool,
    pub variant: Variant,
    pub mask_ratio: f64,
    pub label_smooth: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    /// Fraction of the training split held out for model selection when no
    /// validation set is given.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for FaimConfig {
    fn default() -> Self {
        FaimConfig {
            patch_len: 8,
            patch_stride: 8,
            embed_dim: 64,
            n_layers: 2,
            ssm_state: ssm::DEFAULT_STATE,
            conv_k1: 2,
            conv_k2: 4,
            conv_k3: 1,
            psi_hidden: 0,
            theta_high: afb::DEFAULT_THETA_HIGH,
            theta_low: afb::DEFAULT_THETA_LOW,
            tau: afb::DEFAULT_TAU,
            literal_eq10: false,
            concat_fusion: false,
            share_in_proj: false,
            variant: Variant::Full,
            mask_ratio: 0.4,
            label_smooth: 0.1,
            lr: 1e-3,
            weight_decay: 1e-4,
            pretrain_epochs: 100,
            finetune_epochs: 300,
            batch_size: 32,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl FaimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_len < 1 || self.patch_stride < 1 {
            return fail("patch length and stride must be at least 1");
        }
        if self.embed_dim < 1 || self.n_layers < 1 || self.ssm_state < 1 {
            return fail("embed_dim, n_layers and ssm_state must be at least 1");
        }
        if self.conv_k1 < 1 || self.conv_k2 < 1 || self.conv_k3 < 1 {
            return fail("convolution kernel lengths must be at least 1");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail("mask_ratio must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smooth) {
            return fail("label smoothing must lie in [0, 1)");
        }
        if !(self.tau > 0.0) {
            return fail("mask temperature must be positive");
        }
        if self.batch_size < 1 || self.batch_size > MAX_BATCH {
            return fail("batch_size must lie in [1, 256]");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Data-dependent facts a trained model needs at inference time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub n_channels: usize,
    pub n_classes: usize,
    /// Series length seen in training.
    pub series_len: usize,
    /// Size of the positional table.
    pub z_max: usize,
    pub label_names: Vec<String>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

/// Series length after right-padding so the last patch is complete.
pub fn padded_len(t: usize, b: usize, stride: usize) -> usize {
    if t <= b {
        b
    } else {
        b + (t - b).div_ceil(stride) * stride
    }
}

pub fn n_patches(t: usize, b: usize, stride: usize) -> usize {
    (padded_len(t, b, stride) - b) / stride + 1
}

/// Splits `x[channels, T]` into `[channels, Z, b]` patches, padding the
/// right end by repeating the last value.
pub fn patchify(x: &Tensor, b: usize, stride: usize) -> Result<Tensor> {
    let (c, t) = match *x.shape() {
        [c, t] => (c, t),
        ref s => return Err(Error::Input(format!("series must be [channels, T], got {s:?}"))),
    };
    if t < 1 {
        return Err(Error::Input("series must have at least one time point".into()));
    }
    if b < 1 || stride < 1 {
        return Err(Error::Config("patch length and stride must be at least 1".into()));
    }
    let z = n_patches(t, b, stride);
    let mut out = Vec::with_capacity(c * z * b);
    for ch in 0..c {
        let row = x.row(ch);
        for p in 0..z {
            for i in 0..b {
                out.push(row[(p * stride + i).min(t - 1)]);
            }
        }
    }
    Tensor::new(vec![c, z, b], out)
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub afb: Option<AfbParams>,
    pub imb: Option<ImbParams>,
    pub ln: LayerNorm,
}

/// Per-channel intermediates: `layers[l][c]`.
#[derive(Clone, Debug, Default)]
pub struct Activations {
    pub layers: Vec<Vec<LayerActivations>>,
    pub pooled: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct FaimModel {
    pub config: FaimConfig,
    pub meta: ModelMeta,
    pub store: ParamStore,
    pub embed: Linear,
    pub pos_emb: ParamId,
    pub mask_token: ParamId,
    pub layers: Vec<Layer>,
    pub cls_head: Linear,
    pub recon_head: Linear,
}

/// Tape handles for one layer.
struct LayerTrace {
    afb: Option<afb::AfbTrace>,
    imb: Option<ssm::ImbTrace>,
    output: Var,
}

impl FaimModel {
    /// Builds a freshly initialized model. `meta.z_max` is derived from
    /// `meta.series_len` when zero.
    pub fn new(config: FaimConfig, mut meta: ModelMeta) -> Result<Self> {
        config.validate()?;
        if meta.n_channels < 1 || meta.n_classes < 1 || meta.series_len < 1 {
            return Err(Error::Input(
                "model needs at least one channel, one class and one time point".into(),
            ));
        }
        if meta.z_max == 0 {
            meta.z_max = n_patches(meta.series_len, config.patch_len, config.patch_stride);
        }
        let mut rng = Rng::new(derive_seed(config.seed, &[0x1417]));
        let mut store = ParamStore::new();
        let (b, d) = (config.patch_len, config.embed_dim);
        let embed = Linear::init(&mut store, "embed", b, d, &mut rng);
        let pos_emb = store.add("pos_emb", Tensor::randn(vec![meta.z_max, d], 0.02, &mut rng));
        let mask_token = store.add("mask_token", Tensor::zeros(vec![b]));
        let v = config.variant;
        let afb_opts = AfbOptions {
            hidden: (config.psi_hidden > 0).then_some(config.psi_hidden),
            theta_high: config.theta_high,
            theta_low: config.theta_low,
            tau: config.tau,
            literal_eq10: config.literal_eq10,
            use_high: !matches!(v, Variant::NoHf | Variant::NoHfLf),
            use_low: !matches!(v, Variant::NoLf | Variant::NoHfLf),
        };
        let imb_opts = ImbOptions {
            state: config.ssm_state,
            k1: config.conv_k1,
            k2: config.conv_k2,
            k3: config.conv_k3,
            concat_fusion: config.concat_fusion,
            share_in_proj: config.share_in_proj,
        };
        let layers = (0..config.n_layers)
            .map(|l| Layer {
                afb: v
                    .has_afb()
                    .then(|| AfbParams::init(&mut store, &format!("layer{l}.afb"), d, &afb_opts, &mut rng)),
                imb: v
                    .has_imb()
                    .then(|| ImbParams::init(&mut store, &format!("layer{l}.imb"), d, &imb_opts, &mut rng)),
                ln: LayerNorm::init(&mut store, &format!("layer{l}.ln"), d),
            })
            .collect();
        let cls_head = Linear::init(&mut store, "cls_head", d, meta.n_classes, &mut rng);
        let recon_head = Linear::init(&mut store, "recon_head", d, b, &mut rng);
        Ok(FaimModel {
            config,
            meta,
            store,
            embed,
            pos_emb,
            mask_token,
            layers,
            cls_head,
            recon_head,
        })
    }

    pub fn n_params(&self) -> usize {
        self.store.numel()
    }

    /// Patches for a list of `[channels, T]` samples, stacked as
    /// `[samples·channels, Z, b]`.
    pub fn stack_patches(&self, samples: &[&Tensor]) -> Result<Tensor> {
        let (b, s) = (self.config.patch_len, self.config.patch_stride);
        let mut data = Vec::new();
        let mut z_seen = None;
        for (i, x) in samples.iter().enumerate() {
            let c = x.shape().first().copied().unwrap_or(0);
            if x.ndim() != 2 || c != self.meta.n_channels {
                return Err(Error::Input(format!(
                    "sample {i} has shape {:?}; the model expects {} channels",
                    x.shape(),
                    self.meta.n_channels
                )));
            }
            let p = patchify(x, b, s)?;
            let z = p.shape()[1];
            if z > self.meta.z_max {
                return Err(Error::Config(format!(
                    "sample {i} yields {z} patches but the positional table holds {}",
                    self.meta.z_max
                )));
            }
            if *z_seen.get_or_insert(z) != z {
                return Err(Error::Input(format!("sample {i} has a different length")));
            }
            data.extend_from_slice(p.data());
        }
        let z = z_seen.ok_or_else(|| Error::Input("empty batch".into()))?;
        Tensor::new(vec![samples.len() * self.meta.n_channels, z, b], data)
    }

    /// Patch embedding plus positions for `patches[seqs, Z, b]`.
    pub fn embed_tape(&self, tape: &mut Tape, patches: Var) -> Result<Var> {
        let e = self.embed.forward(tape, patches)?;
        let pos = tape.param(self.pos_emb);
        tape.add_positional(e, pos)
    }

    fn layers_tape(&self, tape: &mut Tape, mut tokens: Var) -> Result<Vec<LayerTrace>> {
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let afb = layer.afb.as_ref().map(|p| afb::afb_tape(tape, p, tokens)).transpose()?;
            let u = afb.as_ref().map_or(tokens, |t| t.output);
            let imb = layer.imb.as_ref().map(|p| ssm::imb_tape(tape, p, u)).transpose()?;
            let v = imb.as_ref().map_or(u, |t| t.output);
            let r = tape.add(v, tokens)?;
            tokens = layer.ln.forward(tape, r)?;
            traces.push(LayerTrace {
                afb,
                imb,
                output: tokens,
            });
        }
        Ok(traces)
    }

    /// Shared trunk: optional masking, embedding and the layer stack.
    /// `mask` holds one entry per (sequence, patch); nonzero entries are
    /// replaced by the mask token before embedding.
    pub fn trunk_tape(&self, tape: &mut Tape, patches: &Tensor, mask: Option<&[f64]>) -> Result<Var> {
        let x = tape.constant(patches.clone());
        let x = match mask {
            Some(m) => {
                let tok = tape.param(self.mask_token);
                tape.mask_replace(x, tok, m)?
            }
            None => x,
        };
        let tokens = self.embed_tape(tape, x)?;
        let traces = self.layers_tape(tape, tokens)?;
        Ok(traces.last().map_or(tokens, |t| t.output))
    }

    /// Mean over tokens, then over the channels of each sample.
    pub fn pool_tape(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let per_seq = tape.mean_axis1(tokens)?;
        let seqs = tape.shape(per_seq)[0];
        let c = self.meta.n_channels;
        let d = self.config.embed_dim;
        let grouped = tape.reshape(per_seq, &[seqs / c, c, d])?;
        tape.mean_axis1(grouped)
    }

    /// Class logits `[samples, n_classes]` for stacked patches.
    pub fn logits_tape(&self, tape: &mut Tape, patches: &Tensor) -> Result<Var> {
        let tokens = self.trunk_tape(tape, patches, None)?;
        let pooled = self.pool_tape(tape, tokens)?;
        self.cls_head.forward(tape, pooled)
    }

    /// Reconstructed patches `[seqs, Z, b]` from masked input.
    pub fn recon_tape(&self, tape: &mut Tape, patches: &Tensor, mask: &[f64]) -> Result<Var> {
        let tokens = self.trunk_tape(tape, patches, Some(mask))?;
        self.recon_head.forward(tape, tokens)
    }

    /// Logits for one sample `x[channels, T]` plus per-layer intermediates.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Activations)> {
        let patches = self.stack_patches(&[x])?;
        let (c, z) = (patches.shape()[0], patches.shape()[1]);
        let mut tape = Tape::with_params(&self.store);
        let input = tape.constant(patches);
        let tokens = self.embed_tape(&mut tape, input)?;
        let traces = self.layers_tape(&mut tape, tokens)?;
        let last = traces.last().map_or(tokens, |t| t.output);
        let pooled = self.pool_tape(&mut tape, last)?;
        let logits = self.cls_head.forward(&mut tape, pooled)?;

        let mut acts = Activations {
            layers: Vec::new(),
            pooled: Some(tape.value(pooled).clone().reshape(vec![self.config.embed_dim])?),
        };
        for (tr, layer) in traces.iter().zip(&self.layers) {
            let mut per_channel = Vec::with_capacity(c);
            for ch in 0..c {
                per_channel.push(channel_activations(&tape, tr, layer, &self.store, ch, z)?);
            }
            acts.layers.push(per_channel);
        }
        let logits = tape.value(logits).clone().reshape(vec![self.meta.n_classes])?;
        Ok((logits, acts))
    }

    /// Reconstruction of every patch of `x[channels, T]`; `lambda` marks
    /// masked patches, one entry per (channel, patch).
    pub fn reconstruct(&self, x: &Tensor, lambda: &[f64]) -> Result<Tensor> {
        let patches = self.stack_patches(&[x])?;
        let mut tape = Tape::with_params(&self.store);
        let y = self.recon_tape(&mut tape, &patches, lambda)?;
        Ok(tape.value(y).clone())
    }

    /// Class predictions and logits for many samples, evaluated in chunks.
    pub fn predict(&self, samples: &[&Tensor]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let mut preds = Vec::with_capacity(samples.len());
        let mut all = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.batch_size.max(1)) {
            let patches = self.stack_patches(chunk)?;
            let mut tape = Tape::with_params(&self.store);
            let logits = self.logits_tape(&mut tape, &patches)?;
            for row in tape.value(logits).data().chunks(self.meta.n_classes) {
                preds.push(argmax(row));
                all.push(row.to_vec());
            }
        }
        Ok((preds, all))
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let params = self
            .store
            .names()
            .iter()
            .zip(self.store.values())
            .map(|(name, t)| StoredParam {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let body = Checkpoint {
            config: self.config.clone(),
            meta: self.meta.clone(),
            params,
        };
        Ok(format!("{CHECKPOINT_MAGIC}\n{}\n", serde_json::to_string(&body)?))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let body = text
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|rest| rest.strip_prefix('\n'))
            .ok_or_else(|| Error::Input(format!("not a checkpoint: missing `{CHECKPOINT_MAGIC}` header")))?;
        let ck: Checkpoint = serde_json::from_str(body)?;
        let mut model = FaimModel::new(ck.config, ck.meta)?;
        if ck.params.len() != model.store.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} parameters, architecture needs {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        for p in ck.params {
            let t = Tensor::new(p.shape, p.data)?;
            model
                .store
                .assign(&p.name, t)
                .map_err(|e| Error::Input(format!("checkpoint parameter `{}`: {e}", p.name)))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Input(format!("checkpoint {} not found", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_checkpoint_str(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: FaimConfig,
    meta: ModelMeta,
    params: Vec<StoredParam>,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row `ch` of a `[seqs, a, b]` tape value as an `[a, b]` tensor.
fn channel_slice(tape: &Tape, v: Var, ch: usize) -> Result<Tensor> {
    let t = tape.value(v);
    let inner: usize = t.shape()[1..].iter().product();
    Tensor::new(t.shape()[1..].to_vec(), t.data()[ch * inner..(ch + 1) * inner].to_vec())
}

fn channel_spectrum(tape: &Tape, v: (Var, Var), ch: usize, n_time: usize) -> Result<crate::spectral::Spectrum> {
    let bins = crate::tensor::CTensor::from_parts(&channel_slice(tape, v.0, ch)?, &channel_slice(tape, v.1, ch)?)?;
    Ok(crate::spectral::Spectrum { bins, n_time })
}

fn channel_activations(
    tape: &Tape,
    tr: &LayerTrace,
    layer: &Layer,
    store: &ParamStore,
    ch: usize,
    z: usize,
) -> Result<LayerActivations> {
    use crate::spectral::{BandMask, MaskDirection};
    let mut a = LayerActivations::default();
    if let (Some(t), Some(p)) = (&tr.afb, &layer.afb) {
        let spec = |v| channel_spectrum(tape, v, ch, z);
        let mask = |v: Var, id: ParamId, direction| BandMask {
            values: tape.value(v).clone(),
            threshold: store.get(id).data()[0],
            direction,
            temperature: p.tau,
        };
        a.spectrum = Some(spec(t.spectrum)?);
        a.mask_high = Some(mask(t.mask_high, p.theta_high, MaskDirection::KeepBelow));
        a.mask_low = Some(mask(t.mask_low, p.theta_low, MaskDirection::KeepAbove));
        a.filtered_high = Some(spec(t.filtered_high)?);
        a.filtered_low = Some(spec(t.filtered_low)?);
        a.global = Some(spec(t.global)?);
        a.local_high = t.local_high.map(spec).transpose()?;
        a.local_low = t.local_low.map(spec).transpose()?;
        a.integrated = Some(spec(t.integrated)?);
        a.afb_output = Some(channel_slice(tape, t.output, ch)?);
    }
    if let Some(t) = &tr.imb {
        a.imb_branch_1 = Some(channel_slice(tape, t.h1, ch)?);
        a.imb_branch_2 = Some(channel_slice(tape, t.h2, ch)?);
        a.imb_output = Some(channel_slice(tape, t.output, ch)?);
    }
    a.layer_output = Some(channel_slice(tape, tr.output, ch)?);
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param_grad_check;

    fn small_config() -> FaimConfig {
        FaimConfig {
            patch_len: 4,
            patch_stride: 4,
            embed_dim: 6,
            n_layers: 1,
            ssm_state: 3,
            ..FaimConfig::default()
        }
    }

    fn meta(c: usize, k: usize, t: usize) -> ModelMeta {
        ModelMeta {
            n_channels: c,
            n_classes: k,
            series_len: t,
            ..ModelMeta::default()
        }
    }

    #[test]
    fn patchify_examples() {
        let x = Tensor::new(vec![1, 16], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&x, 8, 8).unwrap();
        assert_eq!(p.shape(), &[1, 2, 8]);
        assert_eq!(p.data(), x.data());

        let x = Tensor::new(vec![1, 10], (0..10).map(f64::from).collect()).unwrap();
        let p = patchify(&x, 8, 8).unwrap();
        assert_eq!(p.shape(), &[1, 2, 8]);
        let expect: Vec<f64> = (0..16).map(|i| f64::from(i.min(9))).collect();
        assert_eq!(p.data(), expect.as_slice());

        let x = Tensor::new(vec![2, 5], (0..10).map(f64::from).collect()).unwrap();
        let p = patchify(&x, 1, 1).unwrap();
        assert_eq!(p.shape(), &[2, 5, 1]);
        assert_eq!(p.data(), x.data());

        assert!(patchify(&Tensor::zeros(vec![1, 0]), 4, 4).is_err());
    }

    #[test]
    fn overlapping_patches_cover_the_series() {
        assert_eq!(n_patches(10, 4, 2), 4);
        let x = Tensor::new(vec![1, 10], (0..10).map(f64::from).collect()).unwrap();
        let p = patchify(&x, 4, 2).unwrap();
        assert_eq!(&p.data()[12..16], &[6.0, 7.0, 8.0, 9.0]);
    }

    fn embed_eager(m: &FaimModel, x: &Tensor) -> Tensor {
        let patches = m.stack_patches(&[x]).unwrap();
        let mut tape = Tape::with_params(&m.store);
        let p = tape.constant(patches);
        let e = m.embed_tape(&mut tape, p).unwrap();
        tape.value(e).clone()
    }

    #[test]
    fn embedding_examples() {
        let mut m = FaimModel::new(small_config(), meta(1, 2, 8)).unwrap();
        // Zero patches and positions leave only the bias.
        m.store.get_mut(m.pos_emb).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let bias: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
        m.store.get_mut(m.embed.b).data_mut().copy_from_slice(&bias);
        let e = embed_eager(&m, &Tensor::zeros(vec![1, 8]));
        for row in e.data().chunks(6) {
            assert_eq!(row, bias.as_slice());
        }

        // Identical patches differ by the position rows.
        let m = FaimModel::new(small_config(), meta(1, 2, 8)).unwrap();
        let x = Tensor::new(vec![1, 8], vec![1.0, -2.0, 0.5, 3.0, 1.0, -2.0, 0.5, 3.0]).unwrap();
        let e = embed_eager(&m, &x);
        let pos = m.store.get(m.pos_emb);
        for c in 0..6 {
            let diff = e.data()[6 + c] - e.data()[c];
            let want = pos.get(&[1, c]) - pos.get(&[0, c]);
            assert!((diff - want).abs() < 1e-14);
        }

        // Matrix oracle.
        let w = m.store.get(m.embed.w);
        let b = m.store.get(m.embed.b).data();
        for z in 0..2 {
            for c in 0..6 {
                let v: f64 = (0..4).map(|i| x.data()[z * 4 + i] * w.get(&[i, c])).sum::<f64>()
                    + b[c]
                    + pos.get(&[z, c]);
                assert!((e.data()[z * 6 + c] - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn too_many_patches_is_config_error() {
        let m = FaimModel::new(small_config(), meta(1, 2, 8)).unwrap();
        let err = m.forward(&Tensor::zeros(vec![1, 16])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = m.forward(&Tensor::zeros(vec![2, 8])).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn single_class_head_shape() {
        let m = FaimModel::new(small_config(), meta(3, 1, 12)).unwrap();
        let mut rng = Rng::new(1);
        let (logits, acts) = m.forward(&Tensor::randn(vec![3, 12], 1.0, &mut rng)).unwrap();
        assert_eq!(logits.shape(), &[1]);
        assert_eq!(acts.layers.len(), 1);
        assert_eq!(acts.layers[0].len(), 3);
    }

    #[test]
    fn channel_permutation_invariance() {
        let m = FaimModel::new(small_config(), meta(3, 4, 12)).unwrap();
        let mut rng = Rng::new(2);
        let x = Tensor::randn(vec![3, 12], 1.0, &mut rng);
        let mut perm = Vec::new();
        for ch in [2, 0, 1] {
            perm.extend_from_slice(x.row(ch));
        }
        let xp = Tensor::new(vec![3, 12], perm).unwrap();
        let (a, _) = m.forward(&x).unwrap();
        let (b, _) = m.forward(&xp).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn channels_one_at_a_time_equal_batch() {
        let cfg = small_config();
        let m = FaimModel::new(cfg.clone(), meta(3, 2, 12)).unwrap();
        let single = FaimModel {
            meta: ModelMeta {
                n_channels: 1,
                ..m.meta.clone()
            },
            ..m.clone()
        };
        let mut rng = Rng::new(3);
        let x = Tensor::randn(vec![3, 12], 1.0, &mut rng);
        let (_, acts) = m.forward(&x).unwrap();
        let mut sum = vec![0.0; cfg.embed_dim];
        for ch in 0..3 {
            let xc = Tensor::new(vec![1, 12], x.row(ch).to_vec()).unwrap();
            let (_, a) = single.forward(&xc).unwrap();
            for (s, v) in sum.iter_mut().zip(a.pooled.unwrap().data()) {
                *s += v;
            }
        }
        let avg: Vec<f64> = sum.iter().map(|s| s * (1.0 / 3.0)).collect();
        assert_eq!(acts.pooled.unwrap().data(), avg.as_slice());
    }

    #[test]
    fn batch_composition_does_not_change_predictions() {
        let m = FaimModel::new(small_config(), meta(2, 3, 12)).unwrap();
        let mut rng = Rng::new(4);
        let xs: Vec<Tensor> = (0..5).map(|_| Tensor::randn(vec![2, 12], 1.0, &mut rng)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let (_, together) = m.predict(&refs).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let (alone, _) = m.forward(x).unwrap();
            assert_eq!(alone.data(), together[i].as_slice());
        }
    }

    #[test]
    fn fixed_seed_gives_identical_logits() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(vec![2, 12], 1.0, &mut rng);
        let a = FaimModel::new(small_config(), meta(2, 3, 12)).unwrap().forward(&x).unwrap().0;
        let b = FaimModel::new(small_config(), meta(2, 3, 12)).unwrap().forward(&x).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_blocks_reduce_layer_to_normalization() {
        let mut m = FaimModel::new(small_config(), meta(1, 2, 12)).unwrap();
        let mut zero_ids = Vec::new();
        for layer in &m.layers {
            let a = layer.afb.as_ref().unwrap();
            for psi in [&a.psi_global, &a.psi_high_local, &a.psi_low_local] {
                zero_ids.extend([psi.w1, psi.b1, psi.w2, psi.b2]);
            }
            let i = layer.imb.as_ref().unwrap();
            zero_ids.extend([i.out_proj.w, i.out_proj.b]);
        }
        for id in zero_ids {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = Rng::new(6);
        let x = Tensor::randn(vec![1, 12], 1.0, &mut rng);
        let (_, acts) = m.forward(&x).unwrap();
        let e = embed_eager(&m, &x).reshape(vec![3, 6]).unwrap();
        let ln = &m.layers[0].ln;
        let want = crate::nn::layer_norm(&e, m.store.get(ln.gamma), m.store.get(ln.beta), ln.eps).unwrap();
        let got = acts.layers[0][0].layer_output.as_ref().unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn every_variant_builds_and_runs() {
        let mut rng = Rng::new(7);
        let x = Tensor::randn(vec![2, 12], 1.0, &mut rng);
        for v in Variant::ALL {
            let cfg = FaimConfig {
                variant: v,
                ..small_config()
            };
            let m = FaimModel::new(cfg, meta(2, 3, 12)).unwrap();
            let (logits, acts) = m.forward(&x).unwrap();
            assert_eq!(logits.shape(), &[3]);
            let a = &acts.layers[0][0];
            assert_eq!(a.spectrum.is_some(), v.has_afb(), "{v}");
            assert_eq!(a.imb_output.is_some(), v.has_imb(), "{v}");
            if v.has_afb() {
                let has_high = !matches!(v, Variant::NoHf | Variant::NoHfLf);
                let has_low = !matches!(v, Variant::NoLf | Variant::NoHfLf);
                assert_eq!(a.local_high.is_some(), has_high, "{v}");
                assert_eq!(a.local_low.is_some(), has_low, "{v}");
            }
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn reconstruction_shapes_and_mask_token() {
        let m = FaimModel::new(small_config(), meta(2, 3, 12)).unwrap();
        let mut rng = Rng::new(8);
        let x = Tensor::randn(vec![2, 12], 1.0, &mut rng);
        let lambda = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let y = m.reconstruct(&x, &lambda).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4]);

        // A single fully masked patch depends only on mask token and position.
        let one = FaimModel::new(
            FaimConfig {
                patch_len: 4,
                ..small_config()
            },
            meta(1, 2, 4),
        )
        .unwrap();
        let a = one.reconstruct(&Tensor::randn(vec![1, 4], 1.0, &mut rng), &[1.0]).unwrap();
        let b = one.reconstruct(&Tensor::randn(vec![1, 4], 1.0, &mut rng), &[1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = FaimModel::new(small_config(), meta(2, 3, 12)).unwrap();
        m.meta.label_names = vec!["a".into(), "b".into(), "c".into()];
        m.meta.norm_mean = vec![0.1, -1.0 / 3.0];
        m.meta.norm_std = vec![1.5, 2.0];
        let mut rng = Rng::new(9);
        for t in m.store.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.normal() * 1e-3);
        }
        let text = m.to_checkpoint_string().unwrap();
        assert!(text.starts_with("FAIM1\n"));
        let back = FaimModel::from_checkpoint_str(&text).unwrap();
        assert!(back.store == m.store, "parameters differ after reload");
        assert_eq!(back.meta, m.meta);
        assert_eq!(back.config, m.config);
        assert_eq!(back.to_checkpoint_string().unwrap(), text);

        assert!(FaimModel::from_checkpoint_str("FAIM0\n{}").is_err());
        let truncated = text.replacen("\"layer0.ln.beta\"", "\"layer0.ln.other\"", 1);
        assert!(FaimModel::from_checkpoint_str(&truncated).is_err());
    }

    #[test]
    fn full_model_gradients() {
        let cfg = FaimConfig {
            patch_len: 2,
            patch_stride: 2,
            embed_dim: 3,
            ssm_state: 2,
            theta_high: 0.3,
            theta_low: 0.1,
            ..small_config()
        };
        let mut m = FaimModel::new(cfg, meta(2, 3, 32)).unwrap();
        let mut rng = Rng::new(10);
        // Move the scan away from its near-silent initialization (tiny steps,
        // small B/C) so its gradients sit well above finite-difference noise.
        let imb = m.layers[0].imb.clone().unwrap();
        for s in [&imb.branch_1.ssm, &imb.branch_2.ssm] {
            m.store.get_mut(s.delta_bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
            for id in [s.w_delta, s.w_b, s.w_c] {
                m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.normal());
            }
        }
        let x = Tensor::randn(vec![2, 32], 1.0, &mut rng);
        let patches = m.stack_patches(&[&x]).unwrap();
        assert_eq!(patches.shape(), &[2, 16, 2]);
        let w = Tensor::randn(vec![1, 3], 1.0, &mut rng);
        let readout = |t: &mut Tape| {
            let l = m.logits_tape(t, &patches)?;
            let wv = t.constant(w.clone());
            let p = t.mul(l, wv)?;
            Ok(t.sum(p))
        };
        let layer = &m.layers[0];
        let a = layer.afb.as_ref().unwrap();
        let i = layer.imb.as_ref().unwrap();
        let ids = [
            a.theta_high,
            a.theta_low,
            i.branch_1.ssm.a_log,
            i.branch_2.ssm.w_delta,
            i.branch_1.ssm.delta_bias,
            m.embed.w,
            m.pos_emb,
            m.cls_head.w,
        ];
        for id in ids {
            let err = param_grad_check(&m.store, id, 1e-5, readout).unwrap();
            assert!(err < 1e-4, "{}: {err}", m.store.name(id));
        }
    }
}
