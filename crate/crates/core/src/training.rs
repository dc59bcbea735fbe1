//! Losses, patch masking, and the two training stages: masked-patch
//! reconstruction pretraining and label-smoothed fine-tuning.
//!
//! Both stages run AdamW over shuffled mini-batches and keep a snapshot of
//! the best epoch: lowest reconstruction loss when pretraining, highest
//! validation accuracy when fine-tuning. Without an explicit validation set,
//! fine-tuning holds out a stratified `val_fraction` of the training data.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{AdamWConfig, AdamWState, Tape};
use crate::data::SeriesDataset;
use crate::error::{Error, Result};
use crate::metrics::accuracy_and_macro_f1;
use crate::model::{FaimConfig, FaimModel, ModelMeta};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const TAG_PRETRAIN_ORDER: u64 = 0x5054;
const TAG_PRETRAIN_MASK: u64 = 0x4d41;
const TAG_FINETUNE_ORDER: u64 = 0x4654;
const TAG_VAL_SPLIT: u64 = 0x5641;

/// Which patches are hidden: `lambda[c, z]` is 1 for a masked patch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub lambda: Tensor,
    pub ratio: f64,
    pub seed: u64,
}

/// Masks exactly `round(ratio · Z)` patches in every channel, chosen by a
/// seeded shuffle per channel.
pub fn make_mask(channels: usize, z: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let n_masked = (ratio * z as f64).round() as usize;
    let mut lambda = Tensor::zeros(vec![channels, z]);
    for c in 0..channels {
        let mut order: Vec<usize> = (0..z).collect();
        Rng::derived(seed, &[c as u64]).shuffle(&mut order);
        for &i in &order[..n_masked] {
            lambda.set(&[c, i], 1.0);
        }
    }
    Ok(MaskPlan { lambda, ratio, seed })
}

/// Mask-weighted mean of per-patch mean squared errors; 0 if nothing is
/// masked. Patches are the rows of the last axis.
pub fn masked_mse(x_true: &Tensor, x_hat: &Tensor, lambda: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let pred = tape.constant(x_hat.clone());
    let loss = tape.masked_mse(pred, x_true.data(), lambda)?;
    tape.value(loss).item()
}

/// `(1 − eps)·onehot(y) + eps/k`.
pub fn smooth_targets(y: usize, k: usize, eps: f64) -> Result<Vec<f64>> {
    if y >= k {
        return Err(Error::Input(format!("label {y} out of range for {k} classes")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing must lie in [0, 1), got {eps}")));
    }
    let mut t = vec![eps / k as f64; k];
    t[y] += 1.0 - eps;
    Ok(t)
}

/// Cross-entropy of `logits[k]` against smoothed targets for class `y`.
pub fn label_smoothed_ce(logits: &Tensor, y: usize, eps: f64) -> Result<f64> {
    let k = logits.numel();
    let targets = smooth_targets(y, k, eps)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone().reshape(vec![1, k])?);
    let loss = tape.cross_entropy(l, &targets)?;
    tape.value(loss).item()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// One line of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `pretrain`, `train` or `val`.
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub epochs: usize,
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based); 0 when no epoch ran.
    pub best_epoch: usize,
    /// Lowest pretraining loss or highest validation accuracy.
    pub best_value: f64,
    pub warnings: Vec<String>,
}

pub const REPORT_HEADER: &str = "epoch,split,loss,accuracy,macro_f1,seconds";

impl TrainReport {
    /// Losses of the records with the given split, in epoch order.
    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }

    /// CSV rows without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:?},{},{},{:?}",
                r.epoch,
                r.split,
                r.loss,
                opt(r.accuracy),
                opt(r.macro_f1),
                r.seconds
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}", self.csv_rows())
    }
}

/// Options that affect reporting but not the learned parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Record wall-clock seconds per epoch. Off by default so that reports of
    /// identical runs are byte-identical.
    pub timing: bool,
}

/// Model metadata for a dataset. Normalization stats are copied when the
/// dataset carries them.
pub fn meta_for(ds: &SeriesDataset) -> ModelMeta {
    ModelMeta {
        n_channels: ds.n_channels,
        n_classes: ds.n_classes,
        series_len: ds.series_len,
        z_max: 0,
        label_names: ds.label_names.clone(),
        norm_mean: ds.norm.as_ref().map(|n| n.mean.clone()).unwrap_or_default(),
        norm_std: ds.norm.as_ref().map(|n| n.std.clone()).unwrap_or_default(),
    }
}

fn optimizer(config: &FaimConfig, model: &FaimModel) -> AdamWState {
    AdamWState::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        model.store.values(),
    )
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    order
}

fn seconds_since(start: Instant, opts: TrainOptions) -> f64 {
    if opts.timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

fn check_compatible(model: &FaimModel, ds: &SeriesDataset) -> Result<()> {
    if model.meta.n_channels != ds.n_channels {
        return Err(Error::Input(format!(
            "model expects {} channels, dataset has {}",
            model.meta.n_channels, ds.n_channels
        )));
    }
    Ok(())
}

/// Masked-patch reconstruction on `ds`. Starts from `init` or a fresh model
/// built from `config`; returns the parameters of the lowest-loss epoch.
pub fn pretrain(
    ds: &SeriesDataset,
    init: Option<FaimModel>,
    config: &FaimConfig,
    opts: TrainOptions,
) -> Result<(FaimModel, TrainReport)> {
    if ds.is_empty() {
        return Err(Error::Input("pretraining needs at least one sample".into()));
    }
    config.validate()?;
    let mut model = match init {
        Some(m) => m,
        None => FaimModel::new(config.clone(), meta_for(ds))?,
    };
    check_compatible(&model, ds)?;
    let mut opt = optimizer(config, &model);
    let c = ds.n_channels;
    let mut report = TrainReport {
        stage: Stage::Pretrain,
        epochs: config.pretrain_epochs,
        records: Vec::new(),
        best_epoch: 0,
        best_value: f64::INFINITY,
        warnings: Vec::new(),
    };
    let mut best = model.store.clone();

    for epoch in 1..=config.pretrain_epochs {
        let start = Instant::now();
        let order = shuffled(ds.len(), derive_seed(config.seed, &[TAG_PRETRAIN_ORDER, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let series: Vec<&Tensor> = batch.iter().map(|&i| &ds.samples[i].series).collect();
            let patches = model.stack_patches(&series)?;
            let z = patches.shape()[1];
            let mut lambda = Vec::with_capacity(batch.len() * c * z);
            for &i in batch {
                let seed = derive_seed(config.seed, &[TAG_PRETRAIN_MASK, epoch as u64, i as u64]);
                lambda.extend_from_slice(make_mask(c, z, config.mask_ratio, seed)?.lambda.data());
            }
            let mut tape = Tape::with_params(&model.store);
            let recon = model.recon_tape(&mut tape, &patches, &lambda)?;
            let loss = tape.masked_mse(recon, patches.data(), &lambda)?;
            let value = tape.value(loss).item()?;
            let grads = tape.backward(loss)?.params(&model.store);
            opt.step(model.store.values_mut(), &grads)?;
            total += value * batch.len() as f64;
        }
        let loss = total / ds.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Contract(format!("pretraining loss became {loss} in epoch {epoch}")));
        }
        report.records.push(EpochRecord {
            epoch,
            split: "pretrain".into(),
            loss,
            accuracy: None,
            macro_f1: None,
            seconds: seconds_since(start, opts),
        });
        if loss < report.best_value {
            report.best_value = loss;
            report.best_epoch = epoch;
            best = model.store.clone();
        }
    }
    model.store = best;
    Ok((model, report))
}

/// Loss, accuracy, macro-F1 and predictions of `model` on `ds`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub predictions: Vec<usize>,
}

/// Scores `model` on `ds`; the loss uses the model's label smoothing.
pub fn evaluate(model: &FaimModel, ds: &SeriesDataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    check_compatible(model, ds)?;
    let k = model.meta.n_classes;
    if ds.n_classes > k {
        return Err(Error::Input(format!(
            "dataset has {} classes, model was trained for {k}",
            ds.n_classes
        )));
    }
    let (preds, logits) = model.predict(&ds.series())?;
    let labels = ds.labels();
    let mut loss = 0.0;
    for (row, &y) in logits.iter().zip(&labels) {
        loss += label_smoothed_ce(&Tensor::from_vec(row.clone()), y, model.config.label_smooth)?;
    }
    let (accuracy, macro_f1) = accuracy_and_macro_f1(&preds, &labels, k)?;
    Ok(Evaluation {
        loss: loss / ds.len() as f64,
        accuracy,
        macro_f1,
        predictions: preds,
    })
}

/// Supervised training with label-smoothed cross-entropy.
///
/// The model starts from `init` (for example a pretrained one) or fresh from
/// `config`; training hyperparameters always come from `config`. Validation
/// uses `val` if given, otherwise a stratified `val_fraction` hold-out of
/// `train`. The kept epoch has the highest validation accuracy, ties going to
/// the lower validation loss. With no validation data the last epoch is kept.
pub fn finetune(
    train: &SeriesDataset,
    val: Option<&SeriesDataset>,
    init: Option<FaimModel>,
    config: &FaimConfig,
    opts: TrainOptions,
) -> Result<(FaimModel, TrainReport)> {
    config.validate()?;
    let (fit, held_out);
    let val = match val {
        Some(v) => {
            fit = train.clone();
            Some(v)
        }
        None if config.val_fraction > 0.0 => {
            let (a, b) = train.split_stratified(config.val_fraction, derive_seed(config.seed, &[TAG_VAL_SPLIT]));
            fit = a;
            held_out = b;
            (!held_out.is_empty()).then_some(&held_out)
        }
        None => {
            fit = train.clone();
            None
        }
    };
    if fit.is_empty() {
        return Err(Error::Input("fine-tuning needs at least one labeled sample".into()));
    }
    let mut model = match init {
        Some(m) => m,
        None => FaimModel::new(config.clone(), meta_for(train))?,
    };
    check_compatible(&model, &fit)?;
    let k = model.meta.n_classes;
    if train.n_classes > k {
        return Err(Error::Input(format!(
            "dataset has {} classes, model head has {k}",
            train.n_classes
        )));
    }
    // Training hyperparameters follow the caller's config.
    model.config.label_smooth = config.label_smooth;
    model.config.batch_size = config.batch_size;

    let mut report = TrainReport {
        stage: Stage::Finetune,
        epochs: config.finetune_epochs,
        records: Vec::new(),
        best_epoch: 0,
        best_value: f64::NEG_INFINITY,
        warnings: Vec::new(),
    };
    for (class, &n) in fit.class_counts().iter().enumerate() {
        if n == 0 {
            let w = format!("class `{}` has no training samples", fit.label_names[class]);
            log::warn!("{w}");
            report.warnings.push(w);
        }
    }

    let mut opt = optimizer(config, &model);
    let mut best = model.store.clone();
    let mut best_val_loss = f64::INFINITY;
    for epoch in 1..=config.finetune_epochs {
        let start = Instant::now();
        let order = shuffled(fit.len(), derive_seed(config.seed, &[TAG_FINETUNE_ORDER, epoch as u64]));
        let mut total = 0.0;
        let mut preds = Vec::with_capacity(fit.len());
        let mut labels = Vec::with_capacity(fit.len());
        for batch in order.chunks(config.batch_size) {
            let series: Vec<&Tensor> = batch.iter().map(|&i| &fit.samples[i].series).collect();
            let patches = model.stack_patches(&series)?;
            let mut targets = Vec::with_capacity(batch.len() * k);
            for &i in batch {
                let y = fit.samples[i].label;
                targets.extend(smooth_targets(y, k, config.label_smooth)?);
                labels.push(y);
            }
            let mut tape = Tape::with_params(&model.store);
            let logits = model.logits_tape(&mut tape, &patches)?;
            preds.extend(tape.value(logits).data().chunks(k).map(crate::model::argmax));
            let loss = tape.cross_entropy(logits, &targets)?;
            let value = tape.value(loss).item()?;
            let grads = tape.backward(loss)?.params(&model.store);
            opt.step(model.store.values_mut(), &grads)?;
            total += value * batch.len() as f64;
        }
        let loss = total / fit.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Contract(format!("fine-tuning loss became {loss} in epoch {epoch}")));
        }
        let (acc, f1) = accuracy_and_macro_f1(&preds, &labels, k)?;
        report.records.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss,
            accuracy: Some(acc),
            macro_f1: Some(f1),
            seconds: seconds_since(start, opts),
        });
        match val {
            Some(v) => {
                let e = evaluate(&model, v)?;
                report.records.push(EpochRecord {
                    epoch,
                    split: "val".into(),
                    loss: e.loss,
                    accuracy: Some(e.accuracy),
                    macro_f1: Some(e.macro_f1),
                    seconds: seconds_since(start, opts),
                });
                let better = e.accuracy > report.best_value
                    || (e.accuracy == report.best_value && e.loss < best_val_loss);
                if better {
                    best_val_loss = e.loss;
                    report.best_value = e.accuracy;
                    report.best_epoch = epoch;
                    best = model.store.clone();
                }
            }
            None => {
                report.best_value = acc;
                report.best_epoch = epoch;
                best = model.store.clone();
            }
        }
    }
    if report.best_epoch == 0 {
        report.best_value = 0.0;
    }
    model.store = best;
    Ok((model, report))
}
