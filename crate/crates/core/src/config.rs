//! Run configuration: flat `key=value` text with dotted keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.variant=no_afb
//! afb.tau=0.02
//! train.finetune_epochs=100
//! ```
//!
//! Every key has a default. Settings are resolved in order: defaults, then
//! the config file, then `--key value` flags. The fully resolved set can be
//! written back out with [`Settings::echo`] and read again with
//! [`Settings::parse_text`].

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{FaimConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    Bool,
    Text,
    Variant,
    FloatList,
    VariantList,
}

struct Key {
    name: &'static str,
    kind: Kind,
    help: &'static str,
}

const fn key(name: &'static str, kind: Kind, help: &'static str) -> Key {
    Key { name, kind, help }
}

const KEYS: &[Key] = &[
    key("model.variant", Kind::Variant, "architecture variant"),
    key("patch.len", Kind::Uint, "patch length b"),
    key("patch.stride", Kind::Uint, "patch stride"),
    key("model.embed_dim", Kind::Uint, "token width"),
    key("model.layers", Kind::Uint, "number of layers"),
    key("afb.theta_high", Kind::Float, "initial high-band threshold (cycles/token)"),
    key("afb.theta_low", Kind::Float, "initial low-band threshold (cycles/token)"),
    key("afb.tau", Kind::Float, "mask temperature"),
    key("afb.psi_hidden", Kind::Uint, "filter MLP width, 0 = token width"),
    key("afb.literal_eq10", Kind::Bool, "pair the high-band filter with the low band"),
    key("imb.state", Kind::Uint, "SSM state size"),
    key("imb.k1", Kind::Uint, "branch 1 conv width"),
    key("imb.k2", Kind::Uint, "branch 2 conv width"),
    key("imb.k3", Kind::Uint, "fusion conv width"),
    key("imb.concat_fusion", Kind::Bool, "fuse branches by concatenation"),
    key("imb.share_in_proj", Kind::Bool, "share the input projection"),
    key("train.mask_ratio", Kind::Float, "fraction of patches masked in pretraining"),
    key("train.label_smooth", Kind::Float, "label smoothing"),
    key("train.lr", Kind::Float, "learning rate"),
    key("train.weight_decay", Kind::Float, "AdamW weight decay"),
    key("train.pretrain_epochs", Kind::Uint, "pretraining epochs"),
    key("train.finetune_epochs", Kind::Uint, "fine-tuning epochs"),
    key("train.batch_size", Kind::Uint, "mini-batch size (1..=256)"),
    key("train.val_fraction", Kind::Float, "validation hold-out when no validation file is given"),
    key("train.seed", Kind::Uint, "seed for initialization, shuffling and masking"),
    key("data.train", Kind::Text, "training file (.tsv/.csv univariate, .jsonl multivariate)"),
    key("data.val", Kind::Text, "optional validation file"),
    key("data.test", Kind::Text, "test file"),
    key("data.normalize", Kind::Bool, "z-normalize with training statistics"),
    key("init.checkpoint", Kind::Text, "checkpoint to start fine-tuning from"),
    key("eval.checkpoint", Kind::Text, "checkpoint to evaluate (default: the run's own)"),
    key("noise.sigmas", Kind::FloatList, "noise levels for noise-bench"),
    key("noise.seed", Kind::Uint, "noise seed"),
    key("ablate.variants", Kind::VariantList, "variants trained by ablate"),
    key("synth.n_per_class", Kind::Uint, "samples per class in each split"),
    key("synth.length", Kind::Uint, "series length"),
    key("synth.freqs", Kind::FloatList, "cycles per series, one per class"),
    key("synth.snr_sigma", Kind::Float, "additive noise std"),
    key("synth.seed", Kind::Uint, "corpus seed"),
    key("run.dir", Kind::Text, "parent of run directories"),
    key("run.name", Kind::Text, "run directory name (default: derived from the time)"),
    key("report.timing", Kind::Bool, "record wall-clock seconds in report.csv"),
];

/// Short flag names accepted by the command line in addition to full keys.
pub const ALIASES: &[(&str, &str)] = &[
    ("variant", "model.variant"),
    ("sigmas", "noise.sigmas"),
    ("seed", "train.seed"),
    ("train", "data.train"),
    ("test", "data.test"),
    ("checkpoint", "eval.checkpoint"),
    ("name", "run.name"),
];

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn defaults() -> BTreeMap<&'static str, String> {
    let c = FaimConfig::default();
    let all = Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(",");
    let pairs: Vec<(&str, String)> = vec![
        ("model.variant", c.variant.name().into()),
        ("patch.len", c.patch_len.to_string()),
        ("patch.stride", c.patch_stride.to_string()),
        ("model.embed_dim", c.embed_dim.to_string()),
        ("model.layers", c.n_layers.to_string()),
        ("afb.theta_high", format!("{:?}", c.theta_high)),
        ("afb.theta_low", format!("{:?}", c.theta_low)),
        ("afb.tau", format!("{:?}", c.tau)),
        ("afb.psi_hidden", c.psi_hidden.to_string()),
        ("afb.literal_eq10", c.literal_eq10.to_string()),
        ("imb.state", c.ssm_state.to_string()),
        ("imb.k1", c.conv_k1.to_string()),
        ("imb.k2", c.conv_k2.to_string()),
        ("imb.k3", c.conv_k3.to_string()),
        ("imb.concat_fusion", c.concat_fusion.to_string()),
        ("imb.share_in_proj", c.share_in_proj.to_string()),
        ("train.mask_ratio", format!("{:?}", c.mask_ratio)),
        ("train.label_smooth", format!("{:?}", c.label_smooth)),
        ("train.lr", format!("{:?}", c.lr)),
        ("train.weight_decay", format!("{:?}", c.weight_decay)),
        ("train.pretrain_epochs", c.pretrain_epochs.to_string()),
        ("train.finetune_epochs", c.finetune_epochs.to_string()),
        ("train.batch_size", c.batch_size.to_string()),
        ("train.val_fraction", format!("{:?}", c.val_fraction)),
        ("train.seed", c.seed.to_string()),
        ("data.train", String::new()),
        ("data.val", String::new()),
        ("data.test", String::new()),
        ("data.normalize", "true".into()),
        ("init.checkpoint", String::new()),
        ("eval.checkpoint", String::new()),
        ("noise.sigmas", "0.0,0.2,0.5,1.0".into()),
        ("noise.seed", "0".into()),
        ("ablate.variants", all),
        ("synth.n_per_class", "100".into()),
        ("synth.length", "128".into()),
        ("synth.freqs", "3.0,12.0".into()),
        ("synth.snr_sigma", "0.5".into()),
        ("synth.seed", "0".into()),
        ("run.dir", "run".into()),
        ("run.name", String::new()),
        ("report.timing", "false".into()),
    ];
    pairs.into_iter().collect()
}

fn find_key(name: &str) -> Result<&'static Key> {
    KEYS.iter().find(|k| k.name == name).ok_or_else(|| {
        let valid: Vec<&str> = KEYS.iter().map(|k| k.name).collect();
        Error::Config(format!("unknown key `{name}`; valid keys: {}", valid.join(", ")))
    })
}

/// Checks `raw` against the key's type and returns its canonical spelling.
fn canonical(k: &Key, raw: &str) -> Result<String> {
    let raw = raw.trim();
    let bad = |what: &str| Error::Config(format!("`{}` expects {what}, got `{raw}`", k.name));
    let floats = |s: &str| -> Result<Vec<f64>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad("comma-separated numbers")))
            .collect()
    };
    Ok(match k.kind {
        Kind::Uint => raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.to_string(),
        Kind::Float => {
            let v = raw.parse::<f64>().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("a finite number"));
            }
            format!("{v:?}")
        }
        Kind::Bool => raw.parse::<bool>().map_err(|_| bad("true or false"))?.to_string(),
        Kind::Text => raw.to_string(),
        Kind::Variant => raw.parse::<Variant>()?.name().to_string(),
        Kind::FloatList => fmt_list(&floats(raw)?),
        Kind::VariantList => raw
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<Variant>().map(|v| v.name()))
            .collect::<Result<Vec<_>>>()?
            .join(","),
    })
}

/// Resolved key/value settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { values: defaults() }
    }
}

impl Settings {
    /// Sets one key; `name` may be a full key or an alias.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let full = ALIASES.iter().find(|(a, _)| *a == name).map_or(name, |(_, k)| *k);
        let k = find_key(full)?;
        self.values.insert(k.name, canonical(k, value)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).map_or("", String::as_str)
    }

    /// Applies config-file text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                column: 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Settings> {
        let mut s = Settings::default();
        s.apply_text(text)?;
        Ok(s)
    }

    /// Every key in table order as `key=value` lines.
    pub fn echo(&self) -> String {
        KEYS.iter().map(|k| format!("{}={}\n", k.name, self.get(k.name))).collect()
    }

    /// Key names with help text, for `--help` style listings.
    pub fn describe() -> Vec<(&'static str, &'static str)> {
        KEYS.iter().map(|k| (k.name, k.help)).collect()
    }

    fn uint(&self, name: &str) -> usize {
        self.get(name).parse().expect("validated on set")
    }

    fn float(&self, name: &str) -> f64 {
        self.get(name).parse().expect("validated on set")
    }

    fn flag(&self, name: &str) -> bool {
        self.get(name) == "true"
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        let v = self.get(name);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn floats(&self, name: &str) -> Vec<f64> {
        let v = self.get(name);
        if v.is_empty() {
            return Vec::new();
        }
        v.split(',').map(|p| p.parse().expect("validated on set")).collect()
    }

    pub fn variants(&self, name: &str) -> Vec<Variant> {
        self.get(name)
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().expect("validated on set"))
            .collect()
    }

    pub fn seed(&self, name: &str) -> u64 {
        self.get(name).parse().expect("validated on set")
    }

    pub fn timing(&self) -> bool {
        self.flag("report.timing")
    }

    pub fn normalize(&self) -> bool {
        self.flag("data.normalize")
    }

    pub fn uint_value(&self, name: &str) -> usize {
        self.uint(name)
    }

    pub fn float_value(&self, name: &str) -> f64 {
        self.float(name)
    }

    /// Model and training hyperparameters.
    pub fn model_config(&self) -> Result<FaimConfig> {
        let c = FaimConfig {
            patch_len: self.uint("patch.len"),
            patch_stride: self.uint("patch.stride"),
            embed_dim: self.uint("model.embed_dim"),
            n_layers: self.uint("model.layers"),
            ssm_state: self.uint("imb.state"),
            conv_k1: self.uint("imb.k1"),
            conv_k2: self.uint("imb.k2"),
            conv_k3: self.uint("imb.k3"),
            psi_hidden: self.uint("afb.psi_hidden"),
            theta_high: self.float("afb.theta_high"),
            theta_low: self.float("afb.theta_low"),
            tau: self.float("afb.tau"),
            literal_eq10: self.flag("afb.literal_eq10"),
            concat_fusion: self.flag("imb.concat_fusion"),
            share_in_proj: self.flag("imb.share_in_proj"),
            variant: self.get("model.variant").parse()?,
            mask_ratio: self.float("train.mask_ratio"),
            label_smooth: self.float("train.label_smooth"),
            lr: self.float("train.lr"),
            weight_decay: self.float("train.weight_decay"),
            pretrain_epochs: self.uint("train.pretrain_epochs"),
            finetune_epochs: self.uint("train.finetune_epochs"),
            batch_size: self.uint("train.batch_size"),
            val_fraction: self.float("train.val_fraction"),
            seed: self.seed("train.seed"),
        };
        c.validate()?;
        Ok(c)
    }
}
