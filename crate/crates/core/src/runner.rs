//! Command orchestration behind the `faim` binary.
//!
//! Each command writes into `<run.dir>/<run.name>/`:
//!
//! | file | written by |
//! |------|------------|
//! | `config.echo` | every command: the fully resolved settings |
//! | `report.csv` | pretrain, finetune (`epoch,split,loss,accuracy,macro_f1,seconds`) |
//! | `summary.json` | every command |
//! | `checkpoint` | pretrain, finetune |
//! | `metrics.csv` | eval |
//! | `noise.csv` | noise-bench |
//! | `ablation.csv`, `<variant>/…` | ablate |
//! | `train.tsv`, `test.tsv` | synth |
//!
//! A `.lock` file guards the directory while a command runs. Re-running a
//! command with `--config <dir>/config.echo` reproduces its outputs byte for
//! byte (as long as `report.timing` is off).

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::config::Settings;
use crate::data::{self, SeriesDataset};
use crate::error::{Error, Result};
use crate::model::{FaimConfig, FaimModel, Variant};
use crate::rng::derive_seed;
use crate::training::{self, Evaluation, TrainOptions, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Finetune,
    Eval,
    NoiseBench,
    Ablate,
    Synth,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Pretrain,
        Command::Finetune,
        Command::Eval,
        Command::NoiseBench,
        Command::Ablate,
        Command::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::NoiseBench => "noise-bench",
            Command::Ablate => "ablate",
            Command::Synth => "synth",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown command `{s}`")))
    }
}

/// Process exit status for a command result: 0 success, 1 bad input or
/// configuration, 2 anything else.
pub fn exit_code<T>(result: &Result<T>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(e) if e.is_user_error() => 1,
        Err(_) => 2,
    }
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Input(format!(
                    "{} is in use by another command (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                )),
                _ => Error::Io(e),
            })?;
        Ok(DirLock(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Runs `cmd` and returns its output directory.
pub fn run(cmd: Command, settings: &Settings) -> Result<PathBuf> {
    let mut settings = settings.clone();
    if settings.get("run.name").is_empty() {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        settings.set("run.name", &format!("{}-{secs}", cmd.name()))?;
    }
    let dir = Path::new(settings.get("run.dir")).join(settings.get("run.name"));
    fs::create_dir_all(&dir)?;
    let _lock = DirLock::acquire(&dir)?;
    fs::write(dir.join("config.echo"), settings.echo())?;
    let ctx = Ctx { settings, dir: dir.clone() };
    let summary = match cmd {
        Command::Synth => ctx.synth()?,
        Command::Pretrain => ctx.pretrain()?,
        Command::Finetune => ctx.finetune()?,
        Command::Eval => ctx.eval()?,
        Command::NoiseBench => ctx.noise_bench()?,
        Command::Ablate => ctx.ablate()?,
    };
    let mut body = json!({ "command": cmd.name() });
    if let (Value::Object(dst), Value::Object(src)) = (&mut body, summary) {
        dst.extend(src);
    }
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(dir)
}

struct Splits {
    train: SeriesDataset,
    val: Option<SeriesDataset>,
    test: Option<SeriesDataset>,
}

struct Ctx {
    settings: Settings,
    dir: PathBuf,
}

fn require(settings: &Settings, key: &str) -> Result<PathBuf> {
    settings
        .path(key)
        .ok_or_else(|| Error::Config(format!("`{key}` must be set for this command")))
}

fn eval_json(e: &Evaluation) -> Value {
    json!({ "accuracy": e.accuracy, "macro_f1": e.macro_f1, "loss": e.loss })
}

fn report_json(r: &TrainReport) -> Value {
    json!({
        "epochs": r.epochs,
        "best_epoch": r.best_epoch,
        "best_value": r.best_value,
        "warnings": r.warnings,
    })
}

impl Ctx {
    fn config(&self) -> Result<FaimConfig> {
        self.settings.model_config()
    }

    fn opts(&self) -> TrainOptions {
        TrainOptions {
            timing: self.settings.timing(),
        }
    }

    /// Loads training data plus optional validation and test files, all
    /// normalized with training statistics when enabled.
    fn load_splits(&self) -> Result<Splits> {
        let mut train = data::load_any(&require(&self.settings, "data.train")?)?;
        let mut val = self.settings.path("data.val").map(|p| data::load_any(&p)).transpose()?;
        let mut test = self.settings.path("data.test").map(|p| data::load_any(&p)).transpose()?;
        for ds in val.iter_mut().chain(test.iter_mut()) {
            ds.align_labels(&train.label_names)?;
        }
        if self.settings.normalize() {
            let stats = train.fit_stats();
            train = train.normalized(&stats)?;
            for ds in val.iter_mut().chain(test.iter_mut()) {
                *ds = ds.normalized(&stats)?;
            }
        }
        Ok(Splits { train, val, test })
    }

    /// Loads an evaluation file and prepares it the way `model` was trained.
    fn load_for_model(&self, path: &Path, model: &FaimModel) -> Result<SeriesDataset> {
        let mut ds = data::load_any(path)?;
        ds.align_labels(&model.meta.label_names)?;
        if !model.meta.norm_mean.is_empty() {
            let stats = data::NormStats {
                mean: model.meta.norm_mean.clone(),
                std: model.meta.norm_std.clone(),
            };
            ds = ds.normalized(&stats)?;
        }
        Ok(ds)
    }

    fn write_report(&self, dir: &Path, reports: &[&TrainReport], test: Option<(usize, &Evaluation)>) -> Result<()> {
        let mut csv = format!("{}\n", training::REPORT_HEADER);
        for r in reports {
            csv.push_str(&r.csv_rows());
        }
        if let Some((epoch, e)) = test {
            let _ = writeln!(csv, "{epoch},test,{:?},{:?},{:?},0.0", e.loss, e.accuracy, e.macro_f1);
        }
        fs::write(dir.join("report.csv"), csv)?;
        Ok(())
    }

    fn synth(&self) -> Result<Value> {
        let s = &self.settings;
        let n = s.uint_value("synth.n_per_class");
        let t = s.uint_value("synth.length");
        let freqs = s.floats("synth.freqs");
        let sigma = s.float_value("synth.snr_sigma");
        let seed = s.seed("synth.seed");
        let train = data::make_synthetic_freq_dataset(n, t, &freqs, sigma, derive_seed(seed, &[1]))?;
        let test = data::make_synthetic_freq_dataset(n, t, &freqs, sigma, derive_seed(seed, &[2]))?;
        data::save_univariate(&train, &self.dir.join("train.tsv"))?;
        data::save_univariate(&test, &self.dir.join("test.tsv"))?;
        Ok(json!({ "train_samples": train.len(), "test_samples": test.len(), "classes": freqs.len() }))
    }

    fn pretrain(&self) -> Result<Value> {
        let cfg = self.config()?;
        let splits = self.load_splits()?;
        let (model, report) = training::pretrain(&splits.train, None, &cfg, self.opts())?;
        model.save(&self.dir.join("checkpoint"))?;
        self.write_report(&self.dir, &[&report], None)?;
        Ok(json!({ "stage": "pretrain", "n_params": model.n_params(), "pretrain": report_json(&report) }))
    }

    fn initial_model(&self) -> Result<Option<FaimModel>> {
        self.settings
            .path("init.checkpoint")
            .map(|p| FaimModel::load(&p))
            .transpose()
    }

    /// Pretrains (when the variant uses it and epochs are configured) and then
    /// fine-tunes; writes report, checkpoint and test metrics into `dir`.
    fn train_and_test(&self, cfg: &FaimConfig, splits: &Splits, init: Option<FaimModel>, dir: &Path) -> Result<Value> {
        let mut reports = Vec::new();
        let init = match init {
            Some(m) => Some(m),
            None if cfg.variant.uses_pretraining() && cfg.pretrain_epochs > 0 => {
                let (m, r) = training::pretrain(&splits.train, None, cfg, self.opts())?;
                reports.push(r);
                Some(m)
            }
            None => None,
        };
        let (model, ft) = training::finetune(&splits.train, splits.val.as_ref(), init, cfg, self.opts())?;
        let test = splits.test.as_ref().map(|t| training::evaluate(&model, t)).transpose()?;
        model.save(&dir.join("checkpoint"))?;
        reports.push(ft);
        let refs: Vec<&TrainReport> = reports.iter().collect();
        let best = reports.last().map_or(0, |r| r.best_epoch);
        self.write_report(dir, &refs, test.as_ref().map(|e| (best, e)))?;
        let mut out = json!({
            "variant": cfg.variant.name(),
            "label": cfg.variant.label(),
            "n_params": model.n_params(),
        });
        for r in &reports {
            let key = match r.stage {
                training::Stage::Pretrain => "pretrain",
                training::Stage::Finetune => "finetune",
            };
            out[key] = report_json(r);
        }
        if let Some(e) = &test {
            out["test"] = eval_json(e);
        }
        Ok(out)
    }

    fn finetune(&self) -> Result<Value> {
        let cfg = self.config()?;
        let splits = self.load_splits()?;
        let mut init = self.initial_model()?;
        if let Some(m) = &mut init {
            // The loaded architecture wins; its training settings are replaced.
            let arch = m.config.clone();
            m.config = FaimConfig { variant: arch.variant, ..cfg.clone() };
            m.config.patch_len = arch.patch_len;
            m.config.patch_stride = arch.patch_stride;
            m.config.embed_dim = arch.embed_dim;
            m.config.n_layers = arch.n_layers;
        }
        let cfg = FaimConfig { pretrain_epochs: 0, ..cfg };
        self.train_and_test(&cfg, &splits, init, &self.dir)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.settings.path("eval.checkpoint").unwrap_or_else(|| self.dir.join("checkpoint"))
    }

    fn eval(&self) -> Result<Value> {
        let path = self.checkpoint_path();
        if !path.exists() {
            return Err(Error::Input(format!("checkpoint {} not found", path.display())));
        }
        let model = FaimModel::load(&path)?;
        let test_path = require(&self.settings, "data.test")?;
        let test = self.load_for_model(&test_path, &model)?;
        let e = training::evaluate(&model, &test)?;
        let row = format!(
            "dataset,accuracy,macro_f1,loss,samples\n{},{:?},{:?},{:?},{}\n",
            test_path.display(),
            e.accuracy,
            e.macro_f1,
            e.loss,
            test.len()
        );
        fs::write(self.dir.join("metrics.csv"), row)?;
        Ok(json!({ "checkpoint": path.display().to_string(), "test": eval_json(&e) }))
    }

    fn noise_bench(&self) -> Result<Value> {
        let cfg = self.config()?;
        let (model, test) = match self.settings.path("eval.checkpoint") {
            Some(p) => {
                let model = FaimModel::load(&p)?;
                let test = self.load_for_model(&require(&self.settings, "data.test")?, &model)?;
                (model, test)
            }
            None => {
                let splits = self.load_splits()?;
                let test = splits
                    .test
                    .clone()
                    .ok_or_else(|| Error::Config("`data.test` must be set for this command".into()))?;
                let (model, _) = training::finetune(&splits.train, splits.val.as_ref(), None, &cfg, self.opts())?;
                (model, test)
            }
        };
        let seed = self.settings.seed("noise.seed");
        let mut csv = String::from("sigma,accuracy,macro_f1\n");
        let mut rows = Vec::new();
        for &sigma in &self.settings.floats("noise.sigmas") {
            let noisy = data::add_gaussian_noise(&test, sigma, seed)?;
            let e = training::evaluate(&model, &noisy)?;
            let _ = writeln!(csv, "{sigma:?},{:?},{:?}", e.accuracy, e.macro_f1);
            rows.push(json!({ "sigma": sigma, "accuracy": e.accuracy, "macro_f1": e.macro_f1 }));
        }
        fs::write(self.dir.join("noise.csv"), csv)?;
        Ok(json!({ "variant": model.config.variant.name(), "rows": rows }))
    }

    fn ablate(&self) -> Result<Value> {
        let base = self.config()?;
        let splits = self.load_splits()?;
        let variants: Vec<Variant> = self.settings.variants("ablate.variants");
        if variants.is_empty() {
            return Err(Error::Config("`ablate.variants` is empty".into()));
        }
        let mut csv = String::from("variant,label,accuracy,macro_f1\n");
        let mut results = Vec::new();
        for v in variants {
            let cfg = FaimConfig { variant: v, ..base.clone() };
            let sub = self.dir.join(v.name());
            fs::create_dir_all(&sub)?;
            let out = self.train_and_test(&cfg, &splits, None, &sub)?;
            let (acc, f1) = match out.get("test") {
                Some(t) => (t["accuracy"].as_f64(), t["macro_f1"].as_f64()),
                None => (None, None),
            };
            let fmt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(csv, "{},{},{},{}", v.name(), v.label(), fmt(acc), fmt(f1));
            results.push(out);
        }
        fs::write(self.dir.join("ablation.csv"), csv)?;
        Ok(json!({ "variants": results }))
    }
}
