//! `faim`: train and evaluate frequency-aware interactive Mamba classifiers.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faim_core::config::{Settings, ALIASES};
use faim_core::runner::{self, Command};
use faim_core::{Error, Result};

#[derive(Parser)]
#[command(name = "faim", version, about = "Frequency-aware interactive Mamba for time-series classification")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Masked-patch reconstruction pretraining.
    Pretrain(RunArgs),
    /// Supervised training (from scratch or from `--init.checkpoint`).
    Finetune(RunArgs),
    /// Score a checkpoint on `--data.test`.
    Eval(RunArgs),
    /// Accuracy on the test set under increasing Gaussian noise.
    NoiseBench(RunArgs),
    /// Train and test each variant in `ablate.variants`.
    Ablate(RunArgs),
    /// Write the synthetic frequency corpus.
    Synth(RunArgs),
    /// List every configuration key.
    Keys,
}

#[derive(Args)]
struct RunArgs {
    /// Config file with key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Model variant (for `ablate`: comma-separated list of variants).
    #[arg(long)]
    variant: Option<String>,

    /// Comma-separated noise levels (alias of --noise.sigmas).
    #[arg(long)]
    sigmas: Option<String>,

    /// Further settings as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Error::Input(format!("expected --key value, got `{arg}`")));
        };
        match flag.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Input(format!("flag --{flag} needs a value")))?;
                out.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn resolve(cmd: Command, args: &RunArgs) -> Result<Settings> {
    let mut settings = Settings::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        settings.apply_text(&text)?;
    }
    if let Some(v) = &args.variant {
        let key = if cmd == Command::Ablate { "ablate.variants" } else { "model.variant" };
        settings.set(key, v)?;
    }
    if let Some(s) = &args.sigmas {
        settings.set("noise.sigmas", s)?;
    }
    for (k, v) in parse_overrides(&args.overrides)? {
        settings.set(&k, &v)?;
    }
    Ok(settings)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (cmd, args) = match cli.command {
        Cmd::Pretrain(a) => (Command::Pretrain, a),
        Cmd::Finetune(a) => (Command::Finetune, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::NoiseBench(a) => (Command::NoiseBench, a),
        Cmd::Ablate(a) => (Command::Ablate, a),
        Cmd::Synth(a) => (Command::Synth, a),
        Cmd::Keys => {
            for (k, help) in Settings::describe() {
                println!("{k:<24} {help}");
            }
            for (alias, k) in ALIASES {
                println!("--{alias:<22} alias of --{k}");
            }
            return ExitCode::SUCCESS;
        }
    };
    let result = resolve(cmd, &args).and_then(|s| runner::run(cmd, &s));
    let code = runner::exit_code(&result);
    match result {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(code as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_accept_both_spellings() {
        let raw: Vec<String> = ["--afb.tau", "0.1", "--train.lr=0.01"].iter().map(|s| s.to_string()).collect();
        let o = parse_overrides(&raw).unwrap();
        assert_eq!(o, vec![("afb.tau".into(), "0.1".into()), ("train.lr".into(), "0.01".into())]);
        assert!(parse_overrides(&["--afb.tau".to_string()]).is_err());
        assert!(parse_overrides(&["afb.tau".to_string()]).is_err());
    }

    #[test]
    fn cli_accepts_dotted_flags() {
        let cli = Cli::try_parse_from(["faim", "finetune", "--variant", "no_afb", "--afb.tau", "0.05", "--seed", "3"]).unwrap();
        let Cmd::Finetune(args) = cli.command else { panic!("wrong command") };
        let s = resolve(Command::Finetune, &args).unwrap();
        assert_eq!(s.get("model.variant"), "no_afb");
        assert_eq!(s.get("afb.tau"), "0.05");
        assert_eq!(s.get("train.seed"), "3");
    }

    #[test]
    fn ablate_variant_selects_the_variant_list() {
        let cli = Cli::try_parse_from(["faim", "ablate", "--variant", "no_afb"]).unwrap();
        let Cmd::Ablate(args) = cli.command else { panic!("wrong command") };
        let s = resolve(Command::Ablate, &args).unwrap();
        assert_eq!(s.get("ablate.variants"), "no_afb");
    }
}
