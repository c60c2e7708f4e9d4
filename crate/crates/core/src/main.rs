use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bootmae::commands::{cmd_ablate_inject, cmd_ablate_mask, cmd_finetune, cmd_mask_viz, cmd_pretrain, cmd_probe};
use bootmae::config::RunConfig;
use bootmae::model::Tap;
use bootmae::{Error, Result};

#[derive(Parser)]
#[command(name = "bootmae", version, about = "Bootstrapped masked autoencoder pretraining for tiny ViTs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain encoder and decoders; writes metrics, checkpoints and a gallery.
    Pretrain(Common),
    /// Fine-tune a pretrained encoder with a classification head.
    Finetune(Common),
    /// Train a linear head on frozen pooled encoder features.
    Probe(Common),
    /// Draw random and block masks and compare their connectivity.
    MaskViz(Common),
    /// Pixel or feature targets crossed with random or block masking.
    AblateMask(Common),
    /// Regressor injection level crossed with predictor injection level.
    AblateInject(Common),
    /// List every configuration key with its default.
    Keys,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs of the command's own training loop.
    #[arg(long)]
    epochs: Option<usize>,
    /// random or block.
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// on, off, or the regressor's level: low, mid or high.
    #[arg(long)]
    inject: Option<String>,
    #[arg(long)]
    ema_fraction: Option<f64>,
    /// Pretraining checkpoint for finetune and probe.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Checkpoint of the same command to continue from.
    #[arg(long)]
    resume: Option<String>,
    /// Any configuration key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Replace artifacts left by an earlier run in --out.
    #[arg(long)]
    overwrite: bool,
}

enum Kind {
    Pretrain,
    Finetune,
    Probe,
    Other,
}

impl Common {
    fn resolve(&self, kind: Kind) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(self.set.iter().map(String::as_str))?;
        let mut flags: Vec<(&str, String)> = Vec::new();
        if let Some(s) = self.seed {
            flags.push(("seed", s.to_string()));
        }
        if let Some(e) = self.epochs {
            let key = match kind {
                Kind::Finetune => "ft_epochs",
                Kind::Probe => "probe_epochs",
                Kind::Pretrain | Kind::Other => "epochs",
            };
            flags.push((key, e.to_string()));
        }
        if let Some(m) = &self.mask {
            flags.push(("mask", m.clone()));
        }
        if let Some(l) = self.lambda {
            flags.push(("lambda", l.to_string()));
        }
        if let Some(f) = self.ema_fraction {
            flags.push(("ema_fraction", f.to_string()));
        }
        if let Some(c) = &self.checkpoint {
            flags.push(("checkpoint", c.clone()));
        }
        if let Some(r) = &self.resume {
            flags.push(("resume", r.clone()));
        }
        match self.inject.as_deref() {
            None => {}
            Some("on") => flags.extend([("reg_tap", "low".into()), ("pred_tap", "high".into())]),
            Some("off") => flags.extend([("reg_tap", "off".into()), ("pred_tap", "off".into())]),
            Some(level) => flags.push(("reg_tap", level.parse::<Tap>()?.to_string())),
        }
        for (k, v) in flags {
            cfg.set(k, &v)?;
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::Numeric(_) => 5,
        Error::Budget(_) => 6,
        Error::Tensor(_) | Error::Contract(_) => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => {
            let s = cmd_pretrain(&a.resolve(Kind::Pretrain)?, &a.out, a.overwrite)?;
            let (r, p, l) = s.final_losses;
            println!("pretrained {} epochs: L_R {r:.4}  L_P {p:.4}  L {l:.4}", s.epochs);
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Finetune(a) => {
            let top1 = cmd_finetune(&a.resolve(Kind::Finetune)?, &a.out, a.overwrite)?;
            println!("finetune test top-1 {top1:.4}");
        }
        Command::Probe(a) => {
            let top1 = cmd_probe(&a.resolve(Kind::Probe)?, &a.out, a.overwrite)?;
            println!("linear probe test top-1 {top1:.4}");
        }
        Command::MaskViz(a) => {
            for s in cmd_mask_viz(&a.resolve(Kind::Other)?, &a.out, a.overwrite)? {
                println!(
                    "{}: mean masked {:.2}, mean largest component {:.2}",
                    s.strategy, s.mean_masked, s.mean_largest_component
                );
            }
        }
        Command::AblateMask(a) => {
            for c in cmd_ablate_mask(&a.resolve(Kind::Other)?, &a.out, a.overwrite)? {
                println!("{}: L {:.4} in {:.1}s", c.label, c.losses.2, c.seconds);
            }
        }
        Command::AblateInject(a) => {
            let mut cfg = a.resolve(Kind::Other)?;
            // A level passed to --inject selects one regressor row of the grid.
            let rows: Vec<Tap> = match a.inject.as_deref() {
                Some("low" | "mid" | "high") => cfg.reg_tap.0.into_iter().collect(),
                _ => Vec::new(),
            };
            if rows.is_empty() {
                cfg.reg_tap = RunConfig::default().reg_tap;
            }
            for c in cmd_ablate_inject(&cfg, &rows, &a.out, a.overwrite)? {
                println!("{}: L {:.4} in {:.1}s", c.label, c.losses.2, c.seconds);
            }
        }
        Command::Keys => {
            let defaults = RunConfig::default();
            for (k, doc) in RunConfig::KEYS {
                println!("{k}={}\t#{doc}", defaults.get(k).unwrap_or_default());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
