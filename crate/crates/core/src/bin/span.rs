//! Command-line front end over `span::runner`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use span::runner::{self, RunConfig};

#[derive(Parser)]
#[command(name = "span", version, about = "Spatial-prior attention pretraining and evaluation")]
struct Cli {
    /// JSON run config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set distill.lr=1e-4`. Repeatable;
    /// goes before the subcommand.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or reload) the synthetic corpus.
    GenData,
    /// Build the template set named by `span.kind`.
    BuildTemplates,
    /// Pretrain, resuming from the run's last complete epoch.
    Pretrain,
    /// Attention mAP and pointing game on the probe test split.
    EvalAttn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear probe AUC on frozen teacher features.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Probe AUC over balanced labelled subsets.
    LowData {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Grid search over the two regularisation strengths.
    SweepLambda,
    /// Both terms against inclusion-only and exclusion-only training.
    AblateCollapse,
    /// Per-head attention maps as PGM images.
    ExportMaps {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> span::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg = cfg.with_override(o)?;
    }
    cfg.validate()?;
    match cli.command {
        Command::GenData => {
            let (dir, corpus) = runner::cmd_gen_data(&cfg)?;
            println!("corpus: {} samples in {}", corpus.samples.len(), dir.display());
        }
        Command::BuildTemplates => {
            let (dir, set) = runner::cmd_build_templates(&cfg)?;
            println!("templates: {} in {}", set.len(), dir.display());
        }
        Command::Pretrain => {
            let dir = runner::cmd_pretrain(&cfg, |epoch, recs| {
                let n = recs.len().max(1) as f64;
                let mean = |f: fn(&span::distill::StepRecord) -> f64| recs.iter().map(f).sum::<f64>() / n;
                eprintln!("epoch {:>3}  dino {:.5}  span {:+.6}", epoch + 1, mean(|r| r.dino_loss), mean(|r| r.span_loss));
            })?;
            println!("run: {}", dir.display());
        }
        Command::EvalAttn { checkpoint } => {
            let r = runner::cmd_eval_attn(&cfg, checkpoint.as_deref())?;
            println!("mAP ({}): {:.4}", r.result.policy.as_str(), r.result.map());
            println!("mAP (max_over_heads): {:.4}", r.max_over_heads.map());
            println!("top-mass fraction: {:.4}", r.concentration);
        }
        Command::Probe { checkpoint } => {
            let r = runner::cmd_probe(&cfg, checkpoint.as_deref())?;
            println!("probe AUC: {:.4}", r.mean_auc);
        }
        Command::LowData { checkpoint } => {
            let t = runner::cmd_low_data(&cfg, checkpoint.as_deref())?;
            for (size, mean, sd) in t.summary() {
                println!("size {size:>3}: AUC {mean:.4} +- {sd:.4}");
            }
        }
        Command::SweepLambda => {
            let r = runner::cmd_sweep_lambda(&cfg)?;
            for row in &r.rows {
                println!("incl {:e} excl {:e}: {:.4}", row.lambda_incl, row.lambda_excl, row.mean);
            }
            println!("best: incl {:e} excl {:e}", r.best.0, r.best.1);
        }
        Command::AblateCollapse => {
            for row in runner::cmd_ablate_collapse(&cfg)? {
                println!("{:<15} mAP {:.4}  top-mass {:.4}", row.variant, row.map_assigned, row.concentration);
            }
        }
        Command::ExportMaps { checkpoint, out } => {
            let dir = runner::cmd_export_maps(&cfg, checkpoint.as_deref(), out.as_deref())?;
            println!("maps: {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
