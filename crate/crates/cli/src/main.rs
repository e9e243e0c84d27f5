use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mutflow::dataio::CropMode;
use mutflow::pretrain::Objectives;
use mutflow::workflow::{self, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "mutflow", version, about = "Interaction pre-training and ΔΔG prediction for protein complexes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the interaction encoder (contrastive + distance-map objectives).
    PretrainPpi(Common),
    /// Pre-train the sidechain encoder with the χ-angle flow.
    PretrainSim(Common),
    /// Fine-tune the ΔΔG model with 3-fold cross-validation.
    Finetune(Common),
    /// Score predictions or run a fine-tuned model on a mutation table.
    Evaluate(Common),
    /// Rank candidate mutations by predicted ΔΔG.
    Rank(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Comma-separated subset of pim,bim,sim.
    #[arg(long)]
    objectives: Option<Objectives>,
    /// Use the plain (non-antisymmetric) prediction head.
    #[arg(long)]
    no_antisym: bool,
    #[arg(long, value_parser = ["uniform", "interface"])]
    crop: Option<String>,
    /// Upper clamp on distance-map targets (Å).
    #[arg(long)]
    clamp: Option<f64>,
    /// Train the pre-trained encoders during fine-tuning.
    #[arg(long)]
    unfreeze: bool,
}

impl Common {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        let crop = self.crop.as_deref().map(str::parse::<CropMode>).transpose()?;
        cfg.apply(&Overrides {
            seed: self.seed,
            iters: self.iters,
            objectives: self.objectives,
            no_antisym: self.no_antisym,
            crop,
            clamp: self.clamp,
            unfreeze: self.unfreeze,
        })?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = workflow::configure_threads()? {
        log::info!("using {n} worker threads");
    }
    match cli.command {
        Command::PretrainPpi(c) => {
            let s = workflow::cmd_pretrain_ppi(&c.config()?).context("interaction pre-training failed")?;
            println!("checkpoint {} (best validation loss {:.6})", s.checkpoint.display(), s.best_validation);
        }
        Command::PretrainSim(c) => {
            let s = workflow::cmd_pretrain_sim(&c.config()?).context("sidechain pre-training failed")?;
            println!("checkpoint {} (best validation NLL {:.6})", s.checkpoint.display(), s.best_validation);
        }
        Command::Finetune(c) => {
            let s = workflow::cmd_finetune(&c.config()?).context("fine-tuning failed")?;
            print_reports(&s.reports);
        }
        Command::Evaluate(c) => {
            let s = workflow::cmd_evaluate(&c.config()?).context("evaluation failed")?;
            print_reports(&s.reports);
        }
        Command::Rank(c) => {
            let rows = workflow::cmd_rank(&c.config()?).context("ranking failed")?;
            for r in rows.iter().filter(|r| r.target) {
                println!("{}\trank {}/{}\tratio {:.4}", r.mutations, r.rank, rows.len(), r.ratio);
            }
        }
    }
    Ok(())
}

fn print_reports(reports: &[mutflow::metrics::EvalReport]) {
    for r in reports {
        let o = &r.overall;
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut line = format!(
            "{:<9} n={:<5} pearson={} spearman={} rmse={} mae={} auroc={}",
            r.subset.name(),
            r.count,
            f(o.pearson),
            f(o.spearman),
            f(o.rmse),
            f(o.mae),
            f(o.auroc)
        );
        if let Some(ps) = &r.per_structure {
            line.push_str(&format!(
                " per-structure pearson={:.4} spearman={:.4} ({} groups)",
                ps.mean_pearson, ps.mean_spearman, ps.groups
            ));
        }
        println!("{line}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
