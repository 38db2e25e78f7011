use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use unlearn_lab::pipeline::{aggregate_csv, ExperimentConfig, Workspace};

#[derive(Parser)]
#[command(name = "unlearn-lab", version, about = "Synthetic PII unlearning experiments")]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in desk config.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides `output_dir` in the config.
    #[arg(long, global = true, env = "UNLEARN_LAB_OUT")]
    out: Option<PathBuf>,
    /// Run seed; defaults to every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the effective config as TOML.
    Config,
    /// Generate the corpus and forget split.
    Synth,
    /// Train the base (retrain) and target models.
    Train,
    /// Select the forget core-set from the target model.
    Coreset,
    /// Apply an unlearning method from the config.
    Unlearn {
        #[arg(long)]
        method: String,
        /// Unlearn on the core-set instead of the known split.
        #[arg(long)]
        coreset: bool,
    },
    /// Measure P1/P2/P3 recovery and utility of a model.
    Attack {
        /// `target`, `retrain`, or an unlearned model label.
        #[arg(long)]
        model: String,
    },
    /// Forgetting and association scores, correlations and CKA.
    Analyze {
        #[arg(long)]
        model: String,
    },
    /// Aggregate reports across seeds.
    Report,
    /// Every stage, every method, every seed, then the report.
    Run,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Cmd::Config = cli.cmd {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let root = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
    let seeds = match cli.seed {
        Some(s) if !cfg.seeds.contains(&s) => bail!("seed {s} is not in the config seeds {:?}", cfg.seeds),
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let ws = Workspace::open(cfg, &root)?;
    eprintln!("experiment directory: {}", ws.dir.display());
    for &s in &seeds {
        match &cli.cmd {
            Cmd::Config | Cmd::Report => {}
            Cmd::Synth => drop(ws.synth(s)?),
            Cmd::Train => ws.train(s)?,
            Cmd::Coreset => {
                let cs = ws.coreset(s)?;
                println!("seed {s}: core-set {:?}", cs.ids);
            }
            Cmd::Unlearn { method, coreset } => {
                let label = ws.unlearn(s, method, *coreset)?;
                println!("seed {s}: wrote model {label}");
            }
            Cmd::Attack { model } => {
                let r = ws.attack(s, model)?;
                println!("seed {s}: {}", r.csv_row());
            }
            Cmd::Analyze { model } => {
                let b = ws.analyze(s, model)?;
                println!("seed {s}: {}", serde_json::to_string(&b.grad_vs_fs)?);
            }
            Cmd::Run => run_seed(&ws, s)?,
        }
    }
    if matches!(cli.cmd, Cmd::Report | Cmd::Run) {
        print!("{}", aggregate_csv(&ws.report()?));
    }
    Ok(())
}

fn run_seed(ws: &Workspace, s: u64) -> Result<()> {
    ws.synth(s)?;
    ws.train(s)?;
    ws.coreset(s)?;
    let mut labels = vec!["target".to_string(), "retrain".to_string()];
    for m in &ws.cfg.methods {
        labels.push(ws.unlearn(s, &m.label(), false)?);
    }
    for l in &labels {
        ws.attack(s, l)?;
        if l != "target" {
            ws.analyze(s, l)?;
        }
    }
    Ok(())
}
