use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wifi2cap::commands::{cmd_ablate, cmd_eval, cmd_synth, cmd_train, cmd_viz};
use wifi2cap::config::{parse_stages, MirrorMode, RunConfig};
use wifi2cap::Result;

#[derive(Parser)]
#[command(name = "wifi2cap", version, about = "Synthetic CSI-to-caption pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the given stages.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of s1,s2_1,s2_2,s3.
        #[arg(long)]
        stages: Option<String>,
        /// off, teacher or full.
        #[arg(long)]
        mirror: Option<MirrorMode>,
        /// Allow Stage 3 on an untrained CSI encoder.
        #[arg(long)]
        baseline: bool,
    },
    /// Score checkpoints on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: Option<String>,
    },
    /// Run the ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Export the CSI-text similarity heatmap.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "held_out")]
        split: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let hash = cmd_synth(&common.load()?, &common.out)?;
            println!("{hash}");
        }
        Command::Train { common, stages, mirror, baseline } => {
            let mut cfg = common.load()?;
            if let Some(s) = stages {
                cfg.stages = parse_stages(&s)?;
            }
            if let Some(m) = mirror {
                cfg.mirror = m;
            }
            cfg.validate()?;
            cmd_train(&cfg, &common.out, baseline)?;
        }
        Command::Eval { common, split } => {
            let cfg = common.load()?;
            let split = split.unwrap_or_else(|| cfg.eval.split.clone());
            let report = cmd_eval(&cfg, &common.out, &split)?;
            println!("{}", serde_json::to_string_pretty(&report.scores)?);
        }
        Command::Ablate { common } => {
            for row in cmd_ablate(&common.load()?, &common.out)? {
                println!("{:<24} {:>8} {}", row.arm, row.bleu4.map_or("-".into(), |b| format!("{b:.2}")), row.status);
            }
        }
        Command::Viz { common, split } => {
            cmd_viz(&common.load()?, &common.out, &split)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
