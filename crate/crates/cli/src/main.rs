use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use longscape_cli::commands::{self, TrainArgs};
use longscape_cli::config::{key_help, parse_pairs, RunConfig};

#[derive(Parser)]
#[command(name = "longscape", version, about = "Image outpainting with recurrent content transfer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigFlags {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set batch=8`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the generator and both critics
    Train {
        #[command(flatten)]
        cfg: ConfigFlags,
        /// Dataset root holding `train/` (and optionally `test/`) PNGs
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints, logs and sample grids
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Checkpoint to continue from
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the resolved configuration and exit
        #[arg(long)]
        print_config: bool,
    },
    /// Extend an image by repeated prediction to the right and left
    Generate {
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps_right: usize,
        #[arg(long, default_value_t = 0)]
        steps_left: usize,
    },
    /// Proxy metrics on the test split
    Eval {
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print a checkpoint's header and sizes
    InspectCheckpoint {
        path: PathBuf,
        /// List every stored tensor
        #[arg(long)]
        entries: bool,
    },
}

impl ConfigFlags {
    fn overrides(&self, extra: &[(&str, Option<String>)]) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        for s in &self.set {
            pairs.extend(parse_pairs(s).with_context(|| format!("--set {s}"))?);
        }
        let flags = [("seed", self.seed.map(|v| v.to_string())), ("scale", self.scale.map(|v| v.to_string()))];
        for (k, v) in flags.iter().chain(extra) {
            if let Some(v) = v {
                pairs.push((k.to_string(), v.clone()));
            }
        }
        Ok(pairs)
    }

    fn resolve(&self, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let pairs = self.overrides(extra)?;
        match &self.config {
            Some(p) => RunConfig::load(p, &pairs),
            None => RunConfig::from_pairs(&pairs),
        }
    }

    /// Explicit flags, else the `run.cfg` stored with the checkpoint.
    fn for_checkpoint(&self, ckpt: &std::path::Path) -> Result<RunConfig> {
        if self.config.is_some() || !self.set.is_empty() || self.seed.is_some() || self.scale.is_some() {
            self.resolve(&[])
        } else {
            commands::config_for_checkpoint(ckpt)
        }
    }
}

fn set_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LONGSCAPE_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow!("LONGSCAPE_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    set_threads()?;
    match cli.cmd {
        Cmd::Train {
            cfg,
            data,
            out,
            epochs,
            max_steps,
            resume,
            print_config,
        } => {
            let extra = [("epochs", epochs.map(|v| v.to_string())), ("max_steps", max_steps.map(|v| v.to_string()))];
            let config = cfg.resolve(&extra)?;
            if print_config {
                print!("{}", config.dump());
                return Ok(());
            }
            let args = TrainArgs {
                config,
                data: data.ok_or_else(|| anyhow!("--data is required"))?,
                out: out.ok_or_else(|| anyhow!("--out is required"))?,
                resume,
            };
            let s = commands::train(&args)?;
            let steps = s.last.as_ref().map_or(s.first_step, |m| m.step);
            println!("trained steps {}..{steps}; checkpoint {}", s.first_step, s.checkpoint.display());
        }
        Cmd::Generate {
            cfg,
            checkpoint,
            input,
            out,
            steps_right,
            steps_left,
        } => {
            let config = cfg.for_checkpoint(&checkpoint)?;
            let r = commands::generate(&checkpoint, &config, &input, steps_right, steps_left, &out)?;
            println!("wrote {} ({}x{})", out.display(), r.width, r.height);
            for (c, mad) in &r.seams {
                println!("seam column {c}: mad {mad:.6}");
            }
        }
        Cmd::Eval { cfg, checkpoint, data } => {
            let config = cfg.for_checkpoint(&checkpoint)?;
            print!("{}", commands::eval(&checkpoint, &config, &data)?.to_text());
        }
        Cmd::InspectCheckpoint { path, entries } => print!("{}", commands::inspect(&path, entries)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = Cli::command()
        .mut_subcommand("train", |c| c.after_help(key_help()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
