//! `goalloop`: dataset generation, staged training, evaluation, and
//! report rendering for the goal-conditioned visuomotor pipeline.
//!
//! Every subcommand resolves its configuration the same way — built-in
//! defaults, then the `--config` file, then `GOALLOOP_*` environment
//! variables, then the `--seed`/`--perturb` flags — and works under one
//! artifact root: `<out>/data`, `<out>/ckpt`, `<out>/reports`,
//! `<out>/timings`. Exit codes: 0 success, 2 configuration error,
//! 3 missing prerequisite artifact, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use goalloop_core::config::Config;
use goalloop_core::error::CoreError;

mod stages;

#[derive(Parser)]
#[command(name = "goalloop", version, about = "goal-conditioned visuomotor pipeline driver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Config file of `key = value` lines (defaults apply when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Override eval.perturb: none|shift|rotation|color_jitter|occlusion|noise.
    #[arg(long, global = true, value_name = "KIND")]
    perturb: Option<String>,
    /// Artifact root directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/val/test episode splits with the scripted expert.
    GenData,
    /// Train the spatial VAE, then the causal temporal compressor.
    TrainCodec,
    /// Train the masked latent-video flow planner (needs the codec).
    TrainPlanner,
    /// Jointly train the state-alignment encoders and diffusion policy.
    TrainAlignPolicy,
    /// Run closed-loop chain evaluation for the configured policy.
    Eval,
    /// Train ablation variants and sweep sampling/control parameters.
    Ablate,
    /// Render accumulated report CSVs as tables on stdout.
    Report,
}

fn run(cli: Cli) -> Result<(), CoreError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.perturb {
        cfg.set("eval.perturb", p)?;
    }
    cfg.validate()?;
    let ctx = stages::Ctx { cfg, out: cli.out };
    match cli.cmd {
        Cmd::GenData => stages::gen_data(&ctx),
        Cmd::TrainCodec => stages::train_codec(&ctx),
        Cmd::TrainPlanner => stages::train_planner(&ctx),
        Cmd::TrainAlignPolicy => stages::train_align_policy(&ctx),
        Cmd::Eval => stages::eval(&ctx),
        Cmd::Ablate => stages::ablate(&ctx),
        Cmd::Report => stages::report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                CoreError::Config(_) => 2,
                CoreError::MissingPrerequisite(_) => 3,
                CoreError::Numerics(_) => 4,
                CoreError::Io { .. } | CoreError::CorruptFile { .. } => 1,
            };
            ExitCode::from(code)
        }
    }
}
