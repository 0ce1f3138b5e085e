//! `multigrain` — synthesize a degraded corpus, build the clustered expert
//! models, restore images, and tabulate evaluation and usage statistics.
//!
//! Every command is deterministic under the configuration's seed. Failures
//! print a single machine-readable JSON line to stderr and exit nonzero.

use anyhow::Result;
use clap::{Parser, Subcommand};
use multigrain_core::degrade::DistMode;
use multigrain_core::pipeline::{
    cmd_build, cmd_eval, cmd_restore, cmd_stats, cmd_sweep, parse_mode, PipelineError, RunConfig,
    StageStatus, SweepKind,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "multigrain",
    about = "Multi-granularity mixture-of-experts image restoration pipeline",
    arg_required_else_help = true
)]
struct Cli {
    /// JSON run configuration; defaults apply to any omitted field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize clean images, degraded splits, and the corpus manifest.
    Synth,
    /// Run the model-building stages: extract, standardize, tree, experts,
    /// routers, masks. Finished stages are skipped; stale ones error.
    Build,
    /// Restore PNGs through the routed experts.
    Restore {
        /// Input images.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Expert selection: `auto` or `instruction:<task>` where the task is
        /// a degradation kind (e.g. rain) or a named recipe (e.g. H-N-R).
        #[arg(long, default_value = "auto")]
        mode: String,
    },
    /// Score the test split(s) and write metrics.csv, or run an ablation
    /// sweep over level-count variants.
    Eval {
        /// Restrict evaluation to one dist mode: in or out.
        #[arg(long)]
        dist: Option<String>,
        /// Rebuild under level-count variants instead: fineness or
        /// granularity.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Aggregate the eval traces into level-usage and agreement statistics.
    Stats,
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(PipelineError::BadConfig(
            "a command is required: synth, build, restore, eval, or stats".into(),
        ));
    };
    match command {
        Command::Synth => {
            let out = cmd_synth_logged(&cfg)?;
            println!("{out}");
        }
        Command::Build => {
            let outcome = cmd_build(&cfg)?;
            for (stage, status) in &outcome.stages {
                println!("build/{stage}: {status}");
            }
            let skipped = outcome.stages.iter().all(|(_, s)| *s == StageStatus::Skipped);
            if skipped {
                println!("build: up to date");
            }
        }
        Command::Restore { inputs, mode } => {
            let mode = parse_mode(&mode)?;
            let outcome = cmd_restore(&cfg, &inputs, &mode)?;
            for path in &outcome.restored {
                println!("restored: {}", path.display());
            }
        }
        Command::Eval { dist, sweep } => match (dist, sweep) {
            (Some(_), Some(_)) => {
                return Err(PipelineError::BadConfig(
                    "choose either --dist or --sweep, not both".into(),
                ))
            }
            (_, Some(sweep)) => {
                let kind: SweepKind = sweep.parse()?;
                let outcome = cmd_sweep(&cfg, kind)?;
                for row in &outcome.rows {
                    println!(
                        "sweep/{kind}: {} {} psnr {:.3} ssim {:.4}",
                        row.variant, row.dist, row.psnr, row.ssim
                    );
                }
                println!("sweep table: {}", outcome.csv_path.display());
            }
            (dist, None) => {
                let dist = match dist {
                    Some(text) => Some(text.parse::<DistMode>()?),
                    None => None,
                };
                let outcome = cmd_eval(&cfg, dist)?;
                println!(
                    "eval: {} items over dist {{{}}} -> {}",
                    outcome.items,
                    outcome.evaluated.join(", "),
                    outcome.csv_path.display()
                );
            }
        },
        Command::Stats => {
            let outcome = cmd_stats(&cfg)?;
            for s in &outcome.summaries {
                println!(
                    "stats/{}: practical {} | agreement {:.1}% | mean e_gran {:.4}",
                    s.dist,
                    s.practical_pct
                        .iter()
                        .map(|p| format!("{p:.1}%"))
                        .collect::<Vec<_>>()
                        .join("/"),
                    s.agreement_pct,
                    s.mean_e_gran
                );
            }
            println!("stats table: {}", outcome.csv_path.display());
        }
    }
    Ok(())
}

fn cmd_synth_logged(cfg: &RunConfig) -> Result<String, PipelineError> {
    let outcome = multigrain_core::pipeline::cmd_synth(cfg)?;
    Ok(if outcome.skipped {
        format!("synth: up to date ({} items)", outcome.items)
    } else {
        format!("synth: {} items -> {}", outcome.items, outcome.manifest_path.display())
    })
}

/// Stable machine-readable tag for each failure class.
fn error_kind(err: &PipelineError) -> &'static str {
    match err {
        PipelineError::Io { .. } => "io",
        PipelineError::BadJson { .. } => "bad_json",
        PipelineError::BadConfig(_) => "bad_config",
        PipelineError::MissingCleans(_) => "missing_cleans",
        PipelineError::MissingStage { .. } => "missing_stage",
        PipelineError::StaleStage { .. } => "stale_stage",
        PipelineError::BadManifest(_) => "bad_manifest",
        PipelineError::UnknownTask { .. } => "unknown_task",
        PipelineError::NoTraces(_) => "no_traces",
        PipelineError::Image(_) => "image",
        PipelineError::Degrade(_) => "degrade",
        PipelineError::Feature(_) => "feature",
        PipelineError::Cluster(_) => "cluster",
        PipelineError::Expert(_) => "expert",
        PipelineError::Router(_) => "router",
        PipelineError::Nn(_) => "nn",
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let line = serde_json::json!({
            "error": { "kind": error_kind(&err), "message": err.to_string() }
        });
        eprintln!("{line}");
        std::process::exit(1);
    }
}
