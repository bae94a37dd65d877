//! `beamcast` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use beamcast::config::RunConfig;
use beamcast::eval::{SweepAxis, Variant};
use beamcast::model::RoutingMode;
use beamcast::pipeline::{self, Regime};
use beamcast::train::Stage;
use beamcast::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "beamcast", version, about = "Beam prediction from wide-beam sounding")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.d_model=64`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads. Bit-exact reruns need 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the resolved configuration before running.
    #[arg(long, global = true)]
    print_config: bool,
    /// Echo per-epoch training lines to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate, sound and label UEs; write train/val/test splits and statistics.
    GenData,
    /// Train the curriculum or the end-to-end baseline.
    Train {
        #[arg(long, default_value = "three_stage")]
        regime: Regime,
        /// Run a single curriculum stage (1, 2 or 3) from the previous stage's checkpoint.
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Defaults to the stage-3 checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// top1, soft_dense or hard_mask; defaults to the checkpoint's training mode.
        #[arg(long)]
        mode: Option<RoutingMode>,
    },
    /// Single-sample inference latency.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mode: Option<RoutingMode>,
    },
    /// Train and evaluate architecture variants.
    Ablate {
        /// Comma-separated variants, or `all` for the five ablations.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        variant: Vec<String>,
    },
    /// Train and evaluate the curriculum model along one axis.
    Sweep {
        /// depth or moe_layer_count
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Print the resolved configuration and exit.
    PrintConfig,
}

/// Process exit status for an error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::NonCoprimeRoot { .. }
        | Error::GroupSize { .. }
        | Error::Routing(_)
        | Error::TensorShape { .. }
        | Error::Fingerprint { .. } => 2,
        Error::MissingArtifact(_) => 3,
        Error::NumericalAbort { .. } => 4,
        _ => 1,
    }
}

fn variants(names: &[String]) -> beamcast::Result<Vec<Variant>> {
    if names.iter().any(|n| n == "all") {
        return Ok(Variant::ABLATIONS.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn run(cli: Cli) -> beamcast::Result<()> {
    let g = &cli.global;
    let cfg = RunConfig::load(g.config.as_deref(), &g.overrides)?;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    if g.print_config || matches!(cli.command, Command::PrintConfig) {
        print!("{}", cfg.to_toml());
    }
    match cli.command {
        Command::PrintConfig => {}
        Command::GenData => {
            let out = pipeline::cmd_gen_data(&cfg)?;
            println!(
                "generated {} sequences, kept {} records in {} classes (transition fraction {:.4})",
                out.generated,
                out.stats.records,
                out.stats.classes,
                out.stats.transition_fraction()
            );
            for (p, s) in out.paths.iter().zip(&out.split_stats) {
                println!("wrote {} ({} records)", p.display(), s.records);
            }
            println!("wrote {}", out.sidecar.display());
        }
        Command::Train { regime, stage } => {
            let out = pipeline::cmd_train(&cfg, regime, stage, g.verbose)?;
            for r in &out.reports {
                println!("{}", r.summary());
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Eval { checkpoint, mode } => {
            let out = pipeline::cmd_eval(&cfg, checkpoint.as_deref(), mode)?;
            println!("mode = {}", out.mode);
            print!("{}", out.metrics.to_report().to_text());
            println!("spread = {:.4}\nverdict = {}", out.spread, out.verdict);
            if let Some(c) = &out.comparison {
                print!("{}", c.to_text());
            }
            for p in &out.paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Bench { checkpoint, mode } => {
            let (rep, path) = pipeline::cmd_bench(&cfg, checkpoint.as_deref(), mode)?;
            println!(
                "mode={} runs={} mean_ms={:.4} median_ms={:.4} p99_ms={:.4}{}",
                rep.mode,
                rep.n_runs,
                rep.mean_ms,
                rep.median_ms,
                rep.p99_ms,
                if rep.jitter_warning { " (jitter warning)" } else { "" }
            );
            println!("wrote {}", path.display());
        }
        Command::Ablate { variant } => {
            let (rep, path) = pipeline::cmd_ablate(&cfg, &variants(&variant)?, g.verbose)?;
            print!("{}", rep.to_text());
            println!("wrote {}", path.display());
        }
        Command::Sweep { axis, values } => {
            let (rep, path) = pipeline::cmd_sweep(&cfg, axis, &values, g.verbose)?;
            print!("{}", rep.to_text());
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
