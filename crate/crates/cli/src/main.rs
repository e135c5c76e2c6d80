mod artifacts;
mod commands;
mod config;
mod report;
mod svg;

use clap::{Parser, Subcommand, ValueEnum};
use commands::{Ctx, FinetuneArgs, PretrainArgs};
use config::KindChoice;
use nas_core::distill::{DistillMode, LossKind};
use nas_core::evolve::Objective;
use std::path::PathBuf;
use std::process::ExitCode;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Resource-aware neural architecture search on a laptop.
#[derive(Parser, Debug)]
#[command(name = "nas", version, about)]
struct Cli {
    /// Run config (JSON) or bare search-space config; defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the per-stage seeds of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Device profile name.
    #[arg(long, global = true)]
    device: Option<String>,
    /// Surrogate kind: auto, mlp, cart, rbf or gp.
    #[arg(long, global = true)]
    kind: Option<KindChoice>,
    /// Cost objective for the search.
    #[arg(long, global = true, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Worker threads; more than one enables parallel subnet passes.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the weight-sharing supernet.
    Pretrain {
        /// Which subnets teach each subnet.
        #[arg(long, value_enum)]
        distill_mode: Option<ModeArg>,
        /// Pairwise distillation loss.
        #[arg(long, value_enum)]
        distill_loss: Option<LossArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Validation accuracy, cost counts and simulated latencies of one subnet.
    EvalArch {
        /// `min`, `max` or comma-separated genes.
        #[arg(long)]
        arch: String,
        /// Supernet weights; defaults to the run directory's.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Finetune one architecture, or N random ones for the consistency report.
    Finetune {
        /// `min`, `max` or comma-separated genes.
        #[arg(long, conflicts_with = "archs")]
        arch: Option<String>,
        /// Number of random architectures.
        #[arg(long)]
        archs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Supernet weights; defaults to the run directory's.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Build the latency dataset from the simulator or an imported CSV.
    MeasureLatency {
        /// Random architectures per device.
        #[arg(long)]
        samples: Option<usize>,
        /// CSV of measured latencies (`gene_0..gene_N,device,latency_ms`) used instead of the simulator.
        #[arg(long)]
        import: Option<PathBuf>,
    },
    /// Fit latency surrogates per device.
    FitSurrogate {
        /// Training-set sizes for the sample-efficiency sweep.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
    },
    /// NSGA-II search for the accuracy/cost front.
    Search {
        /// Supernet weights; defaults to the run directory's.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Fitted surrogate; defaults to the run directory's for `--device`.
        #[arg(long)]
        surrogate: Option<PathBuf>,
    },
    /// Summarise a run directory into report.md.
    Report { run_dir: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Inplace,
    Smd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Kd,
    Dkd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    Latency,
    Flops,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Cmd::Report { run_dir } = &cli.cmd {
        print!("{}", report::report(run_dir)?);
        return Ok(());
    }
    let mut run = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        run.cfg.apply_seed(seed);
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            anyhow::bail!(nas_core::Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()?;
        run.cfg.train.parallel = t > 1;
        run.cfg.search.parallel = t > 1;
    }
    let out = cli.out.clone().unwrap_or_else(|| run.cfg.out.clone());
    let mut ctx = Ctx { run, out };
    let device = cli.device.as_deref();
    match cli.cmd {
        Cmd::GenData => commands::gen_data(&ctx).map(|_| ()),
        Cmd::Pretrain {
            distill_mode,
            distill_loss,
            epochs,
        } => commands::pretrain(
            &mut ctx,
            PretrainArgs {
                distill_mode: distill_mode.map(|m| match m {
                    ModeArg::Inplace => DistillMode::Inplace,
                    ModeArg::Smd => DistillMode::Smd,
                }),
                distill_loss: distill_loss.map(|l| match l {
                    LossArg::Kd => LossKind::Kd,
                    LossArg::Dkd => LossKind::Dkd,
                }),
                epochs,
            },
        ),
        Cmd::EvalArch { arch, weights } => commands::eval_arch(&ctx, &arch, weights.as_deref()),
        Cmd::Finetune {
            arch,
            archs,
            steps,
            lr,
            weights,
        } => commands::finetune(
            &mut ctx,
            FinetuneArgs {
                arch,
                archs,
                steps,
                lr,
                weights,
            },
        ),
        Cmd::MeasureLatency { samples, import } => {
            commands::measure_latency(&ctx, samples, import.as_deref(), device)
        }
        Cmd::FitSurrogate { sweep } => commands::fit_surrogate(&ctx, cli.kind, sweep, device),
        Cmd::Search { weights, surrogate } => commands::search(
            &mut ctx,
            weights.as_deref(),
            surrogate.as_deref(),
            device,
            cli.objective.map(|o| match o {
                ObjectiveArg::Latency => Objective::Latency,
                ObjectiveArg::Flops => Objective::Flops,
            }),
        ),
        Cmd::Report { .. } => unreachable!(),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<nas_core::Error>() {
        Some(nas_core::Error::Numerical(_) | nas_core::Error::Diverged { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
