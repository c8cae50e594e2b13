mod commands;
mod config;
mod scene_file;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{FitMode, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "sparseview", version, about = "Sparse-input view synthesis experiments")]
struct Cli {
    /// TOML run configuration; its values override flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "SPARSEVIEW_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a scene description into a dataset directory.
    GenScene { scene: PathBuf },
    /// Plane-sweep visibility prior of one view with respect to another.
    VisPrior(VisPriorArgs),
    /// Fit a radiance field to a dataset.
    Fit(FitArgs),
    /// Render a checkpoint at a list of poses.
    Render { checkpoint: PathBuf, poses: PathBuf },
    /// Predict future frames with the MPI pipeline.
    Tvs(TvsArgs),
    /// Compare predicted images and depths with references.
    Eval(EvalArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck,
}

#[derive(Debug, Args)]
struct VisPriorArgs {
    dataset: PathBuf,
    #[arg(long)]
    primary: Option<usize>,
    #[arg(long)]
    secondary: Option<usize>,
    /// Number of depth planes.
    #[arg(long)]
    planes: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    frame: Option<usize>,
}

#[derive(Debug, Args)]
struct FitArgs {
    dataset: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<FitMode>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Debug, Args)]
struct TvsArgs {
    dataset: PathBuf,
    /// Frame gap to the previous input; k - 1 future frames are predicted.
    #[arg(long)]
    k: Option<usize>,
    /// Current frame index n; the previous input is n - k.
    #[arg(long)]
    frame: Option<usize>,
    #[arg(long)]
    view: Option<usize>,
    /// Bound mode: predicted, gt-flow, gt-flow,gt-infill or all. Repeatable.
    #[arg(long = "bound")]
    bounds: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    pred: PathBuf,
    gt: PathBuf,
    /// Mask policy: all, valid-depth or dir:PATH.
    #[arg(long)]
    mask: Option<String>,
}

/// Global settings after merging the config file with the flags.
pub struct RunContext {
    pub config: RunConfig,
    pub out: Option<PathBuf>,
    /// Seed from the config or `--seed`; sections fall back to their own.
    pub seed: Option<u64>,
}

impl RunContext {
    pub fn out(&self) -> Result<&PathBuf> {
        self.out.as_ref().context("no output directory; pass --out or set `out` in the config")
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let threads = config.threads.or(cli.threads);
    if let Some(n) = threads {
        anyhow::ensure!(n > 0, "thread count must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = RunContext {
        out: config.out.clone().or(cli.out),
        seed: config.seed.or(cli.seed),
        config,
    };
    match cli.command {
        Command::GenScene { scene } => commands::gen_scene(&ctx, &scene),
        Command::VisPrior(a) => {
            let s = &ctx.config.vis_prior;
            let p = commands::VisPriorParams {
                primary: s.primary.or(a.primary).unwrap_or(0),
                secondary: s.secondary.or(a.secondary).unwrap_or(1),
                planes: s.planes.or(a.planes).unwrap_or(sparseview::priors::DEFAULT_PLANES),
                gamma: s.gamma.or(a.gamma).unwrap_or(sparseview::priors::DEFAULT_GAMMA),
                frame: s.frame.or(a.frame).unwrap_or(0),
            };
            commands::vis_prior(&ctx, &a.dataset, &p)
        }
        Command::Fit(a) => {
            let mode = ctx.config.fit.mode.or(a.mode).unwrap_or(FitMode::Static);
            commands::fit(&ctx, &a.dataset, mode, a.iters)
        }
        Command::Render { checkpoint, poses } => commands::render(&ctx, &checkpoint, &poses),
        Command::Tvs(a) => {
            let s = &ctx.config.tvs;
            let k = s.k.or(a.k).unwrap_or(2);
            let bounds = s.bounds.clone().unwrap_or(a.bounds);
            let p = commands::TvsParams {
                k,
                frame: s.frame.or(a.frame).unwrap_or(k),
                view: s.view.or(a.view).unwrap_or(0),
                modes: commands::parse_bounds(&bounds)?,
            };
            commands::tvs(&ctx, &a.dataset, &p)
        }
        Command::Eval(a) => {
            let mask = ctx.config.eval.mask.clone().or(a.mask).unwrap_or_else(|| "all".into());
            commands::eval(&ctx, &a.pred, &a.gt, &mask)
        }
        Command::Gradcheck => commands::gradcheck(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
