use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ulmsim::config::{ExperimentConfig, SvdMode};
use ulmsim::metrics::SummaryTable;
use ulmsim::pipeline;
use ulmsim::Error;

#[derive(Parser)]
#[command(name = "ulmsim", version, about = "Matrix-array ULM simulation and scheme comparison")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Restrict to these schemes: 3d, vip, ef, cs. Repeat or separate with commas.
    #[arg(long, global = true, value_delimiter = ',')]
    scheme: Vec<String>,
    /// Overrides the phantom seed; the noise seed follows it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Remove this many leading singular vectors.
    #[arg(long, global = true, value_name = "N", conflicts_with = "svd_auto")]
    svd_low: Option<usize>,
    /// Choose the low cut from spatial similarity.
    #[arg(long, global = true)]
    svd_auto: bool,
    /// Keep singular vectors below this index.
    #[arg(long, global = true, value_name = "M")]
    svd_high: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the ground-truth scatterer positions.
    Phantom,
    /// Synthesize RF archives for the ground truth.
    Simulate,
    /// Beamform RF archives into one stack per scheme.
    Beamform,
    /// SVD-filter the beamformed stacks.
    Svd,
    /// Detect and localize scatterers in every stack.
    Localize,
    /// Score localizations against the ground truth.
    Metrics,
    /// Full pipeline in one pass.
    Run,
    /// Render density maps and print the cost table.
    Report,
    /// Print the effective configuration.
    Config,
}

fn load(common: &Common) -> ulmsim::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !common.scheme.is_empty() {
        cfg.schemes.list = common.scheme.clone();
    }
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    if let Some(w) = common.workers {
        cfg.run.workers = w;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    if let Some(n) = common.svd_low {
        cfg.svd.mode = SvdMode::Manual;
        cfg.svd.low_cut = n;
    }
    if common.svd_auto {
        cfg.svd.mode = SvdMode::Auto;
    }
    if let Some(m) = common.svd_high {
        cfg.svd.high_cut = m;
        if cfg.svd.mode == SvdMode::Off {
            cfg.svd.mode = SvdMode::Manual;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: &Command, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let out = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match command {
        Command::Phantom => {
            let truth = pipeline::phantom_stage(cfg, &out)?;
            log::info!("{} frames, {} scatterers", truth.n_frames(), truth.frames.iter().map(Vec::len).sum::<usize>());
        }
        Command::Simulate => pipeline::simulate_stage(cfg, &out)?,
        Command::Beamform => {
            for c in pipeline::beamform_stage(cfg, &out)? {
                log::info!("{} channels, {} frames, {:.2} s", c.channels, c.frames, c.wall_clock.as_secs_f64());
            }
        }
        Command::Svd => {
            let cuts = pipeline::svd_stage(cfg, &out)?;
            log::info!("low cuts {cuts:?}");
        }
        Command::Localize => {
            for (scheme, set) in pipeline::localize_stage(cfg, &out)? {
                log::info!("{scheme}: {} localizations", set.total());
            }
        }
        Command::Metrics => print!("{}", SummaryTable(&pipeline::metrics_stage(cfg, &out)?)),
        Command::Run => {
            let report = pipeline::run(cfg, &out)?;
            print!("{}", SummaryTable(&report.rows));
        }
        Command::Report => {
            pipeline::report_stage(cfg, &out)?;
            print!("{}", pipeline::cost_table(&out)?);
        }
        Command::Config => unreachable!("handled before execution"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(Error::Config(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load(&cli.common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.workers).build_global() {
        log::warn!("worker pool already initialized: {e}");
    }
    match execute(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
