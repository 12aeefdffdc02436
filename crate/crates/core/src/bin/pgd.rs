use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pgd_core::data::{file_digest, generate_dataset, read_dataset, write_dataset, DATASET_MANIFEST};
use pgd_core::experiments::{
    fit_prior, keys_help, markdown_report, method_config, method_weights, render, run_grid, run_once, write_outcome,
    Config, Method, Palette, Task,
};
use pgd_core::grid::read_pgdf_file;
use pgd_core::prior::{read_prior, write_prior, ChannelNormalization, Denoiser};
use pgd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pgd", version, about = "Guided diffusion sampling for PDE inverse problems", after_long_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML configuration file; omitted keys take their defaults
    #[arg(short, long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<Config> {
        match &self.config {
            Some(path) => Config::load(path),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training set and write it as PGDF files
    #[command(after_long_help = keys_help())]
    GenerateData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fit the Gaussian prior to a generated dataset
    #[command(after_long_help = keys_help())]
    FitPrior {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory written by generate-data
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// One guided reconstruction of the held-out sample
    #[command(after_long_help = keys_help())]
    Sample {
        #[command(flatten)]
        config: ConfigArg,
        /// Prior directory written by fit-prior; fitted in memory when absent
        #[arg(short, long)]
        prior: Option<PathBuf>,
        /// Run a named method instead of sampler.mode with smc.scheme
        #[arg(short, long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Sweep systems, methods, noise levels, particle counts and seeds
    #[command(after_long_help = keys_help())]
    Grid {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write one channel of a PGDF field as PGM, optionally PNG
    Render {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// gray | heat
        #[arg(long, default_value = "gray")]
        palette: Palette,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Turn an aggregate CSV into a markdown table
    Report {
        #[arg(short, long)]
        input: PathBuf,
        /// Written to stdout when absent
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method {s:?} ({})", names.join(" | "))
    })
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("PGD_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("PGD_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))
}

fn load_task(config: &Config, prior_dir: Option<&Path>) -> Result<Task> {
    let Some(dir) = prior_dir else {
        return Task::build(config);
    };
    let spec = config.dataset_spec()?;
    let (prior, meta) = read_prior(dir)?;
    if meta.grid != spec.grid {
        return Err(Error::Config(format!("prior in {} was fitted on another grid", dir.display())));
    }
    let normalization = meta.normalization.unwrap_or_else(|| ChannelNormalization::identity(spec.grid.channels));
    Task::with_prior(config, spec, prior, normalization)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, out } => {
            let config = config.load()?;
            let spec = config.dataset_spec()?;
            let samples = generate_dataset(&spec)?;
            write_dataset(&out, &spec, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::FitPrior { config, data, out } => {
            let config = config.load()?;
            let (manifest, samples) = read_dataset(&data)?;
            if manifest.spec != config.dataset_spec()? {
                return Err(Error::Config("dataset was generated with a different [dataset] section".into()));
            }
            let (prior, normalization) = fit_prior(&config, &samples)?;
            let digest = file_digest(data.join(DATASET_MANIFEST))?;
            write_prior(&out, &prior, &manifest.spec.grid, Some(normalization), Some(digest))?;
            println!("wrote prior of dimension {} to {}", prior.dim(), out.display());
        }
        Command::Sample { config, prior, method, out } => {
            let config = config.load()?;
            let task = load_task(&config, prior.as_deref())?;
            let obs = task.observations(&config, config.observations.sigma_o)?;
            let seed = config.sampler.seed;
            let (smc, weights) = match method {
                Some(m) => (method_config(&config, m, config.smc.particles, seed)?, method_weights(&config, m)),
                None => (
                    config.smc_config(config.sampler.mode, config.smc.scheme, config.smc.particles, seed)?,
                    config.guidance.weights(),
                ),
            };
            let outcome = run_once(&task, &obs, &smc, &weights)?;
            write_outcome(&out, &task, &smc, &outcome)?;
            fs::write(out.join("config.toml"), config.to_toml())?;
            let m = &outcome.metrics;
            println!("err_a={:.6} err_u={:.6} err={:.6} final_ess={:.3}", m.err_a, m.err_u, m.err, m.final_ess);
        }
        Command::Grid { config, out } => {
            let manifest = run_grid(&config.load()?, &out)?;
            let failed = manifest.runs.iter().filter(|r| r.status != "ok").count();
            println!("{} runs ({failed} failed) written to {}", manifest.runs.len(), out.display());
        }
        Command::Render { input, channel, palette, out, png } => {
            let field = read_pgdf_file(&input)?;
            let info = render(&field, channel, palette, &out, png.as_deref())?;
            println!("channel {channel}: min {} max {}", info.min, info.max);
        }
        Command::Report { input, out } => {
            let table = markdown_report(&fs::read_to_string(&input)?)?;
            match out {
                Some(path) => fs::write(path, table)?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                ref e if e.is_numerical() => 3,
                _ => 1,
            })
        }
    }
}
