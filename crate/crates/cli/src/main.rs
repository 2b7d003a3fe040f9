use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dssfa::bench::run_bench;
use dssfa::config::RunConfig;
use dssfa::datagen::{write_matrix_csv, Dataset};
use dssfa::gibbs::{read_draws, read_draws_csv, run_gibbs, write_draws};
use dssfa::pfa::{fit_path, FitPath};
use dssfa::summary::{emit_summary, loss_grid, select_at_quantile};
use dssfa::{posterior_mean_cov, Error, ErrorKind, PosteriorDraws, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dssfa", version, about = "Decoupled shrinkage and selection for Bayesian factor analysis")]
struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed for data generation and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Working factor dimension `k`; the path then covers `1..=k`.
    #[arg(long)]
    k: Option<usize>,
    /// Number of nonzero penalty levels per dimension.
    #[arg(long = "lambda-path")]
    lambda_path: Option<usize>,
    /// Quantile level of the full-model loss used as the threshold.
    #[arg(long)]
    quantile: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate data sets and write them with their ground truth.
    Simulate(Common),
    /// Run the Gibbs sampler on a data CSV.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the penalized path to the posterior mean covariance of a draws file.
    Fit {
        #[arg(long)]
        draws: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a fit path against the draws and select a model.
    Summarize {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        fitpath: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Replicated simulation study.
    Bench(Common),
    /// Print version information.
    Version,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.generation.base_seed = seed;
        config.sampler.chain.seed = seed;
    }
    if let Some(k) = common.k {
        config.sampler.chain.k = k;
        config.path.k_range = (1..=k).collect();
    }
    if let Some(l) = common.lambda_path {
        config.path.path_length = l;
    }
    if let Some(q) = common.quantile {
        config.summary.quantile = q;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_digest: String,
    files: Vec<String>,
}

/// Records which config produced the files of one output directory.
fn write_manifest(dir: &Path, command: &str, config: &RunConfig, files: Vec<String>) -> Result<()> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_digest: config.digest(),
        files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml()).map_err(|e| io_err(&path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_draws(path: &Path) -> Result<PosteriorDraws> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_draws_csv(path)
    } else {
        read_draws(path)
    }
}

fn cmd_simulate(config: &RunConfig) -> Result<()> {
    let gen = &config.generation;
    let root = &config.output_dir;
    create_dir(root)?;
    let mut files = Vec::new();
    for r in 0..gen.replicates {
        let (truth, data) = gen.simulate(r)?;
        let dir = root.join(format!("rep{r:03}"));
        create_dir(&dir)?;
        data.write_csv(&dir.join("data.csv"))?;
        write_matrix_csv(&dir.join("B0.csv"), truth.loadings.as_matrix())?;
        let sigma = nalgebra::DMatrix::from_diagonal(truth.uniqueness.as_vector());
        write_matrix_csv(&dir.join("Sigma0.csv"), &sigma)?;
        write_matrix_csv(&dir.join("Omega0.csv"), truth.omega.as_matrix())?;
        for name in ["data.csv", "B0.csv", "Sigma0.csv", "Omega0.csv"] {
            files.push(format!("rep{r:03}/{name}"));
        }
        log::info!("replicate {r}: wrote {}", dir.display());
    }
    write_manifest(root, "simulate", config, files)
}

fn cmd_sample(data_path: &Path, config: &RunConfig) -> Result<()> {
    let mut data = Dataset::read_csv(data_path)?;
    let draws = run_gibbs(&mut data, &config.sampler.prior, &config.sampler.chain)?;
    let dir = &config.output_dir;
    create_dir(dir)?;
    write_draws(&draws, &dir.join("draws.bin"))?;
    log::info!("{} draws of k = {} written to {}", draws.len(), draws.k(), dir.display());
    write_manifest(dir, "sample", config, vec!["draws.bin".into()])
}

fn cmd_fit(draws_path: &Path, config: &RunConfig) -> Result<()> {
    let draws = load_draws(draws_path)?;
    let omega_bar = posterior_mean_cov(&draws);
    let mut path_config = config.path.clone();
    if !path_config.k_range.contains(&draws.k()) {
        log::warn!(
            "path.k_range {:?} does not include the draws' dimension k = {}; summaries will need it",
            path_config.k_range,
            draws.k()
        );
    }
    path_config.k_range.retain(|&k| k <= draws.k());
    let path = fit_path(&omega_bar, &path_config)?;
    let dir = &config.output_dir;
    create_dir(dir)?;
    path.write_json(&dir.join("fitpath.json"))?;
    write_matrix_csv(&dir.join("omega_bar.csv"), omega_bar.as_matrix())?;
    let unconverged = path.fits.iter().filter(|f| !f.converged).count();
    if unconverged > 0 {
        log::warn!("{unconverged} of {} fits hit the iteration cap", path.fits.len());
    }
    log::info!("{} fits written to {}", path.fits.len(), dir.display());
    write_manifest(dir, "fit", config, vec!["fitpath.json".into(), "omega_bar.csv".into()])
}

fn cmd_summarize(draws_path: &Path, fitpath: &Path, config: &RunConfig) -> Result<()> {
    let draws = load_draws(draws_path)?;
    let path = FitPath::read_json(fitpath)?;
    let digest = posterior_mean_cov(&draws).digest();
    if digest != path.omega_bar_digest {
        log::warn!("fit path was computed from a different posterior mean than {}", draws_path.display());
    }
    let grid = loss_grid(&path, &draws)?;
    let selection = select_at_quantile(&grid, config.summary.quantile)?;
    let dir = &config.output_dir;
    emit_summary(&grid, &selection, dir)?;
    log::info!(
        "selected k̃ = {}, λ index {} (λ = {}), sparsity {:.3}{}",
        selection.k_selected,
        selection.lambda_index,
        selection.lambda_selected,
        selection.sparsity,
        if selection.fallback { " [no feasible fit; full model]" } else { "" }
    );
    let files = ["summary.csv", "fullmodel_losses.csv", "selection.json"];
    write_manifest(dir, "summarize", config, files.iter().map(|s| s.to_string()).collect())
}

fn cmd_bench(config: &RunConfig) -> Result<()> {
    let report = run_bench(config)?;
    let dir = &config.output_dir;
    report.write(dir)?;
    for row in &report.rows {
        log::info!(
            "{} q={}: {}/{} correct ({} failed), median RMSE {:.4}",
            row.scenario,
            row.quantile,
            row.correct,
            row.replicates - row.failed,
            row.failed,
            row.rmse_median
        );
    }
    let files = ["bench_report.csv", "bench_replicates.csv"];
    write_manifest(dir, "bench", config, files.iter().map(|s| s.to_string()).collect())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config {
                field: "--threads".into(),
                reason: e.to_string(),
            })?;
    }
    match cli.command {
        Command::Simulate(common) => cmd_simulate(&load_config(&common)?),
        Command::Sample { data, common } => cmd_sample(&data, &load_config(&common)?),
        Command::Fit { draws, common } => cmd_fit(&draws, &load_config(&common)?),
        Command::Summarize { draws, fitpath, common } => cmd_summarize(&draws, &fitpath, &load_config(&common)?),
        Command::Bench(common) => cmd_bench(&load_config(&common)?),
        Command::Version => {
            println!("dssfa {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            })
        }
    }
}
