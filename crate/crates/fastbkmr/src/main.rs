use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fastbkmr::io::{
    atomic_write, ingest_csv, ingest_exposures, load_config, read_samples, standardize_with,
    write_curve_csv, write_overall_effects_csv, write_results_csv, write_samples,
    write_surface_csv, write_waic_csv, RunConfig, SamplesHeader, SAMPLES_FORMAT_VERSION,
};
use fastbkmr::kernels::KernelKind;
use fastbkmr::posterior::{
    bivariate_surface, overall_effect, predict_h, quantile_of, univariate_response, waic,
};
use fastbkmr::sampler::run_chain;
use fastbkmr::simulation::{
    run_experiment, Correlation, HSource, ModelConfig, SimulationSpec,
};
use fastbkmr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fastbkmr",
    version,
    about = "Fast Bayesian kernel machine regression via supervised random Fourier features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a CSV dataset and write a samples file.
    Fit(FitArgs),
    /// Evaluate the fitted surface at new exposure profiles.
    Predict(PredictArgs),
    /// Write overall-effect, univariate, and bivariate summary tables.
    Summarize(SummarizeArgs),
    /// Run the synthetic-data experiment harness.
    Simulate(SimulateArgs),
    /// Fit across several J values and rank them by WAIC.
    WaicScan(WaicScanArgs),
}

#[derive(Args)]
struct FitArgs {
    /// TOML config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV with outcome, exposure, and confounder columns.
    #[arg(long)]
    data: PathBuf,
    /// Output samples file.
    #[arg(long)]
    out: PathBuf,
    /// RNG seed (required here or in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of basis functions.
    #[arg(long)]
    j: Option<usize>,
    /// Override the total iteration count.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Samples file written by `fit`.
    #[arg(long)]
    samples: PathBuf,
    /// CSV with the exposure columns of the fitted model.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Write posterior mean and 95% interval per row instead of per-draw
    /// values.
    #[arg(long)]
    summarize: bool,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Samples file written by `fit`.
    #[arg(long)]
    samples: PathBuf,
    /// The training CSV the model was fitted to.
    #[arg(long)]
    data: PathBuf,
    /// Prefix for the output tables.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Training sample size.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Number of exposures.
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Exposure correlation regime: strong | weak.
    #[arg(long, default_value = "strong")]
    correlation: String,
    /// Data-generating kernel: gaussian | sqrt-abs | abs.
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    /// True surface: gp | friedman.
    #[arg(long, default_value = "gp")]
    h_source: String,
    /// Test rows as a fraction of n (0 disables holdout).
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    /// Comma-separated list of J values.
    #[arg(long, default_value = "20")]
    j: String,
    /// Total iterations per chain.
    #[arg(long, default_value_t = 1000)]
    k: usize,
    /// RNG seed (mandatory).
    #[arg(long)]
    seed: u64,
    /// Output results CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WaicScanArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated list of J values to scan.
    #[arg(long)]
    j_list: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output WAIC table CSV.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error[config]: {e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Predict(args) => run_predict(args),
        Command::Summarize(args) => run_summarize(args),
        Command::Simulate(args) => run_simulate(args),
        Command::WaicScan(args) => run_waic_scan(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_or_default(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn require_seed(flag: Option<u64>, config: &RunConfig) -> Result<u64> {
    flag.or(config.seed)
        .ok_or_else(|| Error::Config("a seed is required (--seed flag or 'seed' config key)".into()))
}

fn timing_sidecar(out: &Path, seconds: f64) -> Result<()> {
    let path = out.with_extension(
        out.extension()
            .map(|e| format!("{}.timing.json", e.to_string_lossy()))
            .unwrap_or_else(|| "timing.json".into()),
    );
    atomic_write(&path, format!("{{\"seconds\":{seconds}}}\n").as_bytes())
}

fn run_fit(args: FitArgs) -> Result<()> {
    let mut config = load_or_default(&args.config)?;
    if let Some(j) = args.j {
        config.j = j;
    }
    if let Some(k) = args.k {
        config.k = k;
    }
    let seed = require_seed(args.seed, &config)?;
    config.seed = Some(seed);
    let colspec = config.column_spec()?;
    let ingested = ingest_csv(&args.data, &colspec, config.standardize)?;
    if ingested.dropped_rows > 0 {
        eprintln!("dropped {} incomplete rows", ingested.dropped_rows);
    }
    let started = Instant::now();
    let samples = run_chain(&ingested.data, &config.chain_config(seed))?;
    let seconds = started.elapsed().as_secs_f64();

    let header = SamplesHeader {
        format_version: SAMPLES_FORMAT_VERSION,
        n: ingested.data.y.len(),
        m: ingested.data.x.ncols(),
        p: ingested.data.z.ncols(),
        j: config.j,
        k_total: config.k,
        burn_in: samples.burn_in,
        seed,
        outcome: Some(colspec.outcome.clone()),
        exposures: colspec.exposures.clone(),
        confounders: colspec.confounders.clone(),
        standardize: config.standardize,
        exposure_sds: ingested.exposure_sds.clone(),
        theta_block: samples.theta_block,
        omega_block: samples.omega_block,
        final_e_beta: samples.final_e_beta,
        final_e_omega: samples.final_e_omega,
        warnings: samples.warnings.clone(),
        config: config.clone(),
    };
    write_samples(&args.out, &header, &samples)?;
    // run metadata: config echo + diagnostics; timings go to a sidecar so
    // the main outputs stay byte-identical across reruns
    let meta = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::SamplesFile(format!("metadata serialization: {e}")))?;
    atomic_write(&args.out.with_extension("meta.json"), meta.as_bytes())?;
    timing_sidecar(&args.out, seconds)?;
    for w in &samples.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "fit: {} retained draws, acceptance theta-block {:.3}, omega-block {:.3}, {seconds:.1}s",
        samples.num_draws(),
        samples.theta_block.acceptance_rate(),
        samples.omega_block.acceptance_rate()
    );
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let (header, samples) = read_samples(&args.samples)?;
    let (mut x, dropped) = ingest_exposures(&args.data, &header.exposures)?;
    if dropped > 0 {
        eprintln!("dropped {dropped} incomplete rows");
    }
    if let Some(sds) = &header.exposure_sds {
        standardize_with(&mut x, sds)?;
    }
    let h = predict_h(&samples, &x)?;
    let mut text = String::new();
    if args.summarize {
        text.push_str("row,mean,lower,upper\n");
        let k = h.ncols();
        for r in 0..h.nrows() {
            let mut vals: Vec<f64> = (0..k).map(|d| h[(r, d)]).collect();
            let mean = vals.iter().sum::<f64>() / k as f64;
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lower = quantile_of(&vals, 0.025);
            let upper = quantile_of(&vals, 0.975);
            text.push_str(&format!("{r},{mean},{lower},{upper}\n"));
        }
    } else {
        text.push_str("row,draw,h\n");
        for r in 0..h.nrows() {
            for d in 0..h.ncols() {
                text.push_str(&format!("{r},{d},{}\n", h[(r, d)]));
            }
        }
    }
    atomic_write(&args.out, text.as_bytes())
}

fn run_summarize(args: SummarizeArgs) -> Result<()> {
    let (header, samples) = read_samples(&args.samples)?;
    let config = &header.config;
    let colspec = config.column_spec()?;
    // re-ingest raw, then apply the stored constants so the training X is
    // reproduced bitwise
    let ingested = ingest_csv(&args.data, &colspec, false)?;
    let mut x = ingested.data.x;
    if let Some(sds) = &header.exposure_sds {
        standardize_with(&mut x, sds)?;
    }

    let prefix = args.out_prefix.to_string_lossy();
    let mut effects = Vec::new();
    for &pct in &config.effect_percentiles {
        effects.push((pct, overall_effect(&samples, &x, pct, config.ref_percentile)?));
    }
    write_overall_effects_csv(
        &PathBuf::from(format!("{prefix}_overall.csv")),
        &effects,
        config.ref_percentile,
    )?;

    for (m, name) in header.exposures.iter().enumerate() {
        let curve = univariate_response(&samples, &x, m, config.co_percentile, config.grid_size)?;
        write_curve_csv(
            &PathBuf::from(format!("{prefix}_univariate_{name}.csv")),
            name,
            &curve,
        )?;
    }

    let pair = config.bivariate_pair.or(if x.ncols() >= 2 { Some((0, 1)) } else { None });
    if let Some((m1, m2)) = pair {
        let surface =
            bivariate_surface(&samples, &x, m1, m2, config.co_percentile, config.grid_size)?;
        let (n1, n2) = (&header.exposures[m1], &header.exposures[m2]);
        write_surface_csv(
            &PathBuf::from(format!("{prefix}_bivariate_{n1}_{n2}.csv")),
            n1,
            n2,
            &surface,
        )?;
    }
    Ok(())
}

fn parse_j_list(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for tok in s.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        out.push(
            tok.parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid J value '{tok}'")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::Config("empty J list".into()));
    }
    Ok(out)
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let correlation = match args.correlation.as_str() {
        "strong" => Correlation::Strong,
        "weak" => Correlation::Weak,
        other => return Err(Error::Config(format!("unknown correlation '{other}'"))),
    };
    let kernel_kind = match args.kernel.as_str() {
        "gaussian" => KernelKind::GaussianSquared,
        "sqrt-abs" => KernelKind::SqrtAbsolute,
        "abs" => KernelKind::Absolute,
        other => return Err(Error::Config(format!("unknown kernel '{other}'"))),
    };
    let h_source = match args.h_source.as_str() {
        "gp" => HSource::GaussianProcess,
        "friedman" => HSource::Friedman,
        other => return Err(Error::Config(format!("unknown h-source '{other}'"))),
    };
    let spec = SimulationSpec {
        n: args.n,
        m: args.m,
        correlation,
        kernel_kind,
        h_source,
        holdout_fraction: args.holdout,
        replicates: args.replicates,
        seed: args.seed,
    };
    spec.validate()?;
    let base = RunConfig::default();
    let configs: Vec<ModelConfig> = parse_j_list(&args.j)?
        .into_iter()
        .map(|j| ModelConfig {
            j,
            k_total: args.k,
            hmc: base.hmc(),
            priors: base.priors(),
            theta_update: base.theta_update,
        })
        .collect();
    let rows = run_experiment(&[spec], &configs);
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    write_results_csv(&args.out, &rows)?;
    eprintln!("simulate: {} rows, {failures} failed replicates", rows.len());
    Ok(())
}

fn run_waic_scan(args: WaicScanArgs) -> Result<()> {
    let config = load_or_default(&args.config)?;
    let seed = require_seed(args.seed, &config)?;
    let colspec = config.column_spec()?;
    let ingested = ingest_csv(&args.data, &colspec, config.standardize)?;
    let mut rows = Vec::new();
    for j in parse_j_list(&args.j_list)? {
        let mut cfg = config.clone();
        cfg.j = j;
        let samples = run_chain(&ingested.data, &cfg.chain_config(seed))?;
        let w = waic(&samples, &ingested.data)?;
        eprintln!("waic-scan: J = {j}, WAIC = {w:.3}");
        rows.push((j, w));
    }
    write_waic_csv(&args.out, &rows)
}
