//! `cssm`: verification, benchmarking, fitting, construction and forecasting
//! for companion-matrix SSMs.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use companion_ssm::bench::{self, Algo, BenchConfig};
use companion_ssm::constructions::ConstructRequest;
use companion_ssm::data::{self, Channels, ForecastRow, Metrics, SplitFractions};
use companion_ssm::model::{build_forecast_network, Network, NetworkConfig};
use companion_ssm::train::{self, ArExperiment, FitMode};
use companion_ssm::verify::{self, Fault, VerifyOptions};
use companion_ssm::{Execution, Ssm};

#[derive(Parser, Debug)]
#[command(name = "cssm", version, about = "Companion-matrix state-space models")]
struct Cli {
    /// Seed for every random draw. Commands are deterministic given it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Main output file (default: stdout).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the randomized oracle-equivalence suites; exit 0 iff all pass.
    Verify {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Deliberately break the fast path to check the suites can fail.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Time filter construction and rollouts; writes a CSV.
    Bench {
        /// Filter lengths, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192, 16384])]
        lengths: Vec<usize>,
        /// State sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 1024])]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["naive", "fast", "fast+ctilde"])]
        algos: Vec<String>,
        /// Timed repetitions per cell (at least 5).
        #[arg(long, default_value_t = bench::MIN_REPS)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
    /// Fit an SSM to a noiseless AR(p) series and report transfer error.
    FitAr {
        /// AR order: 2, 4 or 6.
        #[arg(long, value_parser = parse_order)]
        p: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Ls)]
        mode: ModeArg,
        #[arg(long, default_value_t = 512)]
        length: usize,
        #[arg(long, default_value_t = 50)]
        holdout: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Frequency-grid points for the response.
        #[arg(long, default_value_t = 256)]
        grid: usize,
        /// Write the fitted frequency response here as CSV.
        #[arg(long)]
        response: Option<PathBuf>,
    },
    /// Forecast windows of a CSV series with a saved or freshly built model.
    Forecast {
        /// Network or SSM JSON.
        model: Option<PathBuf>,
        /// Network configuration JSON; decoder heads are fitted on the
        /// training split.
        #[arg(long, conflicts_with = "model")]
        build: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Value columns (default: every column after the first).
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        #[arg(long)]
        lag: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Window stride (default: horizon).
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Ridge for fitting decoder heads with --build.
        #[arg(long, default_value_t = 1e-6)]
        ridge: f64,
        /// Metrics JSON path (default: stderr).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Build an SSM from an AR, ARMA, SES or LTI specification.
    Construct {
        spec: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    TapMisalignment,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Ls,
    Gd,
    GdFull,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    /// Windows whose horizon lies in the final 20 % of the series.
    Test,
    /// Windows across the whole series.
    All,
    /// One window after the last sample; no truth.
    Future,
}

fn parse_order(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(p @ (2 | 4 | 6)) => Ok(p),
        Ok(p) => Err(format!("order {p} is not one of 2, 4, 6")),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut out = open_output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    let output = cli.output.as_deref();
    match &cli.command {
        Command::Verify { trials, inject_fault } => {
            configure_threads(cli.threads)?;
            let opts = VerifyOptions {
                seed,
                trials: *trials,
                fault: inject_fault.map(|_| Fault::TapMisalignment),
                exec: Execution::Parallel,
            };
            let report = verify::run_all(&opts);
            for s in &report.suites {
                println!(
                    "{:<14} trials={:<5} max_error={:.3e} tolerance={:.0e} {}",
                    s.name,
                    s.trials,
                    s.max_error,
                    s.tolerance,
                    if s.passed { "ok" } else { "FAILED" }
                );
                if let Some(note) = &s.note {
                    println!("{:<14} note: {note}", "");
                }
            }
            if let Some(path) = output {
                write_json(Some(path), &report)?;
            }
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                for s in report.suites.iter().filter(|s| !s.passed) {
                    if let Some(instance) = &s.failing {
                        eprintln!("failing {} instance: {}", s.name, serde_json::to_string(instance)?);
                    }
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Bench {
            lengths,
            dims,
            algos,
            reps,
            warmup,
        } => {
            // Timed kernels are single-threaded; pin the pool so nothing else
            // competes for cores.
            configure_threads(Some(1))?;
            let algos = algos
                .iter()
                .map(|a| a.parse::<Algo>())
                .collect::<companion_ssm::Result<Vec<_>>>()?;
            let cfg = BenchConfig {
                lengths: lengths.clone(),
                dims: dims.clone(),
                algos,
                reps: *reps,
                warmup: *warmup,
                seed,
            };
            let records = bench::run_bench(&cfg, |r| {
                eprintln!("{:<22} l={:<7} d={:<5} median={:.3e} ns", r.algo, r.l, r.d, r.median_ns);
            })?;
            let mut out = open_output(output)?;
            bench::write_bench_csv(&records, &mut out)?;
            out.flush()?;
            for &d in &cfg.dims {
                for algo in [Algo::Fast, Algo::FastCTilde, Algo::Naive] {
                    if let Some(slope) = bench::loglog_slope(&records, algo, d) {
                        eprintln!("slope {algo} d={d}: {slope:.3}");
                    }
                }
                match bench::crossover(&records, d) {
                    Some(l) => eprintln!("crossover d={d}: fast beats naive from l={l}"),
                    None => eprintln!("crossover d={d}: not reached"),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::FitAr {
            p,
            mode,
            length,
            holdout,
            epochs,
            lr,
            grid,
            response,
        } => {
            let mode = match mode {
                ModeArg::Ls => FitMode::Ls,
                ModeArg::Gd => FitMode::Gd,
                ModeArg::GdFull => FitMode::GdFull,
            };
            let mut exp = ArExperiment::new(*p, mode);
            exp.length = *length;
            exp.holdout = *holdout;
            exp.grid = *grid;
            exp.seed = seed;
            if let Some(e) = epochs {
                exp.gd.epochs = *e;
            }
            if let Some(l) = lr {
                exp.gd.lr = *l;
            }
            let report = train::run_ar_experiment(&exp)?;
            if let Some(path) = response {
                let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
                train::write_response_csv(BufWriter::new(file), &report.response)?;
            }
            write_json(output, &report)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Forecast {
            model,
            build,
            data: data_path,
            columns,
            lag,
            horizon,
            stride,
            split,
            ridge,
            metrics,
        } => {
            configure_threads(cli.threads)?;
            forecast(ForecastArgs {
                model: model.as_deref(),
                build: build.as_deref(),
                data: data_path,
                columns,
                lag: *lag,
                horizon: *horizon,
                stride: *stride,
                split: *split,
                ridge: *ridge,
                seed: cli.seed,
                output,
                metrics: metrics.as_deref(),
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Construct { spec } => {
            let req = ConstructRequest::from_json(&read(spec)?)?;
            write_json(output, &req.build()?)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

struct ForecastArgs<'a> {
    model: Option<&'a Path>,
    build: Option<&'a Path>,
    data: &'a Path,
    columns: &'a [String],
    lag: Option<usize>,
    horizon: Option<usize>,
    stride: Option<usize>,
    split: SplitArg,
    ridge: f64,
    seed: Option<u64>,
    output: Option<&'a Path>,
    metrics: Option<&'a Path>,
}

#[derive(Serialize)]
struct ForecastMetrics {
    windows: usize,
    lag: usize,
    horizon: usize,
    standardized: Metrics,
    original: Metrics,
}

fn load_model(path: &Path) -> Result<Network> {
    let text = read(path)?;
    match Network::from_json(&text) {
        Ok(net) => Ok(net),
        Err(net_err) => match Ssm::from_json(&text) {
            Ok(ssm) => Ok(Network::from_decoder(ssm)?),
            Err(_) => Err(net_err).with_context(|| format!("{} is neither a network nor an SSM", path.display())),
        },
    }
}

fn slice(series: &Channels, lo: usize, hi: usize) -> Channels {
    series.iter().map(|row| row[lo..hi].to_vec()).collect()
}

fn forecast(args: ForecastArgs<'_>) -> Result<()> {
    let raw = data::load_csv(args.data, args.columns)?;
    let fractions = SplitFractions::default();
    let (series, stats) = data::standardize(&raw, fractions.train)?;
    let n = series.first().map_or(0, Vec::len);
    let (train_end, val_end) = fractions.bounds(n)?;

    let (net, config) = match (args.model, args.build) {
        (Some(path), None) => (load_model(path)?, None),
        (None, Some(path)) => {
            let mut cfg: NetworkConfig = serde_json::from_str(&read(path)?).context("parsing network config")?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(lag) = args.lag {
                cfg.lag = lag;
            }
            (build_forecast_network(&cfg)?, Some(cfg))
        }
        _ => bail!("give either a model file or --build"),
    };
    let from_config = net.config.clone().or(config.clone());
    let lag = args
        .lag
        .or(from_config.as_ref().map(|c| c.lag))
        .context("--lag is required for this model")?;
    let horizon = args
        .horizon
        .or(from_config.as_ref().map(|c| c.horizon))
        .context("--horizon is required for this model")?;
    if net.input_width() != raw.len() {
        bail!(
            "model expects {} feature(s) but the data has {}",
            net.input_width(),
            raw.len()
        );
    }
    let stride = args.stride.unwrap_or(horizon).max(1);

    let mut net = net;
    if config.is_some() {
        if train_end < lag + 1 {
            bail!("training split ({train_end} rows) is shorter than lag {lag}");
        }
        let train = data::window_with_stats(&slice(&series, 0, train_end), &stats, lag, 0, stride)?;
        let sequences: Vec<Channels> = train.into_iter().map(|w| w.lag).collect();
        train::fit_decoder_heads(&mut net, &sequences, args.ridge)?;
    }

    let windows = match args.split {
        SplitArg::Future => {
            if n < lag {
                bail!("series length {n} is shorter than lag {lag}");
            }
            data::window_with_stats(&slice(&series, n - lag, n), &stats, lag, 0, 1)?
        }
        SplitArg::All => data::window_with_stats(&series, &stats, lag, horizon, stride)?,
        SplitArg::Test => {
            let lo = val_end
                .checked_sub(lag)
                .context("lag reaches before the start of the series")?;
            data::window_with_stats(&slice(&series, lo, n), &stats, lag, horizon, stride)
                .context("test split is too short for lag + horizon")?
        }
    };

    let mut rows = Vec::new();
    let (mut std_pred, mut std_truth, mut raw_pred, mut raw_truth): (Channels, Channels, Channels, Channels) =
        (vec![Vec::new(); raw.len()], vec![Vec::new(); raw.len()], vec![Vec::new(); raw.len()], vec![Vec::new(); raw.len()]);
    for (w_index, w) in windows.iter().enumerate() {
        let pred = net.forecast(&w.lag, horizon)?;
        let pred_raw = data::inverse_standardize(&pred, &stats)?;
        let has_truth = args.split != SplitArg::Future;
        let truth_raw = if has_truth {
            Some(data::inverse_standardize(&w.horizon, &stats)?)
        } else {
            None
        };
        for f in 0..raw.len() {
            for step in 0..horizon {
                rows.push(ForecastRow {
                    window: w_index,
                    step: step + 1,
                    feature: f,
                    prediction: pred_raw[f][step],
                    truth: truth_raw.as_ref().map(|t| t[f][step]),
                });
            }
            if let Some(t) = &truth_raw {
                std_pred[f].extend_from_slice(&pred[f]);
                std_truth[f].extend_from_slice(&w.horizon[f]);
                raw_pred[f].extend_from_slice(&pred_raw[f]);
                raw_truth[f].extend_from_slice(&t[f]);
            }
        }
    }
    let mut out = open_output(args.output)?;
    data::write_forecast_csv(&mut out, &rows)?;
    out.flush()?;

    if args.split != SplitArg::Future {
        let report = ForecastMetrics {
            windows: windows.len(),
            lag,
            horizon,
            standardized: data::metrics(&std_pred, &std_truth)?,
            original: data::metrics(&raw_pred, &raw_truth)?,
        };
        match args.metrics {
            Some(path) => write_json(Some(path), &report)?,
            None => eprintln!("{}", serde_json::to_string_pretty(&report)?),
        }
    }
    Ok(())
}
