//! Micro-benchmark harness for filter construction and closed-loop rollout.
//!
//! Every (algo, ℓ, d) cell runs warm-up iterations and then `reps` timed
//! iterations on the monotonic clock, reporting median and interquartile
//! range in nanoseconds.
//!
//! CSV columns, in order: `algo,l,d,median_ns,iqr_ns,reps`.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::companion::{normalize_stability, CompanionMatrix, Ssm};
use crate::error::{Result, SsmError};
use crate::filter::{
    c_tilde, closed_loop_rollout, fast_closed_loop_rollout, fast_output_filter, naive_output_filter, FilterPlan,
};

pub const MIN_REPS: usize = 5;
pub const CSV_HEADER: [&str; 6] = ["algo", "l", "d", "median_ns", "iqr_ns", "reps"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algo {
    #[serde(rename = "naive")]
    Naive,
    /// Spectral filter with `C̃` precomputed.
    #[serde(rename = "fast")]
    Fast,
    /// Spectral filter including the `C̃` construction.
    #[serde(rename = "fast+ctilde")]
    FastCTilde,
    #[serde(rename = "closed-loop-fast")]
    ClosedLoopFast,
    #[serde(rename = "closed-loop-recurrent")]
    ClosedLoopRecurrent,
}

impl Algo {
    pub const ALL: [Algo; 5] = [
        Algo::Naive,
        Algo::Fast,
        Algo::FastCTilde,
        Algo::ClosedLoopFast,
        Algo::ClosedLoopRecurrent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Naive => "naive",
            Algo::Fast => "fast",
            Algo::FastCTilde => "fast+ctilde",
            Algo::ClosedLoopFast => "closed-loop-fast",
            Algo::ClosedLoopRecurrent => "closed-loop-recurrent",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = SsmError;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SsmError::invalid("algo", format!("unknown algorithm `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub algo: Algo,
    pub l: usize,
    pub d: usize,
    pub median_ns: f64,
    pub iqr_ns: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub dims: Vec<usize>,
    pub algos: Vec<Algo>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: (10..=14).map(|e| 1 << e).collect(),
            dims: vec![64, 1024],
            algos: vec![Algo::Naive, Algo::Fast, Algo::FastCTilde],
            reps: MIN_REPS,
            warmup: 1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < MIN_REPS {
            return Err(SsmError::invalid(
                "reps",
                format!("must be at least {MIN_REPS}, got {}", self.reps),
            ));
        }
        if self.lengths.is_empty() || self.dims.is_empty() || self.algos.is_empty() {
            return Err(SsmError::invalid("grid", "bench grids must be nonempty"));
        }
        if self.lengths.contains(&0) || self.dims.contains(&0) {
            return Err(SsmError::invalid("grid", "lengths and dims must be positive"));
        }
        Ok(())
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range of the samples.
pub fn median_iqr(samples: &[Duration]) -> (f64, f64) {
    let mut ns: Vec<f64> = samples.iter().map(|d| d.as_nanos() as f64).collect();
    ns.sort_by(f64::total_cmp);
    (quantile(&ns, 0.5), quantile(&ns, 0.75) - quantile(&ns, 0.25))
}

/// Random benchmark instance with a small feedback row.
pub fn bench_ssm(d: usize, seed: u64) -> Ssm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ d as u64);
    let mut draw = |scale: f64| -> Vec<f64> { (0..d).map(|_| scale * rng.gen_range(-1.0..1.0)).collect() };
    let a = normalize_stability(&draw(1.0));
    let b = draw(1.0);
    let c = draw(1.0);
    let k = draw(0.1 / d as f64);
    Ssm::new(CompanionMatrix::new(a).expect("finite"), b, c, 0.0, Some(k)).expect("consistent sizes")
}

/// Times one call of `algo` at `(l, d)`.
fn time_once(algo: Algo, ssm: &Ssm, ct: &[f64], x0: &[f64], l: usize) -> Result<Duration> {
    let start = Instant::now();
    match algo {
        Algo::Naive => {
            black_box(naive_output_filter(ssm, l));
        }
        Algo::Fast => {
            black_box(fast_output_filter(ssm.a.coeffs(), &ssm.b, ct, l)?);
        }
        Algo::FastCTilde => {
            // Summed through the per-stage timing hook.
            let mut total = Duration::ZERO;
            black_box(FilterPlan::build_timed(ssm, l, |_, t| total += t)?);
            return Ok(total);
        }
        Algo::ClosedLoopFast => {
            black_box(fast_closed_loop_rollout(ssm, x0, l)?);
        }
        Algo::ClosedLoopRecurrent => {
            black_box(closed_loop_rollout(ssm, x0, l)?);
        }
    }
    Ok(start.elapsed())
}

/// Warm-up, then `reps` timed runs of a single cell.
pub fn time_cell(algo: Algo, l: usize, d: usize, reps: usize, warmup: usize, seed: u64) -> Result<BenchRecord> {
    if reps < MIN_REPS {
        return Err(SsmError::invalid("reps", format!("must be at least {MIN_REPS}, got {reps}")));
    }
    let ssm = bench_ssm(d, seed);
    let ct = if algo == Algo::Fast { c_tilde(&ssm, l) } else { Vec::new() };
    let x0 = ssm.b.clone();
    for _ in 0..warmup {
        time_once(algo, &ssm, &ct, &x0, l)?;
    }
    let samples = (0..reps)
        .map(|_| time_once(algo, &ssm, &ct, &x0, l))
        .collect::<Result<Vec<_>>>()?;
    let (median_ns, iqr_ns) = median_iqr(&samples);
    Ok(BenchRecord {
        algo,
        l,
        d,
        median_ns: median_ns.max(1.0),
        iqr_ns,
        reps,
    })
}

/// Runs the full grid sequentially, calling `progress` after each cell.
pub fn run_bench(cfg: &BenchConfig, mut progress: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &d in &cfg.dims {
        for &l in &cfg.lengths {
            for &algo in &cfg.algos {
                let rec = time_cell(algo, l, d, cfg.reps, cfg.warmup, cfg.seed)?;
                progress(&rec);
                out.push(rec);
            }
        }
    }
    Ok(out)
}

pub fn write_bench_csv<W: Write>(records: &[BenchRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.algo.to_string(),
            r.l.to_string(),
            r.d.to_string(),
            format!("{:.0}", r.median_ns),
            format!("{:.0}", r.iqr_ns),
            r.reps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `(ln x, ln y)`.
pub fn loglog_fit(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Log-log slope of median time against `l` for one algorithm and `d`.
pub fn loglog_slope(records: &[BenchRecord], algo: Algo, d: usize) -> Option<f64> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.algo == algo && r.d == d)
        .map(|r| (r.l as f64, r.median_ns))
        .collect();
    loglog_fit(&points)
}

/// Ratios of consecutive medians along `l` (sorted ascending).
pub fn growth_ratios(records: &[BenchRecord], algo: Algo, d: usize) -> Vec<f64> {
    let mut cells: Vec<&BenchRecord> = records.iter().filter(|r| r.algo == algo && r.d == d).collect();
    cells.sort_by_key(|r| r.l);
    cells.windows(2).map(|w| w[1].median_ns / w[0].median_ns).collect()
}

/// Smallest `l` at dimension `d` from which the fast path beats the naive
/// path at every larger measured length.
pub fn crossover(records: &[BenchRecord], d: usize) -> Option<usize> {
    let median = |algo: Algo, l: usize| {
        records
            .iter()
            .find(|r| r.algo == algo && r.d == d && r.l == l)
            .map(|r| r.median_ns)
    };
    let mut lengths: Vec<usize> = records.iter().filter(|r| r.d == d).map(|r| r.l).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut found = None;
    for &l in lengths.iter().rev() {
        match (median(Algo::Fast, l), median(Algo::Naive, l)) {
            (Some(f), Some(n)) if f < n => found = Some(l),
            (Some(_), Some(_)) => break,
            _ => {}
        }
    }
    found
}
