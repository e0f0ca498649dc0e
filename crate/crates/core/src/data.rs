//! Synthetic series, CSV ingestion, standardization, windowing and metrics.
//!
//! Multivariate series are stored feature-major: `series[i][t]` is feature `i`
//! at time `t`.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::companion::dot;
use crate::error::{check_finite, check_len, Result, SsmError};

/// Feature-major real matrix (`channels × time`).
pub type Channels = Vec<Vec<f64>>;

/// Generated values beyond this magnitude abort generation.
pub const OVERFLOW_GUARD: f64 = 1e150;

/// Train/validation/test split by chronological fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    /// `(train_end, val_end)` indices for a series of length `n`.
    pub fn bounds(&self, n: usize) -> Result<(usize, usize)> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SsmError::invalid("split", format!("fractions {parts:?} must be in [0, 1] and sum to 1")));
        }
        // The epsilon keeps exact products such as 0.8·1000 from landing on 799.
        let cut = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
        let train_end = cut(self.train);
        let val_end = cut(self.train + self.val);
        Ok((train_end, val_end.min(n)))
    }
}

/// Simulates `u_k = Σ φ_i u_{k−i} + ε_k`.
///
/// `init` is the state before the first generated sample, most recent first
/// (`init[0] = u_{−1}`). The returned series starts with those `p` values in
/// chronological order, followed by `n − p` generated ones.
pub fn gen_ar_series(phi: &[f64], n: usize, init: &[f64], noise_std: f64, seed: u64) -> Result<Vec<f64>> {
    let p = phi.len();
    if p == 0 {
        return Err(SsmError::invalid("phi", "AR order must be at least 1"));
    }
    check_len("gen_ar_series init", p, init.len())?;
    check_finite("phi", phi)?;
    check_finite("init", init)?;
    if n <= p {
        return Err(SsmError::invalid("n", format!("length {n} must exceed the order {p}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(SsmError::invalid("noise_std", format!("{noise_std} must be finite and non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_std).map_err(|e| SsmError::invalid("noise_std", e.to_string()))?;

    let mut out: Vec<f64> = init.iter().rev().copied().collect();
    let mut recent = init.to_vec();
    for index in p..n {
        let mut u = dot(phi, &recent);
        if noise_std > 0.0 {
            u += normal.sample(&mut rng);
        }
        if !u.is_finite() || u.abs() > OVERFLOW_GUARD {
            return Err(SsmError::Diverged {
                index,
                reason: format!("|u| exceeded {OVERFLOW_GUARD:e}; the AR polynomial is explosive"),
            });
        }
        recent.rotate_right(1);
        recent[0] = u;
        out.push(u);
    }
    Ok(out)
}

/// Reads numeric columns from a headed, comma-separated file.
///
/// With an empty `value_columns`, every column except the first (the
/// timestamp) is loaded.
pub fn load_csv(path: impl AsRef<Path>, value_columns: &[String]) -> Result<Channels> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let names: Vec<String> = if value_columns.is_empty() {
        headers.iter().skip(1).cloned().collect()
    } else {
        value_columns.to_vec()
    };
    let mut indices = Vec::with_capacity(names.len());
    for name in &names {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SsmError::MissingColumn {
                missing: name.clone(),
                available: headers.clone(),
            })?;
        indices.push(idx);
    }
    if indices.is_empty() {
        return Err(SsmError::invalid("value_columns", "no value columns to load"));
    }

    let mut series: Channels = vec![Vec::new(); indices.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (feature, &col) in indices.iter().enumerate() {
            let cell = record.get(col).unwrap_or("");
            let value: f64 = cell.trim().parse().map_err(|_| SsmError::NonNumeric {
                row,
                column: names[feature].clone(),
                value: cell.to_owned(),
            })?;
            series[feature].push(value);
        }
    }
    Ok(series)
}

/// Mean and (population) standard deviation of one feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

impl FeatureStats {
    pub const IDENTITY: FeatureStats = FeatureStats { mean: 0.0, std: 1.0 };

    pub fn of(values: &[f64]) -> FeatureStats {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        FeatureStats { mean, std: var.sqrt() }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

fn check_rectangular(series: &Channels) -> Result<usize> {
    let n = series.first().map_or(0, Vec::len);
    for row in series {
        check_len("series length across features", n, row.len())?;
    }
    Ok(n)
}

/// Normalizes each feature by the mean and std of its first
/// `⌊train_fraction·n⌋` samples.
pub fn standardize(series: &Channels, train_fraction: f64) -> Result<(Channels, Vec<FeatureStats>)> {
    let n = check_rectangular(series)?;
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(SsmError::invalid("train_fraction", format!("{train_fraction} is outside (0, 1]")));
    }
    let train_end = (train_fraction * n as f64).floor() as usize;
    if train_end == 0 {
        return Err(SsmError::invalid("train_fraction", "training slice is empty"));
    }
    let mut stats = Vec::with_capacity(series.len());
    let mut out = Vec::with_capacity(series.len());
    for (feature, row) in series.iter().enumerate() {
        let s = FeatureStats::of(&row[..train_end]);
        if !(s.std > 0.0) || !s.std.is_finite() {
            return Err(SsmError::ZeroVariance { feature });
        }
        out.push(row.iter().map(|&v| s.forward(v)).collect());
        stats.push(s);
    }
    Ok((out, stats))
}

pub fn inverse_standardize(series: &Channels, stats: &[FeatureStats]) -> Result<Channels> {
    check_len("inverse_standardize features", stats.len(), series.len())?;
    Ok(series
        .iter()
        .zip(stats)
        .map(|(row, s)| row.iter().map(|&v| s.inverse(v)).collect())
        .collect())
}

/// A lag window and the horizon that follows it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesWindow {
    /// Index of the first lag sample in the source series.
    pub start: usize,
    pub lag: Channels,
    pub horizon: Channels,
    pub stats: Vec<FeatureStats>,
}

/// Sliding windows; count is `⌊(n − ℓ − h)/stride⌋ + 1`.
pub fn window(series: &Channels, lag: usize, horizon: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
    let stats = vec![FeatureStats::IDENTITY; series.len()];
    window_with_stats(series, &stats, lag, horizon, stride)
}

/// [`window`] over an already standardized series, attaching its statistics.
pub fn window_with_stats(
    series: &Channels,
    stats: &[FeatureStats],
    lag: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<SeriesWindow>> {
    let n = check_rectangular(series)?;
    check_len("window stats", series.len(), stats.len())?;
    if stats.iter().any(|s| !(s.std > 0.0)) {
        return Err(SsmError::invalid("stats", "std entries must be positive"));
    }
    if lag == 0 || stride == 0 {
        return Err(SsmError::invalid("lag/stride", "must be at least 1"));
    }
    if n < lag + horizon {
        return Err(SsmError::invalid(
            "series",
            format!("length {n} is shorter than lag {lag} + horizon {horizon}"),
        ));
    }
    let count = (n - lag - horizon) / stride + 1;
    Ok((0..count)
        .map(|w| {
            let start = w * stride;
            let slice = |lo: usize, hi: usize| series.iter().map(|row| row[lo..hi].to_vec()).collect();
            SeriesWindow {
                start,
                lag: slice(start, start + lag),
                horizon: slice(start + lag, start + lag + horizon),
                stats: stats.to_vec(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

pub fn metrics(pred: &Channels, truth: &Channels) -> Result<Metrics> {
    check_len("metrics features", truth.len(), pred.len())?;
    let mut count = 0usize;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        check_len("metrics horizon", t.len(), p.len())?;
        for (a, b) in p.iter().zip(t) {
            let e = a - b;
            se += e * e;
            ae += e.abs();
        }
        count += p.len();
    }
    if count == 0 {
        return Err(SsmError::invalid("pred", "no values to score"));
    }
    Ok(Metrics {
        mse: se / count as f64,
        mae: ae / count as f64,
    })
}

/// One line of the forecast CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub window: usize,
    pub step: usize,
    pub feature: usize,
    pub prediction: f64,
    pub truth: Option<f64>,
}

/// Writes `window,step,feature,prediction,truth`; `truth` is empty when
/// unknown.
pub fn write_forecast_csv<W: Write>(writer: W, rows: &[ForecastRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
