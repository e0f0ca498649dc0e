//! Parameter fitting for companion SSMs: least squares for output and
//! feedback heads, exact adjoint gradients, gradient descent, and transfer
//! function diagnostics.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::companion::{dot, normalize_stability, unit_vector, CompanionMatrix, Ssm};
use crate::constructions::ar_to_ssm;
use crate::data::{gen_ar_series, Channels};
use crate::error::{check_finite, check_len, Result, SsmError};
use crate::filter::{scan, Scan};
use crate::model::{Network, NetworkConfig};

/// Losses above this abort gradient descent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Refinement passes applied after the normal-equation solve.
const REFINEMENT_STEPS: usize = 2;

/// `argmin ‖X cᵀ − y‖² + λ‖c‖²` by normal equations (Cholesky), followed by
/// iterative refinement on the original residual.
pub fn fit_c_least_squares(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let (n, d) = x.shape();
    check_len("fit_c_least_squares targets", n, y.len())?;
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(SsmError::invalid("ridge", format!("{ridge} must be finite and non-negative")));
    }
    if d == 0 {
        return Err(SsmError::invalid("X", "no feature columns"));
    }
    if n < d && ridge == 0.0 {
        return Err(SsmError::invalid("X", format!("{n} rows for {d} unknowns needs ridge > 0")));
    }
    check_finite("X", x.as_slice())?;
    check_finite("y", y)?;

    let y = DVector::from_column_slice(y);
    let mut gram = x.tr_mul(x);
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let chol = Cholesky::new(gram).ok_or_else(|| SsmError::Singular("normal matrix is not positive definite".into()))?;
    let mut c = chol.solve(&x.tr_mul(&y));
    for _ in 0..REFINEMENT_STEPS {
        let resid = &y - x * &c;
        let grad = x.tr_mul(&resid) - &c * ridge;
        c += chol.solve(&grad);
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(SsmError::Singular("normal equations produced non-finite values".into()));
    }
    Ok(c.as_slice().to_vec())
}

/// States `x_{k+1}` after consuming each `u_k`, from `x_0 = 0`.
pub fn record_states(ssm: &Ssm, u: &[f64]) -> Vec<Vec<f64>> {
    let mut x = vec![0.0; ssm.dim()];
    u.iter()
        .map(|&uk| {
            ssm.step_in_place(&mut x, uk);
            x.clone()
        })
        .collect()
}

/// Rows `x_{k+1}` paired with targets `series[k+1]`, for `k = warmup..n−2`.
///
/// Early states still contain the zero initial condition; `warmup = d − 1`
/// drops them for shift SSMs, whose state is then a full lag window.
pub fn one_step_design(ssm: &Ssm, series: &[f64], warmup: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if series.len() < warmup + 2 {
        return Err(SsmError::invalid("series", format!("needs more than {} samples", warmup + 1)));
    }
    let states = record_states(ssm, &series[..series.len() - 1]);
    Ok((rows_to_matrix(&states[warmup..], ssm.dim()), series[warmup + 1..].to_vec()))
}

fn rows_to_matrix(rows: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Gradients of the mean squared one-step error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub loss: f64,
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    pub dd: f64,
}

/// Loss `L = mean_k (C x_{k+1} + D u_k − t_k)²` and its exact gradients by
/// the reverse-time adjoint recurrence `λ_{k+1} = g_k Cᵀ + Aᵀ λ_{k+2}`.
pub fn bptt_gradients(ssm: &Ssm, u: &[f64], targets: &[f64]) -> Result<Gradients> {
    bptt_gradients_after(ssm, u, targets, 0)
}

/// [`bptt_gradients`] with the first `warmup` predictions left out of the loss.
pub fn bptt_gradients_after(ssm: &Ssm, u: &[f64], targets: &[f64], warmup: usize) -> Result<Gradients> {
    check_len("bptt_gradients targets", u.len(), targets.len())?;
    check_finite("u", u)?;
    check_finite("targets", targets)?;
    let len = u.len();
    if len <= warmup {
        return Err(SsmError::invalid("u", format!("sequence length must exceed the warm-up {warmup}")));
    }
    let d = ssm.dim();
    let mut states = Vec::with_capacity(len + 1);
    states.push(vec![0.0; d]);
    for &uk in u {
        let mut x = states.last().unwrap().clone();
        ssm.step_in_place(&mut x, uk);
        states.push(x);
    }

    let counted = (len - warmup) as f64;
    let mut loss = 0.0;
    let mut g = vec![0.0; len];
    for k in warmup..len {
        let e = dot(&ssm.c, &states[k + 1]) + ssm.skip * u[k] - targets[k];
        loss += e * e;
        g[k] = 2.0 * e / counted;
    }
    loss /= counted;

    let mut da = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut dc = vec![0.0; d];
    let mut dd = 0.0;
    let mut lambda = vec![0.0; d];
    for k in (0..len).rev() {
        ssm.a.apply_row_in_place(&mut lambda);
        for (l, c) in lambda.iter_mut().zip(&ssm.c) {
            *l += g[k] * c;
        }
        let last = states[k][d - 1];
        for i in 0..d {
            dc[i] += g[k] * states[k + 1][i];
            db[i] += lambda[i] * u[k];
            da[i] += lambda[i] * last;
        }
        dd += g[k] * u[k];
    }
    Ok(Gradients { loss, da, db, dc, dd })
}

/// Which parameters gradient descent updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub a: bool,
    pub b: bool,
    pub c: bool,
    pub d: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        a: true,
        b: true,
        c: true,
        d: true,
    };
    /// `a`, `B`, `C`; `D` stays fixed (one-step predictors carry no skip).
    pub const ABC: Trainable = Trainable {
        a: true,
        b: true,
        c: true,
        d: false,
    };
    pub const C_ONLY: Trainable = Trainable {
        a: false,
        b: false,
        c: true,
        d: false,
    };
}

/// How `C` is represented during descent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    #[default]
    Direct,
    /// Train `C̃ = C(I − A^ℓ)` at the given `ℓ` and recover `C` each epoch.
    /// Requires `a` frozen.
    CTilde { len: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Project `a` onto the L1 ball after every update.
    pub normalize: bool,
    pub trainable: Trainable,
    #[serde(default)]
    pub parametrization: Parametrization,
    /// Leading predictions excluded from the loss.
    #[serde(default)]
    pub warmup: usize,
    pub record_trace: bool,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            epochs: 2000,
            lr: 1e-2,
            momentum: 0.9,
            normalize: false,
            trainable: Trainable::ABC,
            parametrization: Parametrization::Direct,
            warmup: 0,
            record_trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// MSE of the one-step predictions after the last update.
    pub final_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_trace: Option<Vec<f64>>,
    pub recovered: Ssm,
    /// Max deviation of the frequency response from the target's, when a
    /// target is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_error: Option<f64>,
}

/// `C = C̃ (I − A^ℓ)^{-1}`.
pub fn c_from_c_tilde(a: &CompanionMatrix, c_tilde: &[f64], len: usize) -> Result<Vec<f64>> {
    check_len("c_from_c_tilde", a.dim(), c_tilde.len())?;
    let d = a.dim();
    let m = DMatrix::identity(d, d) - a.dense().pow(len as u32);
    let sol = m
        .transpose()
        .lu()
        .solve(&DVector::from_column_slice(c_tilde))
        .ok_or_else(|| SsmError::Singular("I − A^ℓ is singular".into()))?;
    Ok(sol.as_slice().to_vec())
}

/// Fits the one-step predictor `C x_{k+1} + D u_k ≈ series[k+1]` by gradient
/// descent with momentum.
pub fn gradient_descent_fit(ssm_init: &Ssm, series: &[f64], cfg: &GdConfig) -> Result<FitReport> {
    let d = ssm_init.dim();
    if series.len() <= d.max(1) {
        return Err(SsmError::invalid("series", format!("length {} must exceed d = {d}", series.len())));
    }
    if !(cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(SsmError::invalid("lr/momentum", "lr ≥ 0 and momentum in [0, 1) required"));
    }
    let u = &series[..series.len() - 1];
    let targets = &series[1..];
    let mut ssm = ssm_init.clone();

    // In C̃ mode the descent variable is C̃ and `M^{-T}` maps dC to dC̃.
    let c_tilde_map = match cfg.parametrization {
        Parametrization::Direct => None,
        Parametrization::CTilde { len } => {
            if cfg.trainable.a {
                return Err(SsmError::invalid("parametrization", "C̃ training needs a frozen"));
            }
            let m = DMatrix::identity(d, d) - ssm.a.dense().pow(len as u32);
            let c_tilde = (DVector::from_column_slice(&ssm.c).transpose() * &m).transpose();
            let m_inv = m.try_inverse().ok_or_else(|| SsmError::Singular("I − A^ℓ is singular".into()))?;
            Some((m_inv, c_tilde))
        }
    };
    let mut c_tilde = c_tilde_map.as_ref().map(|(_, ct)| ct.clone());

    let mut vel_a = vec![0.0; d];
    let mut vel_b = vec![0.0; d];
    let mut vel_c = vec![0.0; d];
    let mut vel_d = 0.0;
    let mut trace = cfg.record_trace.then(|| Vec::with_capacity(cfg.epochs));
    let step = |vel: &mut [f64], param: &mut [f64], grad: &[f64]| {
        for ((v, p), g) in vel.iter_mut().zip(param.iter_mut()).zip(grad) {
            *v = cfg.momentum * *v - cfg.lr * g;
            *p += *v;
        }
    };

    for epoch in 0..cfg.epochs {
        let grads = bptt_gradients_after(&ssm, u, targets, cfg.warmup)?;
        if !grads.loss.is_finite() || grads.loss > DIVERGENCE_LOSS {
            return Err(SsmError::Diverged {
                index: epoch,
                reason: format!("loss {:.3e} exceeded {DIVERGENCE_LOSS:e}; lower the learning rate", grads.loss),
            });
        }
        if let Some(t) = trace.as_mut() {
            t.push(grads.loss);
        }
        if cfg.trainable.a {
            step(&mut vel_a, ssm.a.coeffs_mut(), &grads.da);
        }
        if cfg.trainable.b {
            step(&mut vel_b, &mut ssm.b, &grads.db);
        }
        if cfg.trainable.c {
            match (&c_tilde_map, c_tilde.as_mut()) {
                (Some((m_inv, _)), Some(ct)) => {
                    let g = m_inv * DVector::from_column_slice(&grads.dc);
                    step(&mut vel_c, ct.as_mut_slice(), g.as_slice());
                    let c = ct.transpose() * m_inv;
                    ssm.c.copy_from_slice(c.as_slice());
                }
                _ => step(&mut vel_c, &mut ssm.c, &grads.dc),
            }
        }
        if cfg.trainable.d {
            vel_d = cfg.momentum * vel_d - cfg.lr * grads.dd;
            ssm.skip += vel_d;
        }
        if cfg.normalize {
            let a = normalize_stability(ssm.a.coeffs());
            ssm.a.coeffs_mut().copy_from_slice(&a);
        }
    }
    ssm.validate()?;
    let final_loss = bptt_gradients_after(&ssm, u, targets, cfg.warmup)?.loss;
    Ok(FitReport {
        final_loss,
        param_trace: trace,
        recovered: ssm,
        transfer_error: None,
    })
}

fn solve_ridge_with_fallback(x: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    match fit_c_least_squares(x, y, 0.0) {
        Ok(k) => Ok(k),
        Err(SsmError::Singular(_)) | Err(SsmError::InvalidArgument { .. }) => {
            let d = x.ncols() as f64;
            let trace: f64 = x.iter().map(|v| v * v).sum();
            fit_c_least_squares(x, y, (1e-10 * trace / d).max(1e-12))
        }
        Err(e) => Err(e),
    }
}

/// Least-squares feedback rows: `K_i = argmin Σ_k (K_i x^{(i)}_{k+1} − ū_i[k+1])²`.
///
/// `states[i][k]` is channel `i`'s state after consuming `ū_i[k]`. A
/// rank-deficient state matrix falls back to a tiny ridge.
pub fn fit_closed_loop_k(decoder_inputs: &Channels, states: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    check_len("fit_closed_loop_k channels", decoder_inputs.len(), states.len())?;
    decoder_inputs
        .iter()
        .zip(states)
        .map(|(ubar, xs)| {
            check_len("fit_closed_loop_k states", ubar.len(), xs.len())?;
            if ubar.len() < 2 {
                return Err(SsmError::invalid("decoder_inputs", "need at least two steps"));
            }
            let d = xs[0].len();
            let x = rows_to_matrix(&xs[..xs.len() - 1], d);
            solve_ridge_with_fallback(&x, &ubar[1..])
        })
        .collect()
}

/// Fits every decoder SSM's `K` (predicting its own next input) and `C`
/// (predicting the next value of the feature it reads out to) by least
/// squares over the given training sequences. Both heads carry equal weight,
/// so the joint problem separates into two independent fits.
pub fn fit_decoder_heads(net: &mut Network, sequences: &[Channels], ridge: f64) -> Result<()> {
    let s = net.decoder.len();
    let m = net.input_width();
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); s];
    let mut k_targets: Vec<Vec<f64>> = vec![Vec::new(); s];
    let mut c_targets: Vec<Vec<f64>> = vec![Vec::new(); s];
    let owner: Vec<usize> = (0..s)
        .map(|j| {
            (0..m)
                .max_by(|&a, &b| net.readout.weights[a][j].abs().total_cmp(&net.readout.weights[b][j].abs()))
                .unwrap_or(0)
        })
        .collect();
    for seq in sequences {
        let z = net.decoder_inputs(seq)?;
        let len = z[0].len();
        for i in 0..s {
            let xs = record_states(&net.decoder[i], &z[i][..len - 1]);
            rows[i].extend(xs);
            k_targets[i].extend_from_slice(&z[i][1..]);
            c_targets[i].extend_from_slice(&seq[owner[i]][1..]);
        }
    }
    let readout_gain: Vec<f64> = (0..s).map(|j| net.readout.weights[owner[j]][j]).collect();
    for i in 0..s {
        let d = net.decoder[i].dim();
        let x = rows_to_matrix(&rows[i], d);
        let k = fit_c_least_squares(&x, &k_targets[i], ridge).or_else(|_| solve_ridge_with_fallback(&x, &k_targets[i]))?;
        let c = fit_c_least_squares(&x, &c_targets[i], ridge).or_else(|_| solve_ridge_with_fallback(&x, &c_targets[i]))?;
        // The readout mixes channels; fitting each channel to its feature and
        // normalizing by the readout column keeps y on the feature's scale
        // when channels of one feature are averaged.
        let share = owner.iter().filter(|&&o| o == owner[i]).count() as f64;
        let gain = readout_gain[i] * share;
        let decoder = &mut net.decoder[i];
        decoder.k = Some(k);
        decoder.c = if gain != 0.0 { c.iter().map(|v| v / gain).collect() } else { c };
    }
    Ok(())
}

/// `H(e^{iω_j}) = C(e^{iω_j} I − A)^{-1} B + D` on `ω_j = πj/(n−1)`.
///
/// Grid points at (numerical) eigenvalues give an infinite response.
pub fn frequency_response(ssm: &Ssm, n_points: usize) -> Result<Vec<Complex64>> {
    if n_points < 2 {
        return Err(SsmError::invalid("n_points", "need at least two grid points"));
    }
    let d = ssm.dim();
    let a = ssm.a.dense().map(|v| Complex64::new(v, 0.0));
    let b = DVector::from_iterator(d, ssm.b.iter().map(|&v| Complex64::new(v, 0.0)));
    let c = DVector::from_iterator(d, ssm.c.iter().map(|&v| Complex64::new(v, 0.0)));
    Ok(frequency_grid(n_points)
        .into_iter()
        .map(|omega| {
            let z = Complex64::from_polar(1.0, omega);
            let lu = (DMatrix::identity(d, d) * z - &a).lu();
            let u = lu.u();
            let pivots = (0..d).map(|i| u[(i, i)].norm());
            let (lo, hi) = pivots.fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p), hi.max(p)));
            if lo <= 1e-12 * hi.max(1.0) {
                return Complex64::new(f64::INFINITY, 0.0);
            }
            match lu.solve(&b) {
                Some(v) => c.dot(&v) + ssm.skip,
                None => Complex64::new(f64::INFINITY, 0.0),
            }
        })
        .collect())
}

pub fn frequency_grid(n_points: usize) -> Vec<f64> {
    (0..n_points)
        .map(|j| std::f64::consts::PI * j as f64 / (n_points - 1) as f64)
        .collect()
}

/// Max pointwise deviation between two responses on the same grid.
pub fn transfer_error(fit: &[Complex64], target: &[Complex64]) -> Result<f64> {
    check_len("transfer_error grid", target.len(), fit.len())?;
    Ok(fit.iter().zip(target).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponsePoint {
    pub omega: f64,
    pub re: f64,
    pub im: f64,
    pub magnitude: f64,
}

pub fn response_points(response: &[Complex64]) -> Vec<ResponsePoint> {
    frequency_grid(response.len())
        .into_iter()
        .zip(response)
        .map(|(omega, h)| ResponsePoint {
            omega,
            re: h.re,
            im: h.im,
            magnitude: h.norm(),
        })
        .collect()
}

/// CSV with columns `omega,re,im,magnitude`.
pub fn write_response_csv<W: Write>(writer: W, response: &[Complex64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in response_points(response) {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// AR coefficients whose characteristic roots are `e^{±iω_j}`: a noiseless
/// series is a sum of undamped sinusoids at the given frequencies.
pub fn sinusoidal_ar(frequencies: &[f64]) -> Vec<f64> {
    // Multiply out Π_j (1 − 2cos ω_j z^{-1} + z^{-2}).
    let mut poly = vec![1.0];
    for &w in frequencies {
        let factor = [1.0, -2.0 * w.cos(), 1.0];
        let mut next = vec![0.0; poly.len() + 2];
        for (i, p) in poly.iter().enumerate() {
            for (j, f) in factor.iter().enumerate() {
                next[i + j] += p * f;
            }
        }
        poly = next;
    }
    poly[1..].iter().map(|c| -c).collect()
}

/// Default AR targets for orders 2, 4 and 6: sums of 1, 2 and 3 sinusoids
/// at well-separated frequencies.
pub fn default_ar_coefficients(p: usize) -> Result<Vec<f64>> {
    let freqs: &[f64] = match p {
        2 => &[FREQS_2],
        4 => &FREQS_4,
        6 => &FREQS_6,
        _ => return Err(SsmError::invalid("p", format!("{p} is not one of 2, 4, 6"))),
    };
    Ok(sinusoidal_ar(freqs))
}

const FREQS_2: f64 = 1.2;
const FREQS_4: [f64; 2] = [0.7, 2.1];
const FREQS_6: [f64; 3] = [0.5, 1.5, 2.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Exact least squares for `C` on the shift SSM.
    Ls,
    /// Gradient descent on `C` with `a = 0`, `B = e_1` fixed.
    Gd,
    /// Gradient descent on `a`, `B` and `C` from a random start.
    GdFull,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArExperiment {
    pub p: usize,
    pub mode: FitMode,
    /// Training samples.
    pub length: usize,
    /// Held-out samples following the training range.
    pub holdout: usize,
    pub grid: usize,
    pub gd: GdConfig,
    pub seed: u64,
}

impl ArExperiment {
    pub fn new(p: usize, mode: FitMode) -> Self {
        ArExperiment {
            p,
            mode,
            length: 512,
            holdout: 50,
            grid: 256,
            gd: GdConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArExperimentReport {
    pub phi: Vec<f64>,
    pub fit: FitReport,
    /// One-step MSE over the held-out range.
    pub holdout_mse: f64,
    pub seconds: f64,
    #[serde(skip)]
    pub response: Vec<Complex64>,
}

/// Generates a noiseless AR(p) series, fits a `d = p` companion SSM and
/// compares its frequency response with the generating one.
pub fn run_ar_experiment(exp: &ArExperiment) -> Result<ArExperimentReport> {
    let start = std::time::Instant::now();
    let phi = default_ar_coefficients(exp.p)?;
    let p = exp.p;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(exp.seed);
    let init: Vec<f64> = (0..p).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
    let mut series = gen_ar_series(&phi, exp.length + exp.holdout, &init, 0.0, exp.seed)?;
    // Unit RMS over the training range. Scaling (unlike centering) leaves the
    // recursion exact.
    let rms = (series[..exp.length].iter().map(|v| v * v).sum::<f64>() / exp.length as f64).sqrt();
    if rms > 0.0 {
        series.iter_mut().for_each(|v| *v /= rms);
    }
    let train = &series[..exp.length];

    let shift = Ssm::shift_with_output(vec![0.0; p])?;
    let mut fit = match exp.mode {
        FitMode::Ls => {
            let (x, y) = one_step_design(&shift, train, p - 1)?;
            let c = fit_c_least_squares(&x, &y, 0.0)?;
            let recovered = Ssm::shift_with_output(c)?;
            let final_loss = bptt_gradients_after(&recovered, &train[..train.len() - 1], &train[1..], p - 1)?.loss;
            FitReport {
                final_loss,
                param_trace: None,
                recovered,
                transfer_error: None,
            }
        }
        FitMode::Gd => {
            let cfg = GdConfig {
                trainable: Trainable::C_ONLY,
                warmup: exp.gd.warmup.max(p - 1),
                ..exp.gd.clone()
            };
            gradient_descent_fit(&shift, train, &cfg)?
        }
        FitMode::GdFull => {
            let mut init = Ssm::shift_with_output(vec![0.0; p])?;
            let normal = rand_distr::Normal::new(0.0, 0.1).unwrap();
            for v in init.a.coeffs_mut().iter_mut().chain(init.c.iter_mut()) {
                *v = rand_distr::Distribution::sample(&normal, &mut rng);
            }
            init.b = unit_vector(p, 0);
            let cfg = GdConfig {
                trainable: Trainable::ABC,
                warmup: exp.gd.warmup.max(p - 1),
                ..exp.gd.clone()
            };
            gradient_descent_fit(&init, train, &cfg)?
        }
    };

    let target = frequency_response(&ar_to_ssm(&phi)?, exp.grid)?;
    let response = frequency_response(&fit.recovered, exp.grid)?;
    fit.transfer_error = Some(transfer_error(&response, &target)?);

    let Scan { post, .. } = scan(&fit.recovered, &series[..series.len() - 1]);
    let held = exp.length - 1..series.len() - 1;
    let holdout_mse = if exp.holdout == 0 {
        0.0
    } else {
        held.clone().map(|k| (post[k] - series[k + 1]).powi(2)).sum::<f64>() / held.len() as f64
    };
    Ok(ArExperimentReport {
        phi,
        fit,
        holdout_mse,
        seconds: start.elapsed().as_secs_f64(),
        response,
    })
}

/// Setup for checking that a closed-loop model fitted at one horizon keeps
/// its accuracy when rolled out further.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonTransferConfig {
    pub network: NetworkConfig,
    /// AR pole radius and angle of the generating process.
    pub pole_radius: f64,
    pub pole_angle: f64,
    pub noise_std: f64,
    pub length: usize,
    /// Horizon used to select the fit.
    pub fit_horizon: usize,
    /// Horizon the fitted model is evaluated at.
    pub long_horizon: usize,
    /// Ridge values tried; the one with the lowest validation MSE at
    /// `fit_horizon` is kept.
    pub ridges: Vec<f64>,
    pub stride: usize,
}

impl Default for HorizonTransferConfig {
    fn default() -> Self {
        HorizonTransferConfig {
            network: NetworkConfig {
                m: 1,
                s: 4,
                d: 16,
                lag: 336,
                horizon: 192,
                n_diff: 0,
                n_ma_residual: 0,
                open_layers: 1,
                ffn: false,
                encoder: crate::model::EncoderKind::RepeatedIdentity,
                seed: 0,
            },
            pole_radius: 0.995,
            pole_angle: 0.2,
            noise_std: 0.1,
            length: 12_000,
            fit_horizon: 192,
            long_horizon: 576,
            ridges: vec![0.0, 1e-8, 1e-6, 1e-4, 1e-2],
            stride: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonTransferReport {
    pub ridge: f64,
    /// Test MSE averaged over `fit_horizon` steps.
    pub fit_horizon_mse: f64,
    /// Test MSE averaged over `long_horizon` steps.
    pub long_horizon_mse: f64,
    pub ratio: f64,
    pub test_windows: usize,
}

fn horizon_mse(net: &Network, windows: &[crate::data::SeriesWindow], h: usize) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        let pred = net.forecast(&w.lag, h)?;
        let truth: Channels = w.horizon.iter().map(|row| row[..h].to_vec()).collect();
        total += crate::data::metrics(&pred, &truth)?.mse;
    }
    Ok(total / windows.len() as f64)
}

/// Fits the decoder heads on the training split of a noisy AR(2) series,
/// selects the ridge by validation MSE at `fit_horizon`, then compares test
/// MSE at `fit_horizon` and `long_horizon`.
pub fn run_horizon_transfer(cfg: &HorizonTransferConfig) -> Result<HorizonTransferReport> {
    let (r, theta) = (cfg.pole_radius, cfg.pole_angle);
    let phi = [2.0 * r * theta.cos(), -r * r];
    let raw = gen_ar_series(&phi, cfg.length, &[0.0, 0.0], cfg.noise_std, cfg.network.seed)?;
    let split = crate::data::SplitFractions::default();
    let (train_end, val_end) = split.bounds(raw.len())?;
    let (series, stats) = crate::data::standardize(&vec![raw], split.train)?;
    let lag = cfg.network.lag;
    let long = cfg.long_horizon.max(cfg.fit_horizon);

    let slice = |lo: usize, hi: usize| -> Channels { series.iter().map(|row| row[lo..hi].to_vec()).collect() };
    let train = crate::data::window_with_stats(&slice(0, train_end), &stats, lag, 0, cfg.stride)?;
    let val = crate::data::window_with_stats(
        &slice(train_end - lag, val_end),
        &stats,
        lag,
        cfg.fit_horizon,
        cfg.stride,
    )?;
    let test = crate::data::window_with_stats(&slice(val_end - lag, series[0].len()), &stats, lag, long, cfg.stride)?;
    let sequences: Vec<Channels> = train.into_iter().map(|w| w.lag).collect();

    let mut best: Option<(f64, f64, Network)> = None;
    for &ridge in &cfg.ridges {
        let mut net = crate::model::build_forecast_network(&cfg.network)?;
        if fit_decoder_heads(&mut net, &sequences, ridge).is_err() {
            continue;
        }
        let mse = horizon_mse(&net, &val, cfg.fit_horizon)?;
        if mse.is_finite() && best.as_ref().is_none_or(|(b, _, _)| mse < *b) {
            best = Some((mse, ridge, net));
        }
    }
    let (_, ridge, net) = best.ok_or_else(|| SsmError::Singular("no ridge value produced a usable fit".into()))?;
    let fit_horizon_mse = horizon_mse(&net, &test, cfg.fit_horizon)?;
    let long_horizon_mse = horizon_mse(&net, &test, long)?;
    Ok(HorizonTransferReport {
        ridge,
        fit_horizon_mse,
        long_horizon_mse,
        ratio: long_horizon_mse / fit_horizon_mse,
        test_windows: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_examples() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let c = [0.7, -1.3];
        let y: Vec<f64> = (0..4).map(|i| x[(i, 0)] * c[0] + x[(i, 1)] * c[1]).collect();
        let got = fit_c_least_squares(&x, &y, 0.0).unwrap();
        assert!((got[0] - c[0]).abs() < 1e-12 && (got[1] - c[1]).abs() < 1e-12);
        let shrunk = fit_c_least_squares(&x, &y, 1e12).unwrap();
        assert!(shrunk.iter().all(|v| v.abs() < 1e-10));
        assert!(matches!(
            fit_c_least_squares(&DMatrix::zeros(3, 2), &[0.0; 3], 0.0),
            Err(SsmError::Singular(_))
        ));
    }

    #[test]
    fn least_squares_recovers_ar2() {
        let phi = [1.6, -0.8];
        let series = gen_ar_series(&phi, 200, &[1.0, 0.5], 0.0, 0).unwrap();
        let shift = Ssm::shift_with_output(vec![0.0; 2]).unwrap();
        let (x, y) = one_step_design(&shift, &series, 1).unwrap();
        let c = fit_c_least_squares(&x, &y[..], 0.0).unwrap();
        assert!((c[0] - phi[0]).abs() < 1e-9 && (c[1] - phi[1]).abs() < 1e-9);
    }

    #[test]
    fn gradients_vanish_for_a_when_c_zero() {
        let ssm = Ssm::new(CompanionMatrix::new(vec![0.2, -0.3]).unwrap(), vec![1.0, 0.5], vec![0.0; 2], 0.0, None)
            .unwrap();
        let g = bptt_gradients(&ssm, &[1.0, -1.0, 2.0, 0.5], &[0.3, 0.1, -0.2, 1.0]).unwrap();
        assert_eq!(g.da, vec![0.0; 2]);
        assert_eq!(g.db, vec![0.0; 2]);
        assert!(g.dd != 0.0 && g.dc.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn scalar_gradients_closed_form() {
        // x1 = b u0, x2 = a b u0 + b u1, x3 = a² b u0 + a b u1 + b u2; p_k = c x_{k+1} + D u_k.
        let (a, b, c, dd) = (0.4, 1.5, -0.7, 0.2);
        let u = [1.0, -2.0, 0.5];
        let t = [0.3, 0.0, -1.0];
        let ssm = Ssm::new(CompanionMatrix::new(vec![a]).unwrap(), vec![b], vec![c], dd, None).unwrap();
        let x = [b * u[0], a * b * u[0] + b * u[1], a * a * b * u[0] + a * b * u[1] + b * u[2]];
        let dx_da = [0.0, b * u[0], 2.0 * a * b * u[0] + b * u[1]];
        let dx_db = [u[0], a * u[0] + u[1], a * a * u[0] + a * u[1] + u[2]];
        let e: Vec<f64> = (0..3).map(|k| c * x[k] + dd * u[k] - t[k]).collect();
        let m = |f: &dyn Fn(usize) -> f64| (0..3).map(|k| 2.0 * e[k] * f(k) / 3.0).sum::<f64>();
        let g = bptt_gradients(&ssm, &u, &t).unwrap();
        assert!((g.da[0] - m(&|k| c * dx_da[k])).abs() < 1e-14);
        assert!((g.db[0] - m(&|k| c * dx_db[k])).abs() < 1e-14);
        assert!((g.dc[0] - m(&|k| x[k])).abs() < 1e-14);
        assert!((g.dd - m(&|k| u[k])).abs() < 1e-14);
        assert!((g.loss - e.iter().map(|v| v * v).sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let series = gen_ar_series(&[0.5, 0.3], 50, &[1.0, 0.0], 0.0, 0).unwrap();
        let init = Ssm::new(CompanionMatrix::new(vec![0.1, 0.2]).unwrap(), vec![1.0, 0.0], vec![0.3, 0.3], 0.0, None)
            .unwrap();
        let cfg = GdConfig {
            epochs: 10,
            lr: 0.0,
            ..GdConfig::default()
        };
        assert_eq!(gradient_descent_fit(&init, &series, &cfg).unwrap().recovered, init);
    }

    #[test]
    fn divergence_is_reported() {
        let series: Vec<f64> = (0..64).map(|k| (k as f64 * 0.3).sin() * 100.0).collect();
        let init = Ssm::shift_with_output(vec![0.0; 2]).unwrap();
        let cfg = GdConfig {
            epochs: 200,
            lr: 10.0,
            trainable: Trainable::C_ONLY,
            ..GdConfig::default()
        };
        assert!(matches!(gradient_descent_fit(&init, &series, &cfg), Err(SsmError::Diverged { .. })));
    }

    #[test]
    fn normalization_keeps_l1_ball() {
        let series = gen_ar_series(&default_ar_coefficients(4).unwrap(), 128, &[0.5, -0.2, 0.1, 0.3], 0.0, 0).unwrap();
        let init = Ssm::new(
            CompanionMatrix::new(vec![0.1, 0.1, 0.1, 0.1]).unwrap(),
            unit_vector(4, 0),
            vec![0.2; 4],
            0.0,
            None,
        )
        .unwrap();
        let cfg = GdConfig {
            epochs: 20,
            lr: 5e-2,
            normalize: true,
            ..GdConfig::default()
        };
        let fit = gradient_descent_fit(&init, &series, &cfg).unwrap();
        let l1: f64 = fit.recovered.a.coeffs().iter().map(|v| v.abs()).sum();
        assert!((l1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_loop_k_examples() {
        let phi = [1.2, -0.5];
        let series = gen_ar_series(&phi, 120, &[1.0, 0.0], 0.0, 0).unwrap();
        let shift = Ssm::shift_with_output(vec![0.0; 2]).unwrap();
        let states = record_states(&shift, &series);
        let k = fit_closed_loop_k(&vec![series.clone()], &[states]).unwrap();
        assert!((k[0][0] - phi[0]).abs() < 1e-9 && (k[0][1] - phi[1]).abs() < 1e-9);

        let zeros = vec![0.0; 30];
        let states = record_states(&shift, &zeros);
        let k = fit_closed_loop_k(&vec![zeros], &[states]).unwrap();
        assert_eq!(k[0], vec![0.0, 0.0]);
    }

    #[test]
    fn frequency_response_examples() {
        let phi = [0.5, -0.25, 0.1];
        let h = frequency_response(&ar_to_ssm(&phi).unwrap(), 16).unwrap();
        assert!((h[0] - Complex64::new(phi.iter().sum(), 0.0)).norm() < 1e-12);
        for (omega, hj) in frequency_grid(16).iter().zip(&h) {
            let z = Complex64::from_polar(1.0, *omega);
            let want: Complex64 = phi.iter().enumerate().map(|(i, p)| p * z.powi(-(i as i32 + 1))).sum();
            assert!((hj - want).norm() < 1e-12);
        }
        let delay = Ssm::shift_with_output(vec![-2.5, 0.0, 0.0]).unwrap();
        assert!(frequency_response(&delay, 32).unwrap().iter().all(|h| (h.norm() - 2.5).abs() < 1e-12));
        let mut direct = Ssm::shift_with_output(vec![0.0; 2]).unwrap();
        direct.skip = 1.0;
        assert!(frequency_response(&direct, 8).unwrap().iter().all(|h| (h - 1.0).norm() < 1e-15));
        let unit = Ssm::new(CompanionMatrix::new(vec![1.0]).unwrap(), vec![1.0], vec![1.0], 0.0, None).unwrap();
        assert!(frequency_response(&unit, 4).unwrap()[0].re.is_infinite());
        assert!(frequency_response(&unit, 1).is_err());
    }

    #[test]
    fn sinusoidal_ar_has_unit_roots() {
        let phi = sinusoidal_ar(&[0.3]);
        assert!((phi[0] - 2.0 * 0.3f64.cos()).abs() < 1e-15 && phi[1] == -1.0);
        assert_eq!(default_ar_coefficients(6).unwrap().len(), 6);
        assert!(default_ar_coefficients(3).is_err());
    }

    #[test]
    fn response_csv_columns() {
        let mut buf = Vec::new();
        write_response_csv(&mut buf, &[Complex64::new(3.0, 4.0), Complex64::new(1.0, 0.0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("omega,re,im,magnitude\n0.0,3.0,4.0,5.0\n"));
    }
}
