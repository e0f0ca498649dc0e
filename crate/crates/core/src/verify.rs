//! Randomized oracle-equivalence suites.
//!
//! Each suite compares a fast path with an independent reference over seeded
//! random instances and reports the worst error. Trial `i` draws from stream
//! `i` of the seeded generator, so results do not depend on scheduling.

use nalgebra::{DMatrix, DVector, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::companion::{normalize_stability, CompanionMatrix, Ssm};
use crate::constructions::{arma_shifted_ssm, arma_two_head, lti_to_companion, simulate_two_head};
use crate::error::Result;
use crate::exec::{map_indexed, Execution};
use crate::filter::{
    apply_filter, closed_loop_rollout, fast_closed_loop_rollout, naive_output_filter, scan, FilterPlan,
};
use crate::train::bptt_gradients;

pub const FILTER_TOLERANCE: f64 = 1e-7;
pub const CONVOLUTION_TOLERANCE: f64 = 1e-8;
pub const CLOSED_LOOP_TOLERANCE: f64 = 1e-7;
pub const CONSTRUCTION_TOLERANCE: f64 = 1e-8;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Gradient components below this in magnitude are compared absolutely.
pub const GRADIENT_ABS_FLOOR: f64 = 1e-7;
pub const FD_STEP: f64 = 1e-5;

pub const FILTER_STATE_SIZES: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];
pub const FILTER_LENGTHS: [usize; 5] = [1, 2, 16, 720, 1024];

/// Deliberate defects for checking that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Shift the fast filter by one tap before it is compared or applied.
    TapMisalignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<Fault>,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            trials: 200,
            fault: None,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Parameters of the worst failing instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

struct Trial {
    error: f64,
    instance: Value,
    fallback: bool,
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn summarize(name: &str, tolerance: f64, trials: Vec<Result<Trial>>) -> SuiteReport {
    let n = trials.len();
    let mut max_error = 0.0f64;
    let mut worst: Option<Value> = None;
    let mut fallbacks = 0;
    for (i, t) in trials.into_iter().enumerate() {
        let (error, instance) = match t {
            Ok(t) => {
                fallbacks += usize::from(t.fallback);
                (t.error, t.instance)
            }
            Err(e) => (f64::INFINITY, json!({ "trial": i, "error": e.to_string() })),
        };
        // NaN must count as a failure.
        let error = if error.is_nan() { f64::INFINITY } else { error };
        if error > max_error || (worst.is_none() && error >= tolerance) {
            max_error = max_error.max(error);
            if error >= tolerance {
                worst = Some(instance);
            }
        }
    }
    SuiteReport {
        name: name.to_owned(),
        trials: n,
        max_error,
        tolerance,
        passed: max_error < tolerance,
        failing: worst,
        note: (fallbacks > 0).then(|| format!("{fallbacks} instance(s) evaluated on the reduced-radius contour")),
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random SSM with L1-normalized `a` and uniform `B`, `C` in `[-1, 1]`.
pub fn random_ssm(rng: &mut ChaCha8Rng, d: usize) -> Ssm {
    let a = normalize_stability(&uniform_vec(rng, d));
    let b = uniform_vec(rng, d);
    let c = uniform_vec(rng, d);
    Ssm::new(CompanionMatrix::new(a).expect("finite"), b, c, 0.0, None).expect("consistent sizes")
}

/// Random SSM with a feedback row `K` scaled so that `A + BK` has spectral
/// radius at most one.
pub fn random_closed_loop_ssm(rng: &mut ChaCha8Rng, d: usize) -> Ssm {
    let mut ssm = random_ssm(rng, d);
    let mut k: Vec<f64> = uniform_vec(rng, d).iter().map(|v| v / d as f64).collect();
    // `A` alone may sit on the unit circle; halving only has to reach it.
    for _ in 0..64 {
        ssm.k = Some(k.clone());
        if spectral_radius(&dense_closed_loop(&ssm)).is_some_and(|r| r <= 1.0 + 1e-9) {
            return ssm;
        }
        k.iter_mut().for_each(|v| *v *= 0.5);
    }
    ssm.k = Some(vec![0.0; d]);
    ssm
}

fn dense_closed_loop(ssm: &Ssm) -> DMatrix<f64> {
    let b = DVector::from_column_slice(&ssm.b);
    let k = DVector::from_column_slice(ssm.k.as_deref().unwrap_or(&[]));
    ssm.a.dense() + b * k.transpose()
}

/// Spectral radius, or `None` when the Schur iteration does not converge.
fn spectral_radius(m: &DMatrix<f64>) -> Option<f64> {
    Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .map(|s| s.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// `max |x − reference|` divided by `max(1, max |reference|)`.
pub fn scaled_diff(x: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    max_abs_diff(x, reference) / scale
}

fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() {
        return f64::INFINITY;
    }
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn inject(fault: Option<Fault>, f: &mut [f64]) {
    if fault == Some(Fault::TapMisalignment) && !f.is_empty() {
        f.rotate_right(1);
        f[0] = 0.0;
    }
}

fn ssm_json(ssm: &Ssm) -> Value {
    serde_json::to_value(ssm).unwrap_or(Value::Null)
}

/// Fast filter (with contour fallback) against structured powering.
pub fn filter_suite(opts: &VerifyOptions) -> SuiteReport {
    let trials = map_indexed(opts.exec, opts.trials, |i| {
        let mut rng = trial_rng(opts.seed, i);
        let d = FILTER_STATE_SIZES[i % FILTER_STATE_SIZES.len()];
        let len = FILTER_LENGTHS[(i / FILTER_STATE_SIZES.len() + i) % FILTER_LENGTHS.len()];
        let ssm = random_ssm(&mut rng, d);
        let plan = FilterPlan::build(&ssm, len)?;
        let mut fast = plan.f_y.clone();
        inject(opts.fault, &mut fast);
        Ok(Trial {
            error: max_abs_diff(&fast, &naive_output_filter(&ssm, len)),
            instance: json!({ "trial": i, "len": len, "ssm": ssm_json(&ssm) }),
            fallback: plan.radius < 1.0,
        })
    });
    summarize("filter", FILTER_TOLERANCE, trials)
}

/// Convolution with the fast filter against the step-by-step recurrence.
pub fn convolution_suite(opts: &VerifyOptions) -> SuiteReport {
    let trials = map_indexed(opts.exec, opts.trials, |i| {
        let mut rng = trial_rng(opts.seed, i);
        let d = rng.gen_range(1..=16);
        let len = rng.gen_range(1..=512);
        let ssm = random_ssm(&mut rng, d);
        let u = uniform_vec(&mut rng, len);
        let plan = FilterPlan::build(&ssm, len)?;
        let mut f = plan.f_y.clone();
        inject(opts.fault, &mut f);
        let y = apply_filter(&f, &u)?;
        Ok(Trial {
            error: max_abs_diff(&y, &scan(&ssm, &u).post),
            instance: json!({ "trial": i, "u": u, "ssm": ssm_json(&ssm) }),
            fallback: plan.radius < 1.0,
        })
    });
    summarize("convolution", CONVOLUTION_TOLERANCE, trials)
}

/// Spectral and recurrent rollouts against dense powering of `A + BK`,
/// scaled by the reference magnitude.
pub fn closed_loop_suite(opts: &VerifyOptions) -> SuiteReport {
    let trials = map_indexed(opts.exec, opts.trials, |i| {
        let mut rng = trial_rng(opts.seed, i);
        let d = rng.gen_range(1..=32);
        let h = rng.gen_range(1..=128);
        let ssm = random_closed_loop_ssm(&mut rng, d);
        let x0 = uniform_vec(&mut rng, d);
        let recurrent = closed_loop_rollout(&ssm, &x0, h)?.y;
        let spectral = fast_closed_loop_rollout(&ssm, &x0, h)?;
        let m = dense_closed_loop(&ssm);
        let c = DVector::from_column_slice(&ssm.c);
        let mut x = DVector::from_column_slice(&x0);
        let dense: Vec<f64> = (0..h)
            .map(|_| {
                x = &m * &x;
                c.dot(&x)
            })
            .collect();
        let error = scaled_diff(&spectral, &dense).max(scaled_diff(&recurrent, &dense));
        Ok(Trial {
            error,
            instance: json!({ "trial": i, "h": h, "x_start": x0, "ssm": ssm_json(&ssm) }),
            fallback: false,
        })
    });
    summarize("closed-loop", CLOSED_LOOP_TOLERANCE, trials)
}

/// Direct ARMA recursion `y_k = e_k + Σθ_i e_{k−i} + Σφ_i y_{k−i}`.
pub fn arma_recursion(phi: &[f64], theta: &[f64], noise: &[f64]) -> Vec<f64> {
    let mut y: Vec<f64> = Vec::with_capacity(noise.len());
    for k in 0..noise.len() {
        let mut v = noise[k];
        for (i, t) in theta.iter().enumerate() {
            if k > i {
                v += t * noise[k - i - 1];
            }
        }
        for (i, p) in phi.iter().enumerate() {
            if k > i {
                v += p * y[k - i - 1];
            }
        }
        y.push(v);
    }
    y
}

/// Lag-1 recursion `y_{k+1} = y_k + Σθ_i y_{k−i} + Σφ_i y_{k−i+1}`, started
/// from the given history.
pub fn arma_shifted_recursion(phi: &[f64], theta: &[f64], history: &[f64], n: usize) -> Vec<f64> {
    let mut y = history.to_vec();
    while y.len() < n {
        let k = y.len() - 1;
        let at = |j: isize| if j >= 0 { y[j as usize] } else { 0.0 };
        let mut v = y[k];
        for (i, t) in theta.iter().enumerate() {
            v += t * at(k as isize - i as isize - 1);
        }
        for (i, p) in phi.iter().enumerate() {
            v += p * at(k as isize - i as isize);
        }
        y.push(v);
    }
    y
}

/// Both ARMA constructions against direct recursions, and Markov parameters
/// of the companion realization of random controllable systems. Errors are
/// scaled by the reference magnitude.
pub fn constructions_suite(opts: &VerifyOptions) -> SuiteReport {
    let trials = map_indexed(opts.exec, opts.trials, |i| {
        let mut rng = trial_rng(opts.seed, i);
        let p = rng.gen_range(1..=4);
        let q = rng.gen_range(1..=3);
        // Small coefficients keep the recursions bounded over the horizon.
        let phi: Vec<f64> = uniform_vec(&mut rng, p).iter().map(|v| 0.4 * v / p as f64).collect();
        let theta: Vec<f64> = uniform_vec(&mut rng, q).iter().map(|v| 0.5 * v).collect();

        let noise = uniform_vec(&mut rng, 60);
        let (ar, ma) = arma_two_head(&phi, &theta)?;
        let two_head = scaled_diff(&simulate_two_head(&ar, &ma, &noise), &arma_recursion(&phi, &theta, &noise));

        let shifted = arma_shifted_ssm(&phi, &theta)?;
        let d = shifted.dim();
        let history = uniform_vec(&mut rng, d);
        let y = arma_shifted_recursion(&phi, &theta, &history, 40);
        let post = scan(&shifted, &y[..y.len() - 1]).post;
        let lag1 = scaled_diff(&post[d - 1..], &y[d..]);

        let n = rng.gen_range(1..=10);
        let a_dense = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let radius = spectral_radius(&a_dense).unwrap_or_else(|| a_dense.norm());
        let a_dense = if radius > 0.0 { a_dense * (0.9 / radius) } else { a_dense };
        let b = uniform_vec(&mut rng, n);
        let c = uniform_vec(&mut rng, n);
        let markov = match lti_to_companion(&a_dense, &b, &c) {
            Ok(comp) => {
                let fast = naive_output_filter(&comp, 2 * n + 1);
                let cv = DVector::from_column_slice(&c);
                let mut x = DVector::from_column_slice(&b);
                let dense: Vec<f64> = (0..=2 * n)
                    .map(|_| {
                        let v = cv.dot(&x);
                        x = &a_dense * &x;
                        v
                    })
                    .collect();
                scaled_diff(&fast, &dense)
            }
            // Random draws are almost surely controllable; skip the rare miss.
            Err(crate::SsmError::NotControllable { .. }) => 0.0,
            Err(e) => return Err(e),
        };
        Ok(Trial {
            error: two_head.max(lag1).max(markov),
            instance: json!({ "trial": i, "phi": phi, "theta": theta, "lti_d": n }),
            fallback: false,
        })
    });
    summarize("constructions", CONSTRUCTION_TOLERANCE, trials)
}

/// Relative error as used by the gradient check: `|g − fd| / max(|g|, |fd|)`,
/// with magnitudes below the absolute floor compared absolutely.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRADIENT_ABS_FLOOR / GRADIENT_TOLERANCE);
    (analytic - numeric).abs() / scale
}

/// Central differences of the loss with respect to every parameter, in the
/// order `a`, `B`, `C`, `D`.
pub fn finite_difference_gradients(ssm: &Ssm, u: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    let d = ssm.dim();
    let loss = |s: &Ssm| bptt_gradients(s, u, targets).map(|g| g.loss);
    let mut out = Vec::with_capacity(3 * d + 1);
    for which in 0..4 {
        let count = if which == 3 { 1 } else { d };
        for i in 0..count {
            let perturbed = |delta: f64| {
                let mut s = ssm.clone();
                match which {
                    0 => s.a.coeffs_mut()[i] += delta,
                    1 => s.b[i] += delta,
                    2 => s.c[i] += delta,
                    _ => s.skip += delta,
                }
                s
            };
            out.push((loss(&perturbed(FD_STEP))? - loss(&perturbed(-FD_STEP))?) / (2.0 * FD_STEP));
        }
    }
    Ok(out)
}

/// Adjoint gradients against central finite differences.
pub fn gradient_suite(opts: &VerifyOptions) -> SuiteReport {
    let trials = map_indexed(opts.exec, opts.trials, |i| {
        let mut rng = trial_rng(opts.seed, i);
        let d = rng.gen_range(1..=6);
        let len = rng.gen_range(4..=48);
        let mut ssm = random_ssm(&mut rng, d);
        ssm.skip = rng.gen_range(-1.0..1.0);
        let u = uniform_vec(&mut rng, len);
        let targets = uniform_vec(&mut rng, len);
        let g = bptt_gradients(&ssm, &u, &targets)?;
        let analytic: Vec<f64> = g.da.iter().chain(&g.db).chain(&g.dc).copied().chain([g.dd]).collect();
        let numeric = finite_difference_gradients(&ssm, &u, &targets)?;
        let error = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| gradient_error(*a, *n))
            .fold(0.0, f64::max);
        Ok(Trial {
            error,
            instance: json!({ "trial": i, "u": u, "targets": targets, "ssm": ssm_json(&ssm) }),
            fallback: false,
        })
    });
    summarize("gradients", GRADIENT_TOLERANCE, trials)
}

/// Runs every suite. Gradient checks use a quarter of the trials (at least
/// one), as each costs `6d + 2` loss evaluations.
pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    let light = VerifyOptions {
        trials: opts.trials.div_ceil(4).max(1),
        ..opts.clone()
    };
    VerifyReport {
        seed: opts.seed,
        suites: vec![
            filter_suite(opts),
            convolution_suite(opts),
            closed_loop_suite(opts),
            constructions_suite(opts),
            gradient_suite(&light),
        ],
    }
}
