//! Convolution filters of a companion SSM.
//!
//! The output filter is `F^y = (CB, CAB, …, CA^{ℓ−1}B)`. Two constructions are
//! provided: the O(ℓd) structured powering ([`naive_output_filter`]) and the
//! O(ℓ log ℓ + d log d) spectral construction ([`fast_output_filter`]), which
//! evaluates `C̃ (I − Aω^m)^{-1} B` on the ℓ-th roots of unity by writing the
//! companion matrix as shift plus rank one and applying Sherman–Morrison.
//!
//! Tap alignment: [`apply_filter`] is a plain causal convolution,
//! `y_k = Σ_{j≤k} f_{k−j} u_j`. With `f = F^y` this is `C x_{k+1}`, the
//! post-update output (the one-step prediction of `u_{k+1}`). The pre-update
//! output `C x_k` is the same sequence delayed by one step. `D` is never part
//! of a filter.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use num_complex::Complex64;

use crate::companion::{dot, unit_vector, CompanionMatrix, Ssm};
use crate::error::{check_len, Result, SsmError};
use crate::spectral::{fold_and_transform, idft_in_place, inverse_roots_of_unity, resolvent_lags};

/// Denominators below this magnitude are reported as a singular resolvent.
/// A pole at distance δ from a frequency bin costs about `ε/δ` in accuracy,
/// so near-misses count as hits.
pub const SINGULAR_TOLERANCE: f64 = 1e-6;

/// Contour radius used when the unit circle passes through an eigenvalue:
/// `r^ℓ = 1/2`, which keeps the `r^{-j}` rescaling of the taps below 2.
pub fn fallback_radius(len: usize) -> f64 {
    0.5f64.powf(1.0 / len as f64)
}

/// Contours tried in order after the unit circle: `r^ℓ = 1/2`, then
/// `r^ℓ = 1/4` in case an eigenvalue sits on the first.
pub fn fallback_radii(len: usize) -> [f64; 2] {
    let r = fallback_radius(len);
    [r, r * r]
}

/// `(CB, CAB, …, CA^{ℓ−1}B)` by ℓ structured applies.
pub fn naive_output_filter(ssm: &Ssm, len: usize) -> Vec<f64> {
    let mut x = ssm.b.clone();
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        out.push(dot(&ssm.c, &x));
        if k + 1 < len {
            ssm.a.apply_in_place(&mut x);
        }
    }
    out
}

/// `C·A^ℓ` by ℓ row applies.
pub fn c_times_power(a: &CompanionMatrix, c: &[f64], len: usize) -> Result<Vec<f64>> {
    check_len("c_times_power", a.dim(), c.len())?;
    let mut r = c.to_vec();
    for _ in 0..len {
        a.apply_row_in_place(&mut r);
    }
    Ok(r)
}

/// `C̃ = C(I − A^ℓ)`.
pub fn c_tilde(ssm: &Ssm, len: usize) -> Vec<f64> {
    let pow = c_times_power(&ssm.a, &ssm.c, len).expect("validated Ssm");
    ssm.c.iter().zip(&pow).map(|(c, p)| c - p).collect()
}

/// Output filter from `a`, `B` and a precomputed `C̃ = C(I − A^ℓ)`.
///
/// With `ω = exp(−2πi/ℓ)`, `z_m = ω^{−m}` and `e_d` the last basis vector,
///
/// ```text
/// F̃[m] = quad(C̃,B) + quad(C̃,a)·quad(e_d,B) / (z_m − quad(e_d,a))
/// ```
///
/// and the filter is the real part of the inverse DFT of `F̃`. Fails with
/// [`SsmError::SingularResolvent`] when some `z_m` is (numerically) an
/// eigenvalue of `A`; [`FilterPlan::build`] retries on a smaller contour.
pub fn fast_output_filter(a: &[f64], b: &[f64], c_tilde: &[f64], len: usize) -> Result<Vec<f64>> {
    output_filter_on_radius(a, b, c_tilde, len, 1.0)
}

/// [`fast_output_filter`] evaluated on the circle of radius `r`.
///
/// `c_tilde` must be `C(I − r^ℓ A^ℓ)`. The spectrum is that of the damped taps
/// `r^j·CA^jB`, which are rescaled by `r^{−j}` on the way out.
pub fn output_filter_on_radius(
    a: &[f64],
    b: &[f64],
    c_tilde: &[f64],
    len: usize,
    radius: f64,
) -> Result<Vec<f64>> {
    let d = a.len();
    if d == 0 {
        return Err(SsmError::invalid("a", "state size must be positive"));
    }
    check_len("fast_output_filter B", d, b.len())?;
    check_len("fast_output_filter C̃", d, c_tilde.len())?;
    if len == 0 {
        return Err(SsmError::invalid("len", "sequence length must be at least 1"));
    }
    if !(radius > 0.0 && radius <= 1.0) {
        return Err(SsmError::invalid("radius", format!("{radius} is outside (0, 1]")));
    }

    let e_d = unit_vector(d, d - 1);
    let q = |u: &[f64], v: &[f64]| -> Result<Vec<Complex64>> {
        fold_and_transform(&resolvent_lags(u, v)?, len, radius)
    };
    let q_cb = q(c_tilde, b)?;
    let q_ca = q(c_tilde, a)?;
    let q_eb = q(&e_d, b)?;
    let q_ea = q(&e_d, a)?;
    let z = inverse_roots_of_unity(len);

    let mut spectrum = Vec::with_capacity(len);
    for m in 0..len {
        let denom = z[m] / radius - q_ea[m];
        if denom.norm() < SINGULAR_TOLERANCE {
            return Err(SsmError::SingularResolvent {
                bin: m,
                magnitude: denom.norm(),
            });
        }
        spectrum.push(q_cb[m] + q_ca[m] * q_eb[m] / denom);
    }
    idft_in_place(&mut spectrum)?;
    Ok(unscale_taps(&spectrum, radius))
}

fn unscale_taps(spectrum: &[Complex64], radius: f64) -> Vec<f64> {
    if radius == 1.0 {
        return spectrum.iter().map(|z| z.re).collect();
    }
    let inv = 1.0 / radius;
    let mut scale = 1.0;
    spectrum
        .iter()
        .map(|z| {
            let tap = z.re * scale;
            scale *= inv;
            tap
        })
        .collect()
}

/// Stages reported to [`FilterPlan::build_timed`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterStage {
    /// `C̃ = C(I − A^ℓ)`, O(ℓd).
    CTilde,
    /// The spectral construction proper, O(ℓ log ℓ + d log d).
    Spectrum,
}

/// Output filter and `C̃` for one SSM at a fixed length.
#[derive(Clone, Debug)]
pub struct FilterPlan {
    pub f_y: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub len: usize,
    /// Contour radius the spectrum was evaluated on (1 unless the unit
    /// circle hit an eigenvalue).
    pub radius: f64,
    pub source: Ssm,
}

impl FilterPlan {
    pub fn build(ssm: &Ssm, len: usize) -> Result<Self> {
        Self::build_timed(ssm, len, |_, _| {})
    }

    /// Builds the plan, reporting the monotonic-clock duration of each stage.
    pub fn build_timed(
        ssm: &Ssm,
        len: usize,
        mut on_stage: impl FnMut(FilterStage, Duration),
    ) -> Result<Self> {
        if len == 0 {
            return Err(SsmError::invalid("len", "sequence length must be at least 1"));
        }
        let start = Instant::now();
        let c_pow = c_times_power(&ssm.a, &ssm.c, len)?;
        let c_tilde: Vec<f64> = ssm.c.iter().zip(&c_pow).map(|(c, p)| c - p).collect();
        on_stage(FilterStage::CTilde, start.elapsed());

        let start = Instant::now();
        let a = ssm.a.coeffs();
        let mut attempt = fast_output_filter(a, &ssm.b, &c_tilde, len).map(|f| (f, 1.0));
        for r in fallback_radii(len) {
            if !matches!(attempt, Err(SsmError::SingularResolvent { .. })) {
                break;
            }
            let damp = r.powi(len as i32);
            let ct_r: Vec<f64> = ssm.c.iter().zip(&c_pow).map(|(c, p)| c - damp * p).collect();
            attempt = output_filter_on_radius(a, &ssm.b, &ct_r, len, r).map(|f| (f, r));
        }
        let (f_y, radius) = attempt?;
        on_stage(FilterStage::Spectrum, start.elapsed());

        Ok(FilterPlan {
            f_y,
            c_tilde,
            len,
            radius,
            source: ssm.clone(),
        })
    }

    /// True if this plan was built from the same `(a, B, C)` and length.
    pub fn matches(&self, ssm: &Ssm, len: usize) -> bool {
        self.len == len && self.source.a == ssm.a && self.source.b == ssm.b && self.source.c == ssm.c
    }
}

/// Thread-safe cache of filter plans keyed on `(a, B, C, ℓ)`.
///
/// Any parameter change produces a new key, so stale plans are never served.
#[derive(Debug, Default)]
pub struct FilterCache {
    plans: Mutex<HashMap<(u64, usize), Arc<FilterPlan>>>,
}

impl FilterCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&self, ssm: &Ssm, len: usize) -> Result<Arc<FilterPlan>> {
        let key = (param_fingerprint(ssm), len);
        if let Some(plan) = self.plans.lock().unwrap().get(&key) {
            if plan.matches(ssm, len) {
                return Ok(Arc::clone(plan));
            }
        }
        let plan = Arc::new(FilterPlan::build(ssm, len)?);
        self.plans.lock().unwrap().insert(key, Arc::clone(&plan));
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.plans.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.plans.lock().unwrap().clear();
    }
}

impl Clone for FilterCache {
    fn clone(&self) -> Self {
        FilterCache::new()
    }
}

fn param_fingerprint(ssm: &Ssm) -> u64 {
    let mut h = DefaultHasher::new();
    for v in ssm.a.coeffs().iter().chain(&ssm.b).chain(&ssm.c) {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Causal convolution `y_k = Σ_{j≤k} f_{k−j} u_j`, truncated to ℓ.
pub fn apply_filter(f: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_len("apply_filter", f.len(), u.len())?;
    if f.is_empty() {
        return Ok(Vec::new());
    }
    let mut y = crate::spectral::linear_convolution(f, u)?;
    y.truncate(u.len());
    Ok(y)
}

/// Step-by-step evaluation from `x_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    /// `C x_k + D u_k`.
    pub pre: Vec<f64>,
    /// `C x_{k+1}`.
    pub post: Vec<f64>,
    /// `x_ℓ`.
    pub final_state: Vec<f64>,
}

/// Recurrent reference evaluation of the SSM over `u`.
pub fn scan(ssm: &Ssm, u: &[f64]) -> Scan {
    let mut x = vec![0.0; ssm.dim()];
    let mut pre = Vec::with_capacity(u.len());
    let mut post = Vec::with_capacity(u.len());
    for &uk in u {
        pre.push(dot(&ssm.c, &x) + ssm.skip * uk);
        ssm.step_in_place(&mut x, uk);
        post.push(dot(&ssm.c, &x));
    }
    Scan {
        pre,
        post,
        final_state: x,
    }
}

/// `x_ℓ = Σ_j A^{ℓ−1−j} B u_j` via the O(ℓd) recurrence.
pub fn last_state(ssm: &Ssm, u: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; ssm.dim()];
    for &uk in u {
        ssm.step_in_place(&mut x, uk);
    }
    x
}

/// Closed-loop outputs and predicted inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `C (A+BK)^i x_start`, `i = 1..=h`.
    pub y: Vec<f64>,
    /// `K (A+BK)^i x_start`, `i = 1..=h`.
    pub u_hat: Vec<f64>,
}

/// Iterates `x ← (A + BK) x` for `h` steps, O(hd).
pub fn closed_loop_rollout(ssm: &Ssm, x_start: &[f64], h: usize) -> Result<Rollout> {
    let k = ssm.k_or_err()?;
    check_len("closed_loop_rollout x_start", ssm.dim(), x_start.len())?;
    let mut x = x_start.to_vec();
    let mut y = Vec::with_capacity(h);
    let mut u_hat = Vec::with_capacity(h);
    for _ in 0..h {
        ssm.closed_loop_apply_in_place(k, &mut x);
        y.push(dot(&ssm.c, &x));
        u_hat.push(dot(k, &x));
    }
    Ok(Rollout { y, u_hat })
}

/// Same `y` as [`closed_loop_rollout`], computed spectrally.
///
/// `M = A + BK = S + [a B]·[e_d K]^T` is a shift plus rank two, so the
/// resolvent quadratic form needs one 2×2 capacitance solve per frequency bin.
/// `C' = C·M^h` row powering is the O(hd) part, as `C̃` is for the filter.
pub fn fast_closed_loop_rollout(ssm: &Ssm, x_start: &[f64], h: usize) -> Result<Vec<f64>> {
    let k = ssm.k_or_err()?;
    check_len("fast_closed_loop_rollout x_start", ssm.dim(), x_start.len())?;
    if h == 0 {
        return Ok(Vec::new());
    }
    // y_i = C M^{i-1} v with v = M x_start.
    let mut v = x_start.to_vec();
    ssm.closed_loop_apply_in_place(k, &mut v);
    let mut c_pow = ssm.c.clone();
    for _ in 0..h {
        ssm.closed_loop_apply_row_in_place(k, &mut c_pow);
    }
    let mut attempt = rank_two_rollout(ssm, k, &v, &c_pow, h, 1.0);
    for r in fallback_radii(h) {
        if !matches!(attempt, Err(SsmError::SingularResolvent { .. })) {
            break;
        }
        attempt = rank_two_rollout(ssm, k, &v, &c_pow, h, r);
    }
    attempt
}

fn rank_two_rollout(
    ssm: &Ssm,
    k: &[f64],
    v: &[f64],
    c_pow: &[f64],
    h: usize,
    radius: f64,
) -> Result<Vec<f64>> {
    let d = ssm.dim();
    let damp = radius.powi(h as i32);
    let ct: Vec<f64> = ssm.c.iter().zip(c_pow).map(|(c, p)| c - damp * p).collect();
    let a = ssm.a.coeffs();
    let b = &ssm.b;
    let e_d = unit_vector(d, d - 1);
    let q = |x: &[f64], y: &[f64]| -> Result<Vec<Complex64>> {
        fold_and_transform(&resolvent_lags(x, y)?, h, radius)
    };
    let (q_cv, q_ca, q_cb) = (q(&ct, v)?, q(&ct, a)?, q(&ct, b)?);
    let (q_ev, q_ea, q_eb) = (q(&e_d, v)?, q(&e_d, a)?, q(&e_d, b)?);
    let (q_kv, q_ka, q_kb) = (q(k, v)?, q(k, a)?, q(k, b)?);
    let z = inverse_roots_of_unity(h);

    let mut spectrum = Vec::with_capacity(h);
    for m in 0..h {
        // Capacitance zI − V^T R U with U = [a, B], V = [e_d, K].
        let zm = z[m] / radius;
        let (g00, g01) = (zm - q_ea[m], -q_eb[m]);
        let (g10, g11) = (-q_ka[m], zm - q_kb[m]);
        let det = g00 * g11 - g01 * g10;
        if det.norm() < SINGULAR_TOLERANCE {
            return Err(SsmError::SingularResolvent {
                bin: m,
                magnitude: det.norm(),
            });
        }
        let (r0, r1) = (q_ev[m], q_kv[m]);
        let s0 = (g11 * r0 - g01 * r1) / det;
        let s1 = (g00 * r1 - g10 * r0) / det;
        spectrum.push(q_cv[m] + q_ca[m] * s0 + q_cb[m] * s1);
    }
    idft_in_place(&mut spectrum)?;
    Ok(unscale_taps(&spectrum, radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::companion::normalize_stability;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ssm(a: &[f64], b: &[f64], c: &[f64]) -> Ssm {
        Ssm::new(CompanionMatrix::new(a.to_vec()).unwrap(), b.to_vec(), c.to_vec(), 0.0, None).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn random_ssm(rng: &mut ChaCha8Rng, d: usize) -> Ssm {
        let a = normalize_stability(&random_vec(rng, d));
        let b = random_vec(rng, d);
        let c = random_vec(rng, d);
        ssm(&a, &b, &c)
    }

    fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), y.len());
        x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn dense_filter(s: &Ssm, len: usize) -> Vec<f64> {
        let a = s.a.dense();
        let c = DVector::from_column_slice(&s.c);
        let mut x = DVector::from_column_slice(&s.b);
        (0..len)
            .map(|_| {
                let y = c.dot(&x);
                x = &a * &x;
                y
            })
            .collect()
    }

    #[test]
    fn naive_filter_examples() {
        let c = [0.3, -1.0, 2.0];
        let f = naive_output_filter(&ssm(&[0.0; 3], &[1.0, 0.0, 0.0], &c), 6);
        assert_eq!(f, vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0]);
        let f = naive_output_filter(&ssm(&[0.5], &[1.0], &[2.0]), 4);
        assert_eq!(f, vec![2.0, 1.0, 0.5, 0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = random_ssm(&mut rng, 8);
        assert!(max_abs_diff(&naive_output_filter(&s, 32), &dense_filter(&s, 32)) < 1e-12);
    }

    #[test]
    fn c_tilde_examples() {
        let s = ssm(&[0.0; 3], &[1.0, 0.0, 0.0], &[1.0, 2.0, 3.0]);
        assert_eq!(c_tilde(&s, 3), vec![1.0, 2.0, 3.0]);
        let s = ssm(&[0.5], &[1.0], &[2.0]);
        assert!((c_tilde(&s, 3)[0] - 2.0 * (1.0 - 0.125)).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_ssm(&mut rng, 6);
        let a10 = s.a.dense().pow(10);
        let c = DVector::from_column_slice(&s.c);
        let expect = (c.transpose() * (DMatrix::identity(6, 6) - a10)).transpose();
        assert!(max_abs_diff(&c_tilde(&s, 10), expect.as_slice()) < 1e-12);
    }

    #[test]
    fn fast_filter_examples() {
        let c = [1.0, -2.0, 1.0, 0.0];
        let s = ssm(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0], &c);
        let f = fast_output_filter(s.a.coeffs(), &s.b, &c_tilde(&s, 8), 8).unwrap();
        assert!(max_abs_diff(&f, &[1.0, -2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]) < 1e-14);

        let s = ssm(&[0.5], &[1.0], &[1.0]);
        let f = fast_output_filter(&[0.5], &[1.0], &c_tilde(&s, 4), 4).unwrap();
        assert!(max_abs_diff(&f, &[1.0, 0.5, 0.25, 0.125]) < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_ssm(&mut rng, 64);
        let f = fast_output_filter(s.a.coeffs(), &s.b, &c_tilde(&s, 256), 256).unwrap();
        assert!(max_abs_diff(&f, &naive_output_filter(&s, 256)) < 1e-8);
    }

    #[test]
    fn fast_filter_when_state_exceeds_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for len in [1, 2, 5, 16] {
            let s = random_ssm(&mut rng, 4 * len);
            let f = FilterPlan::build(&s, len).unwrap().f_y;
            assert!(max_abs_diff(&f, &naive_output_filter(&s, len)) < 1e-9, "len={len}");
        }
    }

    #[test]
    fn unit_root_is_reported_then_handled_by_plan() {
        // a = [1]: A = 1 is an eigenvalue at bin 0.
        let s = ssm(&[1.0], &[1.0], &[2.0]);
        let err = fast_output_filter(&[1.0], &[1.0], &c_tilde(&s, 8), 8).unwrap_err();
        assert!(matches!(err, SsmError::SingularResolvent { bin: 0, .. }));
        let plan = FilterPlan::build(&s, 8).unwrap();
        assert!(plan.radius < 1.0);
        assert!(max_abs_diff(&plan.f_y, &[2.0; 8]) < 1e-12);

        // a = [0.5, 0.5] has eigenvalue 1; a = [-1] has eigenvalue −1 (bin ℓ/2).
        for a in [vec![0.5, 0.5], vec![-1.0]] {
            let d = a.len();
            let s = ssm(&a, &vec![1.0; d], &vec![1.0; d]);
            let plan = FilterPlan::build(&s, 16).unwrap();
            assert!(max_abs_diff(&plan.f_y, &naive_output_filter(&s, 16)) < 1e-12);
        }
    }

    #[test]
    fn timed_build_reports_both_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = random_ssm(&mut rng, 8);
        let mut stages = Vec::new();
        let plan = FilterPlan::build_timed(&s, 32, |stage, _| stages.push(stage)).unwrap();
        assert_eq!(stages, vec![FilterStage::CTilde, FilterStage::Spectrum]);
        assert!((plan.f_y[0] - dot(&s.c, &s.b)).abs() < 1e-12);
        assert_eq!(plan.c_tilde, c_tilde(&s, 32));
    }

    #[test]
    fn cache_hits_and_invalidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut s = random_ssm(&mut rng, 4);
        let cache = FilterCache::new();
        let p1 = cache.get_or_build(&s, 16).unwrap();
        let p2 = cache.get_or_build(&s, 16).unwrap();
        assert!(Arc::ptr_eq(&p1, &p2));
        cache.get_or_build(&s, 32).unwrap();
        assert_eq!(cache.len(), 2);
        s.c[0] += 1.0;
        let p3 = cache.get_or_build(&s, 16).unwrap();
        assert!(!Arc::ptr_eq(&p1, &p3));
        assert_eq!(p3.f_y, FilterPlan::build(&s, 16).unwrap().f_y);
    }

    #[test]
    fn apply_filter_examples() {
        let u = [3.0, 5.0, 9.0, 2.0];
        assert_eq!(apply_filter(&[1.0, 0.0, 0.0, 0.0], &u).unwrap(), u.to_vec());
        assert_eq!(apply_filter(&[1.0, -1.0, 0.0, 0.0], &u).unwrap(), vec![3.0, 2.0, 4.0, -7.0]);
        assert!(apply_filter(&[1.0], &u).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let f = random_vec(&mut rng, 720);
        let u = random_vec(&mut rng, 720);
        let direct: Vec<f64> = (0..720).map(|k| (0..=k).map(|j| f[k - j] * u[j]).sum()).collect();
        assert!(max_abs_diff(&apply_filter(&f, &u).unwrap(), &direct) < 1e-9);
    }

    #[test]
    fn convolution_equals_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &(d, len) in &[(1, 1), (3, 10), (8, 100), (16, 512)] {
            let s = random_ssm(&mut rng, d);
            let u = random_vec(&mut rng, len);
            let conv = apply_filter(&naive_output_filter(&s, len), &u).unwrap();
            let sc = scan(&s, &u);
            assert!(max_abs_diff(&conv, &sc.post) < 1e-8);
            // Pre-update outputs are the same sequence one step later (D = 0).
            assert_eq!(sc.pre[0], 0.0);
            assert!(max_abs_diff(&sc.pre[1..], &sc.post[..len - 1]) < 1e-15);
        }
    }

    #[test]
    fn last_state_examples() {
        let d = 4;
        let s = ssm(&[0.0; 4], &unit_vector(d, 0), &[1.0; 4]);
        let mut u = vec![0.0; d];
        u[0] = 1.0;
        assert_eq!(last_state(&s, &u), unit_vector(d, d - 1));
        assert_eq!(last_state(&s, &[0.0; 7]), vec![0.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let s = random_ssm(&mut rng, 8);
        let u = random_vec(&mut rng, 20);
        let a = s.a.dense();
        let b = DVector::from_column_slice(&s.b);
        let mut expect = DVector::zeros(8);
        for (j, &uj) in u.iter().enumerate() {
            expect += a.pow((19 - j) as u32) * &b * uj;
        }
        assert!(max_abs_diff(&last_state(&s, &u), expect.as_slice()) < 1e-12);
    }

    fn closed_loop_ssm(rng: &mut ChaCha8Rng, d: usize, k_scale: f64) -> Ssm {
        let mut s = random_ssm(rng, d);
        s.k = Some(random_vec(rng, d).iter().map(|v| v * k_scale).collect());
        s
    }

    fn dense_rollout(s: &Ssm, x0: &[f64], h: usize) -> Vec<f64> {
        let d = s.dim();
        let m = s.a.dense()
            + DVector::from_column_slice(&s.b) * DVector::from_column_slice(s.k.as_ref().unwrap()).transpose();
        let c = DVector::from_column_slice(&s.c);
        let mut x = DVector::from_column_slice(x0);
        assert_eq!(x.len(), d);
        (0..h)
            .map(|_| {
                x = &m * &x;
                c.dot(&x)
            })
            .collect()
    }

    #[test]
    fn closed_loop_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // K = 0: autonomous.
        let mut s = random_ssm(&mut rng, 5);
        s.k = Some(vec![0.0; 5]);
        let x0 = random_vec(&mut rng, 5);
        let r = closed_loop_rollout(&s, &x0, 6).unwrap();
        for (i, yi) in r.y.iter().enumerate() {
            let xi = s.a.power_apply(&x0, i + 1).unwrap();
            assert!((yi - dot(&s.c, &xi)).abs() < 1e-12);
            assert_eq!(r.u_hat[i], 0.0);
        }
        // Scalar: A + BK = k.
        let s = Ssm::new(CompanionMatrix::new(vec![0.0]).unwrap(), vec![1.0], vec![1.0], 0.0, Some(vec![0.5]))
            .unwrap();
        let r = closed_loop_rollout(&s, &[3.0], 4).unwrap();
        assert_eq!(r.y, vec![1.5, 0.75, 0.375, 0.1875]);
        // Dense oracle.
        let s = closed_loop_ssm(&mut rng, 8, 0.2);
        let x0 = random_vec(&mut rng, 8);
        let r = closed_loop_rollout(&s, &x0, 16).unwrap();
        assert!(max_abs_diff(&r.y, &dense_rollout(&s, &x0, 16)) < 1e-10);

        let no_k = random_ssm(&mut rng, 3);
        assert!(matches!(closed_loop_rollout(&no_k, &[0.0; 3], 2), Err(SsmError::MissingK)));
        assert!(matches!(fast_closed_loop_rollout(&no_k, &[0.0; 3], 2), Err(SsmError::MissingK)));
    }

    #[test]
    fn fast_closed_loop_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let s = closed_loop_ssm(&mut rng, 16, 0.2);
        let x0 = random_vec(&mut rng, 16);
        let slow = closed_loop_rollout(&s, &x0, 64).unwrap().y;
        let fast = fast_closed_loop_rollout(&s, &x0, 64).unwrap();
        assert!(max_abs_diff(&fast, &slow) < 1e-8);

        let one = fast_closed_loop_rollout(&s, &x0, 1).unwrap();
        assert!((one[0] - slow[0]).abs() < 1e-12);

        // K = 0 collapses to the rank-1 filter machinery with B → A·x_start.
        let mut s0 = s.clone();
        s0.k = Some(vec![0.0; 16]);
        let ax0 = s0.a.apply(&x0).unwrap();
        let shifted = Ssm { b: ax0.clone(), ..s0.clone() };
        let rank1 = fast_output_filter(s0.a.coeffs(), &ax0, &c_tilde(&shifted, 32), 32).unwrap();
        let rank2 = fast_closed_loop_rollout(&s0, &x0, 32).unwrap();
        assert!(max_abs_diff(&rank1, &rank2) < 1e-10);
    }
}
