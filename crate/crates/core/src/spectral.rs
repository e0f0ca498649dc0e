//! Arbitrary-length DFTs, linear convolution, and the resolvent quadratic form
//! of the shift matrix evaluated on the roots of unity.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{check_len, Result, SsmError};

pub type ComplexVector = Vec<Complex64>;

/// Inputs with a side at most this long are convolved directly.
pub const DIRECT_CONVOLUTION_MAX: usize = 64;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// `X[m] = Σ_j x[j]·exp(−2πi·mj/n)`, in place, any `n ≥ 1`.
pub fn dft_in_place(buf: &mut [Complex64]) -> Result<()> {
    if buf.is_empty() {
        return Err(SsmError::invalid("n", "DFT length must be at least 1"));
    }
    plan(buf.len(), false).process(buf);
    Ok(())
}

/// Inverse of [`dft_in_place`], including the `1/n` factor.
pub fn idft_in_place(buf: &mut [Complex64]) -> Result<()> {
    if buf.is_empty() {
        return Err(SsmError::invalid("n", "DFT length must be at least 1"));
    }
    plan(buf.len(), true).process(buf);
    let scale = 1.0 / buf.len() as f64;
    buf.iter_mut().for_each(|z| *z *= scale);
    Ok(())
}

pub fn dft(v: &[Complex64]) -> Result<ComplexVector> {
    let mut out = v.to_vec();
    dft_in_place(&mut out)?;
    Ok(out)
}

pub fn idft(v: &[Complex64]) -> Result<ComplexVector> {
    let mut out = v.to_vec();
    idft_in_place(&mut out)?;
    Ok(out)
}

pub fn dft_real(v: &[f64]) -> Result<ComplexVector> {
    let mut buf: ComplexVector = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    dft_in_place(&mut buf)?;
    Ok(buf)
}

/// Full linear convolution, length `|u| + |v| − 1`.
///
/// Direct summation when either side has at most [`DIRECT_CONVOLUTION_MAX`]
/// entries, zero-padded FFT otherwise.
pub fn linear_convolution(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.is_empty() || v.is_empty() {
        return Err(SsmError::invalid("u, v", "convolution inputs must be non-empty"));
    }
    if u.len().min(v.len()) <= DIRECT_CONVOLUTION_MAX {
        Ok(direct_convolution(u, v))
    } else {
        fft_convolution(u, v)
    }
}

fn direct_convolution(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; u.len() + v.len() - 1];
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        for (o, &vj) in out[i..].iter_mut().zip(v) {
            *o += ui * vj;
        }
    }
    out
}

fn fft_convolution(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let n = u.len() + v.len() - 1;
    let size = n.next_power_of_two();
    let mut fu = vec![Complex64::default(); size];
    let mut fv = vec![Complex64::default(); size];
    for (z, &x) in fu.iter_mut().zip(u) {
        z.re = x;
    }
    for (z, &x) in fv.iter_mut().zip(v) {
        z.re = x;
    }
    dft_in_place(&mut fu)?;
    dft_in_place(&mut fv)?;
    for (a, b) in fu.iter_mut().zip(&fv) {
        *a *= b;
    }
    idft_in_place(&mut fu)?;
    Ok(fu[..n].iter().map(|z| z.re).collect())
}

/// Lagged cross-correlation `c_k = Σ_j u_{j+k}·v_j` for `k = 0..d`.
///
/// These are the coefficients of `u^T (I − wS)^{-1} v` as a polynomial in `w`,
/// since the shift resolvent has `w^{i−j}` at every entry `i ≥ j`. Computed as
/// one linear convolution of the reversed `u` with `v`.
pub fn resolvent_lags(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_len("resolvent_lags", u.len(), v.len())?;
    let d = u.len();
    let rev: Vec<f64> = u.iter().rev().copied().collect();
    let q = linear_convolution(&rev, v)?;
    Ok((0..d).map(|k| q[d - 1 - k]).collect())
}

/// `[u^T (I − ω^m S)^{-1} v]` for `m = 0..ℓ`, `ω = exp(−2πi/ℓ)`, `S` the d×d
/// shift matrix.
///
/// Powers of `ω` repeat with period ℓ, so lag coefficients beyond ℓ are folded
/// onto `k mod ℓ` (the chunk sum) before a single length-ℓ DFT.
pub fn quad(u: &[f64], v: &[f64], len: usize) -> Result<ComplexVector> {
    quad_on_radius(u, v, len, 1.0)
}

/// [`quad`] on the contour `w = r·ω^m`: `[u^T (I − r ω^m S)^{-1} v]_m`.
pub fn quad_on_radius(u: &[f64], v: &[f64], len: usize, radius: f64) -> Result<ComplexVector> {
    if u.is_empty() {
        return Err(SsmError::invalid("d", "state size must be positive"));
    }
    let lags = resolvent_lags(u, v)?;
    fold_and_transform(&lags, len, radius)
}

pub(crate) fn fold_and_transform(lags: &[f64], len: usize, radius: f64) -> Result<ComplexVector> {
    if len == 0 {
        return Err(SsmError::invalid("len", "sequence length must be at least 1"));
    }
    let mut folded = vec![Complex64::default(); len];
    if radius == 1.0 {
        for (k, &c) in lags.iter().enumerate() {
            folded[k % len].re += c;
        }
    } else {
        let mut weight = 1.0;
        for (k, &c) in lags.iter().enumerate() {
            folded[k % len].re += c * weight;
            weight *= radius;
        }
    }
    dft_in_place(&mut folded)?;
    Ok(folded)
}

/// `ω^{−m} = exp(2πi·m/ℓ)` for `m = 0..ℓ`.
pub fn inverse_roots_of_unity(len: usize) -> ComplexVector {
    (0..len)
        .map(|m| Complex64::from_polar(1.0, 2.0 * PI * m as f64 / len as f64))
        .collect()
}
