//! Closed-form companion SSMs for classical models (AR, ARMA, SES, LTI
//! systems) and the fixed preprocessing kernels (differencing, moving-average
//! smoothing and residuals).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::companion::{dot, unit_vector, CompanionMatrix, Ssm};
use crate::error::{check_finite, check_len, Result, SsmError};

/// Krylov matrices with `σ_min/σ_max` below this are treated as singular.
pub const CONTROLLABILITY_THRESHOLD: f64 = 1e-10;

/// ARMA(p, q) coefficients, with an optional SES smoothing factor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmaSpec {
    #[serde(default)]
    pub phi: Vec<f64>,
    #[serde(default)]
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl ArmaSpec {
    pub fn validate(&self) -> Result<()> {
        check_finite("ArmaSpec phi", &self.phi)?;
        check_finite("ArmaSpec theta", &self.theta)?;
        if let Some(alpha) = self.alpha {
            check_alpha(alpha)?;
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(SsmError::invalid("alpha", format!("{alpha} is outside (0, 1)")))
    }
}

/// AR(p) predictor: `a = 0`, `B = e_1`, `C = φ`, `D = 0`.
///
/// Fed the series, the post-update output `C x_{k+1}` is the AR prediction of
/// `u_{k+1}`.
pub fn ar_to_ssm(phi: &[f64]) -> Result<Ssm> {
    if phi.is_empty() {
        return Err(SsmError::invalid("phi", "AR order must be at least 1"));
    }
    check_finite("phi", phi)?;
    Ssm::shift_with_output(phi.to_vec())
}

/// ARMA as a lag-1 autoregression on its own outputs.
///
/// Implements `y_{k+1} = y_k + Σ_{i=1}^q θ_i y_{k−i} + Σ_{i=1}^p φ_i y_{k−i+1}`,
/// regrouped as `C_0 = 1 + φ_1`, `C_i = θ_i + φ_{i+1}` (each term present
/// only within its order). The state holds `(y_k, …, y_{k−d+1})` with
/// `d = max(p, q + 1)`.
pub fn arma_shifted_ssm(phi: &[f64], theta: &[f64]) -> Result<Ssm> {
    if phi.is_empty() && theta.is_empty() {
        return Err(SsmError::invalid("phi/theta", "at least one of p, q must be positive"));
    }
    check_finite("phi", phi)?;
    check_finite("theta", theta)?;
    let d = phi.len().max(theta.len() + 1);
    let mut c = vec![0.0; d];
    c[0] = 1.0 + phi.first().copied().unwrap_or(0.0);
    for (i, ci) in c.iter_mut().enumerate().skip(1) {
        *ci = theta.get(i - 1).copied().unwrap_or(0.0) + phi.get(i).copied().unwrap_or(0.0);
    }
    Ssm::shift_with_output(c)
}

/// ARMA as the sum of an AR head on past outputs and an MA head on the noise.
///
/// Both heads read the pre-update output `C x_k + D u_k`: the AR head
/// (`C = φ`, `D = 0`) is driven by `y`, the MA head (`C = θ`, `D = 1`) by the
/// noise. See [`simulate_two_head`].
pub fn arma_two_head(phi: &[f64], theta: &[f64]) -> Result<(Ssm, Ssm)> {
    if phi.is_empty() || theta.is_empty() {
        return Err(SsmError::invalid("phi/theta", "two-head form needs p ≥ 1 and q ≥ 1"));
    }
    let ar = ar_to_ssm(phi)?;
    check_finite("theta", theta)?;
    let mut ma = Ssm::shift_with_output(theta.to_vec())?;
    ma.skip = 1.0;
    Ok((ar, ma))
}

/// Runs the two heads in feedback: `y_k = y^ar_k + y^ma_k`, where the AR head
/// consumes `y_k` and the MA head consumes `noise_k` after each step.
pub fn simulate_two_head(ar: &Ssm, ma: &Ssm, noise: &[f64]) -> Vec<f64> {
    let mut x_ar = vec![0.0; ar.dim()];
    let mut x_ma = vec![0.0; ma.dim()];
    let mut y = Vec::with_capacity(noise.len());
    for &e in noise {
        let yk = dot(&ar.c, &x_ar) + dot(&ma.c, &x_ma) + ma.skip * e;
        ar.step_in_place(&mut x_ar, yk);
        ma.step_in_place(&mut x_ma, e);
        y.push(yk);
    }
    y
}

/// Simple exponential smoothing truncated to an AR(p): `φ_i = α(1−α)^{i−1}`.
pub fn ses_to_ar(alpha: f64, p: usize) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if p == 0 {
        return Err(SsmError::invalid("p", "truncation order must be at least 1"));
    }
    let mut w = alpha;
    Ok((0..p)
        .map(|_| {
            let out = w;
            w *= 1.0 - alpha;
            out
        })
        .collect())
}

/// Krylov matrix `[B, AB, …, A^{d−1}B]`.
pub fn krylov_matrix(a: &DMatrix<f64>, b: &[f64]) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(SsmError::invalid("A", format!("expected a square matrix, got {}×{}", d, a.ncols())));
    }
    check_len("krylov_matrix B", d, b.len())?;
    let mut k = DMatrix::zeros(d, d);
    let mut col = DVector::from_column_slice(b);
    for j in 0..d {
        k.set_column(j, &col);
        col = a * &col;
    }
    Ok(k)
}

/// Companion realization `(G, e_1, C𝒦, 0)` of a controllable `(A, B, C)`,
/// with `G = 𝒦^{-1} A 𝒦` and `𝒦` the Krylov matrix.
///
/// Only the last column of `G` is formed: `a = 𝒦^{-1} A^d B`.
pub fn lti_to_companion(a_dense: &DMatrix<f64>, b: &[f64], c: &[f64]) -> Result<Ssm> {
    let d = a_dense.nrows();
    if d == 0 {
        return Err(SsmError::invalid("A", "state size must be positive"));
    }
    check_len("lti_to_companion C", d, c.len())?;
    check_finite("A", a_dense.as_slice())?;
    check_finite("B", b)?;
    check_finite("C", c)?;
    let k = krylov_matrix(a_dense, b)?;

    let sv = k.clone().singular_values();
    let s_max = sv.max();
    let ratio = if s_max > 0.0 { sv.min() / s_max } else { 0.0 };
    if ratio < CONTROLLABILITY_THRESHOLD {
        return Err(SsmError::NotControllable {
            ratio,
            threshold: CONTROLLABILITY_THRESHOLD,
        });
    }

    let last = a_dense * k.column(d - 1);
    let coeffs = k
        .clone()
        .lu()
        .solve(&last)
        .ok_or_else(|| SsmError::Singular("Krylov matrix LU".into()))?;
    let c_new = DVector::from_column_slice(c).transpose() * &k;
    Ssm::new(
        CompanionMatrix::new(coeffs.as_slice().to_vec())?,
        unit_vector(d, 0),
        c_new.as_slice().to_vec(),
        0.0,
        None,
    )
}

/// Differencing kernel of the given order (0 to 3), zero-padded to `d`.
pub fn diff_c_vector(order: usize, d: usize) -> Result<Vec<f64>> {
    const KERNELS: [&[f64]; 4] = [&[1.0], &[1.0, -1.0], &[1.0, -2.0, 1.0], &[1.0, -3.0, 3.0, -1.0]];
    let kernel = KERNELS
        .get(order)
        .ok_or_else(|| SsmError::invalid("order", format!("{order} is not in 0..=3")))?;
    if d <= order {
        return Err(SsmError::invalid("d", format!("state size {d} must exceed order {order}")));
    }
    let mut c = vec![0.0; d];
    c[..kernel.len()].copy_from_slice(kernel);
    Ok(c)
}

/// `n`-point moving average `[1/n; n]`, zero-padded to `d`.
pub fn ma_smoothing_c(n: usize, d: usize) -> Result<Vec<f64>> {
    if n == 0 || n > d {
        return Err(SsmError::invalid("n", format!("window {n} must lie in 1..={d}")));
    }
    let mut c = vec![0.0; d];
    c[..n].fill(1.0 / n as f64);
    Ok(c)
}

/// Residual from an `n`-point moving average: `e_1 − ma_smoothing_c(n, d)`.
pub fn ma_residual_c(n: usize, d: usize) -> Result<Vec<f64>> {
    if n < 2 || n > d {
        return Err(SsmError::invalid("n", format!("window {n} must lie in 2..={d}")));
    }
    let mut c = ma_smoothing_c(n, d)?;
    for v in &mut c {
        *v = -*v;
    }
    c[0] += 1.0;
    Ok(c)
}

/// Input accepted by the `construct` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstructSpec {
    Ar {
        phi: Vec<f64>,
    },
    /// `mode` is `"shifted"` (default) or `"two_head"`.
    Arma {
        #[serde(flatten)]
        spec: ArmaSpec,
        #[serde(default)]
        mode: ArmaMode,
    },
    Ses {
        alpha: f64,
        p: usize,
    },
    Lti {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<f64>,
        #[serde(rename = "C")]
        c: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmaMode {
    #[default]
    Shifted,
    TwoHead,
}

/// A construction request; `closed_loop` sets `K = C` so the result can roll
/// itself forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructRequest {
    #[serde(flatten)]
    pub spec: ConstructSpec,
    #[serde(default)]
    pub closed_loop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Constructed {
    Single(Ssm),
    TwoHead { ar: Ssm, ma: Ssm },
}

impl ConstructRequest {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn build(&self) -> Result<Constructed> {
        let close = |mut s: Ssm| {
            if self.closed_loop {
                s.k = Some(s.c.clone());
            }
            s
        };
        let single = |s: Ssm| Ok(Constructed::Single(close(s)));
        match &self.spec {
            ConstructSpec::Ar { phi } => single(ar_to_ssm(phi)?),
            ConstructSpec::Ses { alpha, p } => single(ar_to_ssm(&ses_to_ar(*alpha, *p)?)?),
            ConstructSpec::Arma { spec, mode } => {
                spec.validate()?;
                match mode {
                    ArmaMode::Shifted => single(arma_shifted_ssm(&spec.phi, &spec.theta)?),
                    ArmaMode::TwoHead => {
                        if self.closed_loop {
                            return Err(SsmError::invalid(
                                "closed_loop",
                                "the two-head form is driven by external noise",
                            ));
                        }
                        let (ar, ma) = arma_two_head(&spec.phi, &spec.theta)?;
                        Ok(Constructed::TwoHead { ar, ma })
                    }
                }
            }
            ConstructSpec::Lti { a, b, c } => {
                let d = a.len();
                for row in a {
                    check_len("LTI A row", d, row.len())?;
                }
                let dense = DMatrix::from_fn(d, d, |i, j| a[i][j]);
                single(lti_to_companion(&dense, b, c)?)
            }
        }
    }
}
