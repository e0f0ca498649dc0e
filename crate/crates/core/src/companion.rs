//! The companion matrix and the single-input single-output SSM built on it.
//!
//! A companion matrix has ones on the subdiagonal and a free last column `a`:
//!
//! ```text
//! [ 0 0 ... 0 a_0     ]
//! [ 1 0 ... 0 a_1     ]
//! [ 0 1 ... 0 a_2     ]
//! [       ...         ]
//! [ 0 0 ... 1 a_{d-1} ]
//! ```
//!
//! It is stored as `a` alone and applied in O(d). `a = 0` is the shift matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Result, SsmError};

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CompanionMatrix {
    a: Vec<f64>,
}

impl TryFrom<Vec<f64>> for CompanionMatrix {
    type Error = SsmError;

    fn try_from(a: Vec<f64>) -> Result<Self> {
        CompanionMatrix::new(a)
    }
}

impl From<CompanionMatrix> for Vec<f64> {
    fn from(m: CompanionMatrix) -> Self {
        m.a
    }
}

impl CompanionMatrix {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(SsmError::invalid("a", "state size must be positive"));
        }
        check_finite("companion column a", &a)?;
        Ok(CompanionMatrix { a })
    }

    /// The d×d shift matrix (`a = 0`).
    pub fn shift(d: usize) -> Result<Self> {
        CompanionMatrix::new(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.a
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.a
    }

    pub fn is_shift(&self) -> bool {
        self.a.iter().all(|&v| v == 0.0)
    }

    /// `A·x` without materializing `A`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("CompanionMatrix::apply", self.dim(), x.len())?;
        let mut out = x.to_vec();
        self.apply_in_place(&mut out);
        Ok(out)
    }

    /// `x ← A·x`. Caller guarantees `x.len() == d`.
    pub(crate) fn apply_in_place(&self, x: &mut [f64]) {
        let d = self.a.len();
        let last = x[d - 1];
        for i in (1..d).rev() {
            x[i] = x[i - 1] + self.a[i] * last;
        }
        x[0] = self.a[0] * last;
    }

    /// `r·A` for a row vector `r`.
    pub fn apply_row(&self, r: &[f64]) -> Result<Vec<f64>> {
        check_len("CompanionMatrix::apply_row", self.dim(), r.len())?;
        let mut out = r.to_vec();
        self.apply_row_in_place(&mut out);
        Ok(out)
    }

    /// `r ← r·A`. Caller guarantees `r.len() == d`.
    pub(crate) fn apply_row_in_place(&self, r: &mut [f64]) {
        let tail = dot(r, &self.a);
        r.copy_within(1.., 0);
        let d = r.len();
        r[d - 1] = tail;
    }

    /// `A^k·v` by `k` structured applies.
    pub fn power_apply(&self, v: &[f64], k: usize) -> Result<Vec<f64>> {
        check_len("CompanionMatrix::power_apply", self.dim(), v.len())?;
        let mut out = v.to_vec();
        for _ in 0..k {
            self.apply_in_place(&mut out);
        }
        Ok(out)
    }

    /// Materializes the matrix. Intended for oracles and small-d diagnostics.
    pub fn dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for i in 1..d {
            m[(i, i - 1)] = 1.0;
        }
        for (i, &ai) in self.a.iter().enumerate() {
            m[(i, d - 1)] = ai;
        }
        m
    }

    /// Returns the L1-normalized companion column; see [`normalize_stability`].
    pub fn normalized(&self) -> CompanionMatrix {
        CompanionMatrix {
            a: normalize_stability(&self.a),
        }
    }
}

/// Scales `a` to unit L1 norm so the companion matrix has spectral radius ≤ 1.
///
/// Every eigenvalue λ of a companion matrix satisfies |λ| ≤ max(1, Σ|a_i|), so
/// unit L1 norm bounds the spectral radius by one. The zero vector (shift
/// matrix, spectral radius 0) is returned unchanged.
pub fn normalize_stability(a: &[f64]) -> Vec<f64> {
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 || !l1.is_finite() {
        return a.to_vec();
    }
    a.iter().map(|v| v / l1).collect()
}

/// Output of one recurrence step under both output conventions.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub x_next: Vec<f64>,
    /// `C·x_k + D·u_k`, read from the state before the update.
    pub y_pre: f64,
    /// `C·x_{k+1}`, read from the state after the update (one-step prediction).
    pub y_post: f64,
}

/// One SISO state-space system with a companion state matrix:
/// `x_{k+1} = A x_k + B u_k`, `y_k = C x_k + D u_k`, and optionally a
/// closed-loop head `û_{k+1} = K x_{k+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SsmRepr", into = "SsmRepr")]
pub struct Ssm {
    pub a: CompanionMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub skip: f64,
    pub k: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SsmRepr {
    a: Vec<f64>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    #[serde(rename = "C")]
    c: Vec<f64>,
    #[serde(rename = "D", default)]
    skip: f64,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    k: Option<Vec<f64>>,
    d: usize,
}

impl TryFrom<SsmRepr> for Ssm {
    type Error = SsmError;

    fn try_from(r: SsmRepr) -> Result<Self> {
        check_len("Ssm JSON field d", r.d, r.a.len())?;
        Ssm::new(CompanionMatrix::new(r.a)?, r.b, r.c, r.skip, r.k)
    }
}

impl From<Ssm> for SsmRepr {
    fn from(s: Ssm) -> Self {
        SsmRepr {
            d: s.dim(),
            a: s.a.into(),
            b: s.b,
            c: s.c,
            skip: s.skip,
            k: s.k,
        }
    }
}

impl Ssm {
    pub fn new(
        a: CompanionMatrix,
        b: Vec<f64>,
        c: Vec<f64>,
        skip: f64,
        k: Option<Vec<f64>>,
    ) -> Result<Self> {
        let ssm = Ssm { a, b, c, skip, k };
        ssm.validate()?;
        Ok(ssm)
    }

    /// Shift SSM (`a = 0`, `B = e_1`) with output row `c`: a sliding-window
    /// convolution with kernel `c`.
    pub fn shift_with_output(c: Vec<f64>) -> Result<Self> {
        let d = c.len();
        Ssm::new(CompanionMatrix::shift(d)?, unit_vector(d, 0), c, 0.0, None)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.a.dim();
        check_len("Ssm B", d, self.b.len())?;
        check_len("Ssm C", d, self.c.len())?;
        check_finite("Ssm B", &self.b)?;
        check_finite("Ssm C", &self.c)?;
        check_finite("Ssm D", &[self.skip])?;
        if let Some(k) = &self.k {
            check_len("Ssm K", d, k.len())?;
            check_finite("Ssm K", k)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn k_or_err(&self) -> Result<&[f64]> {
        self.k.as_deref().ok_or(SsmError::MissingK)
    }

    /// Advances the state by one input and reports both output conventions.
    pub fn step(&self, x: &[f64], u: f64) -> Result<StepOutput> {
        check_len("Ssm::step state", self.dim(), x.len())?;
        let y_pre = dot(&self.c, x) + self.skip * u;
        let mut x_next = x.to_vec();
        self.step_in_place(&mut x_next, u);
        let y_post = dot(&self.c, &x_next);
        Ok(StepOutput {
            x_next,
            y_pre,
            y_post,
        })
    }

    /// `x ← A x + B u`.
    pub(crate) fn step_in_place(&self, x: &mut [f64], u: f64) {
        self.a.apply_in_place(x);
        if u != 0.0 {
            for (xi, bi) in x.iter_mut().zip(&self.b) {
                *xi += bi * u;
            }
        }
    }

    /// `A + BK` applied to `x` in place: shift plus two rank-1 updates.
    pub(crate) fn closed_loop_apply_in_place(&self, k: &[f64], x: &mut [f64]) {
        let feedback = dot(k, x);
        self.step_in_place(x, feedback);
    }

    /// `r ← r (A + BK)`.
    pub(crate) fn closed_loop_apply_row_in_place(&self, k: &[f64], r: &mut [f64]) {
        let rb = dot(r, &self.b);
        self.a.apply_row_in_place(r);
        for (ri, ki) in r.iter_mut().zip(k) {
            *ri += rb * ki;
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub(crate) fn unit_vector(d: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[i] = 1.0;
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn cm(a: &[f64]) -> CompanionMatrix {
        CompanionMatrix::new(a.to_vec()).unwrap()
    }

    #[test]
    fn apply_examples() {
        assert_eq!(cm(&[0.0, 0.0]).apply(&[3.0, 5.0]).unwrap(), vec![0.0, 3.0]);
        assert_eq!(cm(&[1.0, 1.0]).apply(&[0.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(cm(&[0.5, 0.5]).apply(&[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(
            cm(&[0.0, 0.0]).apply(&[1.0]),
            Err(SsmError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn apply_row_examples() {
        assert_eq!(cm(&[0.0, 0.0]).apply_row(&[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(cm(&[0.0, 0.0]).apply_row(&[0.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(cm(&[1.0, 1.0]).apply_row(&[1.0, 1.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn power_apply_examples() {
        let shift = cm(&[0.0; 3]);
        assert_eq!(shift.power_apply(&[1.0, 0.0, 0.0], 3).unwrap(), vec![0.0; 3]);
        assert_eq!(cm(&[0.3, -2.0]).power_apply(&[4.0, 5.0], 0).unwrap(), vec![4.0, 5.0]);
        assert_eq!(cm(&[1.0, 1.0]).power_apply(&[1.0, 0.0], 2).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn dense_layout() {
        assert_eq!(cm(&[0.0, 0.0]).dense(), DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert_eq!(cm(&[2.0, 3.0]).dense(), DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 3.0]));
        assert_eq!(cm(&[7.0]).dense(), DMatrix::from_row_slice(1, 1, &[7.0]));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_stability(&[2.0, 2.0]), vec![0.5, 0.5]);
        assert_eq!(normalize_stability(&[0.0, 0.0, 0.0]), vec![0.0; 3]);
        assert_eq!(normalize_stability(&[-3.0, 1.0]), vec![-0.75, 0.25]);
        // λ² − 0.5λ − 0.5 = 0 → {1, −0.5}
        let eig = cm(&[0.5, 0.5]).dense().complex_eigenvalues();
        let mut mags: Vec<f64> = eig.iter().map(|z| z.re).collect();
        mags.sort_by(f64::total_cmp);
        assert!((mags[0] + 0.5).abs() < 1e-12 && (mags[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_examples() {
        let phi = [0.7, -0.1];
        let ssm = Ssm::new(cm(&[0.0, 0.0]), vec![1.0, 0.0], phi.to_vec(), 0.0, None).unwrap();
        let s1 = ssm.step(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(s1.x_next, vec![1.0, 0.0]);
        assert_eq!(s1.y_pre, 0.0);
        let s2 = ssm.step(&s1.x_next, 0.0).unwrap();
        assert_eq!(s2.x_next, vec![0.0, 1.0]);
        assert_eq!(s2.y_pre, phi[0]);

        let skip = Ssm::new(cm(&[0.0, 0.0]), vec![1.0, 0.0], vec![0.0, 0.0], 1.0, None).unwrap();
        assert_eq!(skip.step(&[0.0, 0.0], 3.0).unwrap().y_pre, 3.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(CompanionMatrix::new(vec![]).is_err());
        assert!(CompanionMatrix::new(vec![f64::NAN]).is_err());
        assert!(Ssm::new(cm(&[0.0, 0.0]), vec![1.0], vec![0.0, 0.0], 0.0, None).is_err());
        assert!(Ssm::new(cm(&[0.0]), vec![1.0], vec![0.0], 0.0, Some(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn json_field_names() {
        let ssm = Ssm::new(cm(&[0.1, 0.2]), vec![1.0, 0.0], vec![0.5, 0.25], 0.0, Some(vec![1.0, 1.0]))
            .unwrap();
        let v: serde_json::Value = serde_json::to_value(&ssm).unwrap();
        for key in ["a", "B", "C", "D", "K", "d"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["d"], 2);
        let back: Ssm = serde_json::from_value(v).unwrap();
        assert_eq!(back, ssm);

        let bad = r#"{"a":[0,0],"B":[1,0],"C":[1,0],"D":0,"d":3}"#;
        assert!(Ssm::from_json(bad).is_err());
        let no_k = r#"{"a":[0],"B":[1],"C":[2],"d":1}"#;
        assert_eq!(Ssm::from_json(no_k).unwrap().k, None);
    }

    fn dense_mul(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
        (m * DVector::from_column_slice(v)).iter().copied().collect()
    }

    fn close(x: &[f64], y: &[f64], rel: f64) -> bool {
        let scale = y.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        x.iter().zip(y).all(|(a, b)| (a - b).abs() <= rel * scale)
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, d)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn apply_matches_dense((a, x) in (1usize..=32).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d)))) {
            let m = cm(&a);
            prop_assert!(close(&m.apply(&x).unwrap(), &dense_mul(&m.dense(), &x), 1e-12));
        }

        #[test]
        fn apply_row_matches_dense((a, r) in (1usize..=32).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d)))) {
            let m = cm(&a);
            let expect = dense_mul(&m.dense().transpose(), &r);
            prop_assert!(close(&m.apply_row(&r).unwrap(), &expect, 1e-12));
        }

        #[test]
        fn power_apply_matches_dense(
            (a, v) in (1usize..=16).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d))),
            k in 0usize..=16,
        ) {
            let m = cm(&normalize_stability(&a));
            let dense = m.dense().pow(k as u32);
            prop_assert!(close(&m.power_apply(&v, k).unwrap(), &dense_mul(&dense, &v), 1e-12));
        }

        #[test]
        fn shift_is_nilpotent(v in (1usize..=24).prop_flat_map(vec_strategy)) {
            let d = v.len();
            let out = CompanionMatrix::shift(d).unwrap().power_apply(&v, d).unwrap();
            prop_assert!(out.iter().all(|&x| x == 0.0));
        }

        #[test]
        fn normalized_spectral_radius_at_most_one(a in (1usize..=24).prop_flat_map(vec_strategy)) {
            prop_assume!(a.iter().any(|&v| v != 0.0));
            let n = normalize_stability(&a);
            let l1: f64 = n.iter().map(|v| v.abs()).sum();
            prop_assert!((l1 - 1.0).abs() < 1e-14);
            let rho = cm(&n).dense().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            prop_assert!(rho <= 1.0 + 1e-9, "rho = {}", rho);
        }
    }
}
