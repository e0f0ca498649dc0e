use companion_ssm::spectral::{dft, idft, quad};
use companion_ssm::{normalize_stability, CompanionMatrix, Ssm};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;

fn dense_companion(a: &[f64]) -> DMatrix<f64> {
    let d = a.len();
    DMatrix::from_fn(d, d, |i, j| if j == d - 1 { a[i] } else if i == j + 1 { 1.0 } else { 0.0 })
}

fn rel_err(x: &[f64], y: &[f64]) -> f64 {
    let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

fn pair(max_d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_d).prop_flat_map(|d| (prop::collection::vec(-2.0f64..2.0, d), prop::collection::vec(-2.0f64..2.0, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn apply_matches_dense((a, x) in pair(32)) {
        let m = CompanionMatrix::new(a.clone()).unwrap();
        let dense = dense_companion(&a);
        prop_assert_eq!(m.dense(), dense.clone());
        let want = &dense * DVector::from_column_slice(&x);
        prop_assert!(rel_err(&m.apply(&x).unwrap(), want.as_slice()) < 1e-12);
        let want_row = DVector::from_column_slice(&x).transpose() * &dense;
        prop_assert!(rel_err(&m.apply_row(&x).unwrap(), want_row.as_slice()) < 1e-12);
    }

    #[test]
    fn power_apply_matches_dense((a, v) in pair(16), k in 0usize..=16) {
        let a = normalize_stability(&a);
        let m = CompanionMatrix::new(a.clone()).unwrap();
        let want = dense_companion(&a).pow(k as u32) * DVector::from_column_slice(&v);
        prop_assert!(rel_err(&m.power_apply(&v, k).unwrap(), want.as_slice()) < 1e-10);
    }

    #[test]
    fn normalization_bounds_spectrum(a in prop::collection::vec(-5.0f64..5.0, 1..24)) {
        let n = normalize_stability(&a);
        let l1: f64 = n.iter().map(|v| v.abs()).sum();
        prop_assert!(l1 <= 1.0 + 1e-12);
        if a.iter().any(|v| *v != 0.0) {
            prop_assert!((l1 - 1.0).abs() < 1e-12);
        }
        let radius = dense_companion(&n).complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!(radius <= 1.0 + 1e-9);
    }

    #[test]
    fn shift_is_nilpotent(v in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let m = CompanionMatrix::shift(v.len()).unwrap();
        prop_assert!(m.power_apply(&v, v.len()).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn parseval(v in prop::collection::vec(-1.0f64..1.0, 1..300)) {
        let c: Vec<Complex64> = v.iter().map(|x| Complex64::new(*x, 0.0)).collect();
        let f = dft(&c).unwrap();
        let lhs: f64 = v.iter().map(|x| x * x).sum();
        let rhs: f64 = f.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64;
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(1e-300));
        let back = idft(&f).unwrap();
        prop_assert!(back.iter().zip(&c).all(|(a, b)| (a - b).norm() < 1e-10));
    }

    #[test]
    fn quad_is_dense_resolvent_form((u, v) in pair(16), len in 1usize..32, alpha in -2.0f64..2.0) {
        let d = u.len();
        let shift = dense_companion(&vec![0.0; d]).map(|x| Complex64::new(x, 0.0));
        let cvec = |x: &[f64]| DVector::from_iterator(d, x.iter().map(|v| Complex64::new(*v, 0.0)));
        let q = quad(&u, &v, len).unwrap();
        // The resolvent is lower triangular: swapping arguments transposes S.
        let swapped = quad(&v, &u, len).unwrap();
        let scaled: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + alpha * b).collect();
        let q_lin = quad(&scaled, &v, len).unwrap();
        let q_vv = quad(&v, &v, len).unwrap();
        for m in 0..len {
            let w = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * m as f64 / len as f64);
            let eye = DMatrix::<Complex64>::identity(d, d);
            let r = (&eye - &shift * w).try_inverse().unwrap();
            let rt = (&eye - shift.transpose() * w).try_inverse().unwrap();
            let want = (cvec(&u).transpose() * &r * cvec(&v))[(0, 0)];
            let want_t = (cvec(&u).transpose() * &rt * cvec(&v))[(0, 0)];
            prop_assert!((q[m] - want).norm() < 1e-9, "bin {}: {} vs {}", m, q[m], want);
            prop_assert!((swapped[m] - want_t).norm() < 1e-9);
            prop_assert!((q_lin[m] - (q[m] + q_vv[m] * alpha)).norm() < 1e-9);
        }
    }
}

#[test]
fn step_reports_both_conventions() {
    let s = Ssm::new(CompanionMatrix::new(vec![0.5, 0.25]).unwrap(), vec![1.0, 0.0], vec![1.0, 2.0], 0.5, None).unwrap();
    let out = s.step(&[1.0, 1.0], 2.0).unwrap();
    // x_next = A x + B u = [0.5 + 2, 1 + 0.25] with A = [[0, .5], [1, .25]].
    assert_eq!(out.x_next, vec![2.5, 1.25]);
    assert_eq!(out.y_pre, 1.0 + 2.0 + 0.5 * 2.0);
    assert_eq!(out.y_post, 2.5 + 2.5);
}

#[test]
fn ssm_json_round_trip() {
    let mut s = Ssm::new(
        CompanionMatrix::new(vec![0.1, -0.2, 0.3]).unwrap(),
        vec![1.0, 0.0, 0.0],
        vec![0.3, 1.0 / 3.0, -0.7],
        0.25,
        None,
    )
    .unwrap();
    s.k = Some(vec![0.0, 1e-17, 2.0]);
    assert_eq!(Ssm::from_json(&s.to_json().unwrap()).unwrap(), s);
    assert!(Ssm::from_json(r#"{"a":[0.0],"B":[1.0],"C":[1.0,2.0],"d":1}"#).is_err());
    assert!(Ssm::from_json(r#"{"a":[0.0, 0.0],"B":[1.0, 0.0],"C":[1.0,2.0],"d":3}"#).is_err());
}
