//! Cross-checks of the two covariance evaluators against each other and
//! against an exact rational expansion of the Laurent coefficients.

use std::collections::BTreeMap;

use num_rational::Rational64;
use overlap_wishart::entry_process::ScalarField;
use overlap_wishart::theory::{
    covariance_exact, covariance_quadrature, laurent_coefficient, sine_weight_integral, CovarianceParams,
    QuadratureOptions,
};
use proptest::prelude::*;

/// `(a + z + r2/z)^p` by repeated polynomial multiplication over rationals.
fn laurent_expansion(p: u32, a: Rational64, r2: Rational64) -> BTreeMap<i32, Rational64> {
    let mut poly = BTreeMap::from([(0, Rational64::from_integer(1))]);
    for _ in 0..p {
        let mut next: BTreeMap<i32, Rational64> = BTreeMap::new();
        for (&deg, &c) in &poly {
            for (shift, factor) in [(0, a), (1, Rational64::from_integer(1)), (-1, r2)] {
                *next.entry(deg + shift).or_insert_with(|| Rational64::from_integer(0)) += c * factor;
            }
        }
        poly = next;
    }
    poly
}

fn to_f64(x: Rational64) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

#[test]
fn laurent_coefficients_match_rational_expansion() {
    let a = Rational64::new(7, 2);
    let r = Rational64::new(3, 2);
    for p in 1..=6u32 {
        let poly = laurent_expansion(p, a, r * r);
        for k in 0..=p + 2 {
            let expected = poly.get(&(-1 - k as i32)).copied().map(to_f64).unwrap_or(0.0);
            let got = laurent_coefficient(p, k, 3.5, 1.5);
            assert!(
                (got - expected).abs() <= 1e-14 * expected.abs(),
                "p={p} k={k}: {got} vs {expected}"
            );
            if k >= p {
                assert_eq!(got, 0.0);
            }
        }
    }
}

#[test]
fn sine_weight_integral_matches_simpson() {
    for p in 1..=6 {
        let (a, r) = (2.5, 1.2);
        let n = 20_000;
        let h = std::f64::consts::PI / n as f64;
        let f = |phi: f64| phi.sin().powi(2) * (a + 2.0 * r * phi.cos()).powi(p as i32 - 1);
        let mut s = f(0.0) + f(std::f64::consts::PI);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let simpson = r * r * s * h / 3.0;
        let exact = sine_weight_integral(p, a, r);
        assert!((simpson - exact).abs() < 1e-10 * exact.abs(), "p={p}");
    }
}

fn params(p_i: u32, p_j: u32, dims: [f64; 4], theta: f64, field: ScalarField, c1: f64) -> CovarianceParams {
    CovarianceParams {
        p_i,
        p_j,
        mu_i: dims[0],
        nu_i: dims[1],
        mu_j: dims[2],
        nu_j: dims[3],
        theta,
        field,
        c1,
        c2: 1.0 + 2.0 / field.beta_f64() * c1 * c1,
    }
}

#[test]
fn quadrature_agrees_with_residue_sum_on_mixed_powers() {
    let opts = QuadratureOptions::default();
    for (pi, pj) in [(1, 3), (2, 4), (3, 2), (4, 4)] {
        let p = params(pi, pj, [1.5, 0.5, 1.0, 1.0], 0.125, ScalarField::Complex, 0.5);
        let exact = covariance_exact(&p).unwrap();
        let quad = covariance_quadrature(&p, &opts).unwrap();
        assert!((exact - quad).abs() <= 1e-6f64.max(1e-6 * exact.abs()), "{pi},{pj}: {exact} vs {quad}");
    }
}

#[test]
fn singular_self_overlap_quadrature() {
    // i = j: theta = 1/(mu nu) puts the log singularity on the contour.
    for p in 1..=3 {
        let s = params(p, p, [2.0, 1.0, 2.0, 1.0], 0.5, ScalarField::Real, 1.0);
        let exact = covariance_exact(&s).unwrap();
        let quad = covariance_quadrature(&s, &QuadratureOptions { abs_tol: 1e-7, max_refinements: 5000 }).unwrap();
        assert!((exact - quad).abs() <= 1e-6f64.max(1e-6 * exact), "p={p}: {exact} vs {quad}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exact_is_symmetric(
        p_i in 1u32..6, p_j in 1u32..6,
        mu_i in 0.2f64..4.0, nu_i in 0.2f64..4.0, mu_j in 0.2f64..4.0, nu_j in 0.2f64..4.0,
        frac in 0.0f64..1.0, c1 in -1.0f64..1.0, beta_idx in 0usize..3,
    ) {
        let field = [ScalarField::Real, ScalarField::Complex, ScalarField::Quaternion][beta_idx];
        let theta = frac / (mu_i * nu_i * mu_j * nu_j).sqrt();
        let p = CovarianceParams {
            p_i, p_j, mu_i, nu_i, mu_j, nu_j, theta, field, c1,
            c2: 1.0 + 2.0 / field.beta_f64() * c1 * c1,
        };
        let a = covariance_exact(&p).unwrap();
        let b = covariance_exact(&p.swapped()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
    }

    #[test]
    fn self_covariance_is_non_negative(
        p in 1u32..8, mu in 0.1f64..6.0, nu in 0.1f64..6.0, beta_idx in 0usize..3,
    ) {
        let field = [ScalarField::Real, ScalarField::Complex, ScalarField::Quaternion][beta_idx];
        let s = params(p, p, [mu, nu, mu, nu], 1.0 / (mu * nu), field, 1.0);
        prop_assert!(covariance_exact(&s).unwrap() >= 0.0);
    }

    #[test]
    fn gaussian_correction_coefficient_is_non_positive(c1 in 0.0f64..=1.0, beta_idx in 0usize..3) {
        let field = [ScalarField::Real, ScalarField::Complex, ScalarField::Quaternion][beta_idx];
        let p = params(1, 1, [1.0, 1.0, 1.0, 1.0], 0.5, field, c1);
        prop_assert!(p.error_coefficient() <= 1e-15);
    }
}
