//! Limiting covariance of two trace statistics.
//!
//! For observables `i`, `j` the limit is a sum of a main term, proportional
//! to `c1`, and a fourth-moment correction proportional to
//! `C = c2 - 1 - (2/beta) c1`. Both are double integrals over the upper
//! semicircles `|zeta_k| = r_k = sqrt(mu_k nu_k)`. Two evaluators are
//! provided:
//!
//! * [`covariance_quadrature`] integrates the semicircle form in angle
//!   coordinates with nested adaptive Gauss-Kronrod.
//! * [`covariance_exact`] uses the full-circle form with kernel
//!   `(1/theta - zeta_i zeta_j)^-2`, whose residue expansion terminates after
//!   `min(p_i, p_j)` terms, and Wallis integrals for the correction.
//!
//! Global signs are fixed so that self-covariances are non-negative and the
//! `p = 1` case reduces to `2 c1 theta mu_i nu_i mu_j nu_j / beta + C theta
//! mu_i nu_i mu_j nu_j`.

pub mod gauss_kronrod;

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::ExperimentGeometry;
use crate::entry_process::ScalarField;
pub use gauss_kronrod::QuadratureError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid covariance parameters: {0}")]
    InvalidParams(String),
    #[error("closed form requires p_i = p_j = {expected}, got ({p_i}, {p_j})")]
    WrongPower { expected: u32, p_i: u32, p_j: u32 },
    #[error("numerical integration failed: {0}")]
    Quadrature(#[from] QuadratureError),
    #[error("covariance matrix is not positive semi-definite: eigenvalue {eigenvalue:e} (largest {largest:e})")]
    NotPositiveSemiDefinite { eigenvalue: f64, largest: f64 },
}

/// Arguments of the limiting covariance for one pair of observables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub p_i: u32,
    pub p_j: u32,
    pub mu_i: f64,
    pub nu_i: f64,
    pub mu_j: f64,
    pub nu_j: f64,
    pub theta: f64,
    pub field: ScalarField,
    pub c1: f64,
    pub c2: f64,
}

/// Per-observable constants: power, kernel shift `A = mu + nu`, radius
/// `r = sqrt(mu nu)`.
#[derive(Debug, Clone, Copy)]
struct Side {
    p: u32,
    a: f64,
    r: f64,
}

const BOUND_SLACK: f64 = 1e-12;

impl CovarianceParams {
    /// Parameters of pair `(i, j)` of a geometry at its finite `L`.
    pub fn for_pair(geom: &ExperimentGeometry, i: usize, j: usize) -> Self {
        let obs = geom.observables();
        let (mu_i, nu_i) = geom.effective_dims(i);
        let (mu_j, nu_j) = geom.effective_dims(j);
        let (s, t) = (geom.time_of(i), geom.time_of(j));
        let process = geom.process();
        Self {
            p_i: obs[i].power,
            p_j: obs[j].power,
            mu_i,
            nu_i,
            mu_j,
            nu_j,
            theta: geom.overlap(i, j).theta,
            field: process.field,
            c1: process.c1(s, t),
            c2: process.c2(s, t),
        }
    }

    pub fn beta(&self) -> f64 {
        self.field.beta_f64()
    }

    /// `C = c2 - 1 - (2/beta) c1`, the coefficient of the correction term.
    pub fn error_coefficient(&self) -> f64 {
        self.c2 - 1.0 - 2.0 / self.beta() * self.c1
    }

    /// `theta r_i r_j`; at most 1 for consistent overlaps.
    pub fn kernel_ratio(&self) -> f64 {
        self.theta * (self.mu_i * self.nu_i * self.mu_j * self.nu_j).sqrt()
    }

    /// The same pair with the roles of `i` and `j` exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            p_i: self.p_j,
            p_j: self.p_i,
            mu_i: self.mu_j,
            nu_i: self.nu_j,
            mu_j: self.mu_i,
            nu_j: self.nu_i,
            ..*self
        }
    }

    fn side_i(&self) -> Side {
        Side {
            p: self.p_i,
            a: self.mu_i + self.nu_i,
            r: (self.mu_i * self.nu_i).sqrt(),
        }
    }

    fn side_j(&self) -> Side {
        Side {
            p: self.p_j,
            a: self.mu_j + self.nu_j,
            r: (self.mu_j * self.nu_j).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: String| Err(TheoryError::InvalidParams(m));
        if self.p_i == 0 || self.p_j == 0 {
            return bad("powers must be at least 1".into());
        }
        for (name, v) in [("mu_i", self.mu_i), ("nu_i", self.nu_i), ("mu_j", self.mu_j), ("nu_j", self.nu_j)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.theta.is_finite() && self.theta >= 0.0) {
            return bad(format!("theta must be non-negative, got {}", self.theta));
        }
        if self.kernel_ratio() > 1.0 + BOUND_SLACK {
            return bad(format!(
                "theta * sqrt(mu_i nu_i mu_j nu_j) = {} exceeds 1",
                self.kernel_ratio()
            ));
        }
        if !(self.c1.abs() <= 1.0 + BOUND_SLACK) {
            return bad(format!("c1 must lie in [-1, 1], got {}", self.c1));
        }
        let c2_max = self.field.fourth_moment();
        if !(self.c2 >= 1.0 - BOUND_SLACK && self.c2 <= c2_max + BOUND_SLACK) {
            return bad(format!("c2 must lie in [1, {c2_max}], got {}", self.c2));
        }
        Ok(())
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

/// Coefficient of `zeta^(-1-k)` in the Laurent polynomial
/// `(a + zeta + r^2 / zeta)^p`.
///
/// A term `a^u zeta^v (r^2/zeta)^w` with `u + v + w = p` has degree `v - w`,
/// so degree `-1-k` forces `w = v + 1 + k` and `u = p - 2v - 1 - k`. The sum
/// is empty, hence zero, for `k >= p`.
pub fn laurent_coefficient(p: u32, k: u32, a: f64, r: f64) -> f64 {
    let r2 = r * r;
    let mut total = 0.0;
    let mut v = 0;
    while 2 * v + 1 + k <= p {
        let w = v + 1 + k;
        let u = p - 2 * v - 1 - k;
        let multinomial = binomial(p, w) * binomial(p - w, v);
        total += multinomial * a.powi(u as i32) * r2.powi(w as i32);
        v += 1;
    }
    total
}

/// `int_0^pi sin^2(phi) cos^m(phi) dphi`.
pub fn wallis_sin2_cos(m: u32) -> f64 {
    if m % 2 == 1 {
        return 0.0;
    }
    // (m-1)!! / m!!
    let mut ratio = 1.0;
    let mut q = 2;
    while q <= m {
        ratio *= f64::from(q - 1) / f64::from(q);
        q += 2;
    }
    PI * ratio / f64::from(m + 2)
}

/// `r^2 int_0^pi sin^2(phi) (a + 2 r cos phi)^(p-1) dphi` in closed form.
pub fn sine_weight_integral(p: u32, a: f64, r: f64) -> f64 {
    let n = p - 1;
    let sum: f64 = (0..=n)
        .map(|m| binomial(n, m) * a.powi((n - m) as i32) * (2.0 * r).powi(m as i32) * wallis_sin2_cos(m))
        .sum();
    r * r * sum
}

/// Limiting covariance as a terminating residue sum.
pub fn covariance_exact(params: &CovarianceParams) -> Result<f64, TheoryError> {
    params.validate()?;
    let (si, sj) = (params.side_i(), params.side_j());
    let theta = params.theta;
    if theta == 0.0 {
        return Ok(0.0);
    }
    let series: f64 = (0..si.p.min(sj.p))
        .map(|k| {
            f64::from(k + 1)
                * theta.powi(k as i32)
                * laurent_coefficient(si.p, k, si.a, si.r)
                * laurent_coefficient(sj.p, k, sj.a, sj.r)
        })
        .sum();
    let main = 2.0 * params.c1 * theta / params.beta() * series;
    let correction = 4.0 * params.error_coefficient() * theta * f64::from(si.p) * f64::from(sj.p) / (PI * PI)
        * sine_weight_integral(si.p, si.a, si.r)
        * sine_weight_integral(sj.p, sj.a, sj.r);
    Ok(main + correction)
}

fn mu_nu_product(params: &CovarianceParams) -> f64 {
    params.mu_i * params.nu_i * params.mu_j * params.nu_j
}

/// Printed `p = 1` formula:
/// `2 c1 theta mu_i nu_i mu_j nu_j / beta + theta mu_i nu_i mu_j nu_j C`.
pub fn covariance_closed_form_p1(params: &CovarianceParams) -> Result<f64, TheoryError> {
    if params.p_i != 1 || params.p_j != 1 {
        return Err(TheoryError::WrongPower {
            expected: 1,
            p_i: params.p_i,
            p_j: params.p_j,
        });
    }
    params.validate()?;
    let prod = mu_nu_product(params);
    let theta = params.theta;
    Ok(2.0 * params.c1 / params.beta() * theta * prod + theta * prod * params.error_coefficient())
}

/// Printed `p = 2` formula:
/// `2 c1 theta P (4 A_i A_j + 2 theta P) / beta + C theta P 4 A_i A_j` with
/// `P = mu_i nu_i mu_j nu_j`, `A = mu + nu`.
pub fn covariance_closed_form_p2(params: &CovarianceParams) -> Result<f64, TheoryError> {
    if params.p_i != 2 || params.p_j != 2 {
        return Err(TheoryError::WrongPower {
            expected: 2,
            p_i: params.p_i,
            p_j: params.p_j,
        });
    }
    params.validate()?;
    let prod = mu_nu_product(params);
    let theta = params.theta;
    let shifts = 4.0 * (params.mu_i + params.nu_i) * (params.mu_j + params.nu_j);
    Ok(2.0 * params.c1 / params.beta() * theta * prod * (shifts + 2.0 * theta * prod)
        + params.error_coefficient() * theta * prod * shifts)
}

/// Tolerance and refinement budget for [`covariance_quadrature`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureOptions {
    pub abs_tol: f64,
    /// Maximum number of panels per one-dimensional integral.
    pub max_refinements: usize,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-7,
            max_refinements: 2000,
        }
    }
}

/// `ln|1 - x e^(i alpha)|`, written to stay accurate when `x = 1` and
/// `alpha` is near a multiple of `2 pi`.
fn log_abs_one_minus(x: f64, alpha: f64) -> f64 {
    let s = (0.5 * alpha).sin();
    0.5 * ((1.0 - x) * (1.0 - x) + 4.0 * x * s * s).ln()
}

/// Limiting covariance by direct quadrature of the semicircle integrals.
///
/// With `zeta = r e^(i phi)` the main term becomes
/// `4 c1 p_i p_j r_i r_j / (beta pi^2)` times
/// `int int F_i F_j ln|(1 - x e^(i(phi_i+phi_j))) / (1 - x e^(i(phi_i-phi_j)))|
///  sin(phi_i) sin(phi_j)`, `x = theta r_i r_j`, `F = (A + 2 r cos phi)^(p-1)`.
/// The kernel is log-singular on `phi_i = phi_j` when `x = 1`, so the inner
/// integral is split there. The correction term factorises into two
/// one-dimensional integrals.
pub fn covariance_quadrature(params: &CovarianceParams, options: &QuadratureOptions) -> Result<f64, TheoryError> {
    params.validate()?;
    if !(options.abs_tol.is_finite() && options.abs_tol > 0.0) {
        return Err(TheoryError::InvalidParams(format!(
            "abs_tol must be positive, got {}",
            options.abs_tol
        )));
    }
    if params.theta == 0.0 {
        return Ok(0.0);
    }
    let (si, sj) = (params.side_i(), params.side_j());
    let (pi_f, pj_f) = (f64::from(si.p), f64::from(sj.p));
    let budget = options.max_refinements;
    let half_tol = 0.5 * options.abs_tol;

    let weight = |s: Side, phi: f64| (s.a + 2.0 * s.r * phi.cos()).powi(s.p as i32 - 1);
    let weight_bound = |s: Side| (s.a + 2.0 * s.r).powi(s.p as i32 - 1);

    let main_prefactor = 4.0 * params.c1 * pi_f * pj_f * si.r * sj.r / (params.beta() * PI * PI);
    let main = if main_prefactor == 0.0 {
        0.0
    } else {
        let x = params.kernel_ratio().min(1.0);
        let outer_tol = half_tol / main_prefactor.abs();
        let inner_tol = outer_tol / (2.0 * PI * weight_bound(si));
        let mut failure = None;
        let outer = gauss_kronrod::integrate(
            |phi_i| {
                if failure.is_some() {
                    return 0.0;
                }
                let inner = gauss_kronrod::integrate(
                    |phi_j| {
                        weight(sj, phi_j)
                            * (log_abs_one_minus(x, phi_i + phi_j) - log_abs_one_minus(x, phi_i - phi_j))
                            * phi_j.sin()
                    },
                    0.0,
                    PI,
                    &[phi_i],
                    inner_tol,
                    budget,
                );
                match inner {
                    Ok(v) => v.value * weight(si, phi_i) * phi_i.sin(),
                    Err(e) => {
                        failure = Some(e);
                        0.0
                    }
                }
            },
            0.0,
            PI,
            &[],
            outer_tol,
            budget,
        );
        if let Some(e) = failure {
            return Err(e.into());
        }
        main_prefactor * outer?.value
    };

    let correction_prefactor = 4.0 * params.error_coefficient() * params.theta * pi_f * pj_f / (PI * PI);
    let correction = if correction_prefactor == 0.0 {
        0.0
    } else {
        let bound = |s: Side| s.r * s.r * PI * 0.5 * weight_bound(s);
        let sine_integral = |s: Side, tol: f64| {
            gauss_kronrod::integrate(|phi| phi.sin().powi(2) * weight(s, phi), 0.0, PI, &[], tol, budget)
                .map(|v| s.r * s.r * v.value)
        };
        let scale = 2.0 * correction_prefactor.abs();
        let ii = sine_integral(si, half_tol / (scale * bound(sj)))?;
        let ij = sine_integral(sj, half_tol / (scale * bound(si)))?;
        correction_prefactor * ii * ij
    };
    Ok(main + correction)
}

/// Limiting covariance matrix of all observables of a geometry.
pub fn covariance_matrix(geom: &ExperimentGeometry) -> Result<Array2<f64>, TheoryError> {
    let k = geom.len();
    let mut out = Array2::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            let v = covariance_exact(&CovarianceParams::for_pair(geom, i, j))?;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    check_psd(&out)?;
    Ok(out)
}

/// Smallest eigenvalue must be at least `-1e-8 max(1, largest)`.
pub fn check_psd(m: &Array2<f64>) -> Result<(), TheoryError> {
    let k = m.nrows();
    let eig = SymmetricEigen::new(DMatrix::from_fn(k, k, |i, j| m[(i, j)]));
    let largest = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let smallest = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if smallest < -1e-8 * largest.abs().max(1.0) {
        return Err(TheoryError::NotPositiveSemiDefinite {
            eigenvalue: smallest,
            largest,
        });
    }
    Ok(())
}
