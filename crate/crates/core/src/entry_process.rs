//! Laws of a single entry process `Z(t)` of the array.
//!
//! All built-in families are stationary Gaussian processes whose real
//! components are independent copies of one scalar process with variance
//! `1/beta`. That pins the one-time moments to those of a standard real,
//! complex or quaternion Gaussian and makes the two-time moments available
//! in closed form.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{EntryStream, StreamSeed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProcessError {
    #[error("beta must be 1, 2 or 4, got {0}")]
    InvalidBeta(u32),
    #[error("Ornstein-Uhlenbeck rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("time grid must be non-empty")]
    EmptyGrid,
    #[error("time grid must be strictly increasing and non-negative (offending time {0})")]
    UnsortedGrid(f64),
    #[error("moment validation needs at least {min} draws, got {got}")]
    TooFewDraws { min: usize, got: usize },
}

/// Scalar field of the entries, indexed by the Dyson index `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarField {
    Real,
    Complex,
    Quaternion,
}

impl ScalarField {
    pub fn from_beta(beta: u32) -> Result<Self, ProcessError> {
        match beta {
            1 => Ok(Self::Real),
            2 => Ok(Self::Complex),
            4 => Ok(Self::Quaternion),
            other => Err(ProcessError::InvalidBeta(other)),
        }
    }

    pub fn beta(self) -> u32 {
        match self {
            Self::Real => 1,
            Self::Complex => 2,
            Self::Quaternion => 4,
        }
    }

    pub fn beta_f64(self) -> f64 {
        f64::from(self.beta())
    }

    /// Number of real components per scalar. Equals `beta`.
    pub fn components(self) -> usize {
        self.beta() as usize
    }

    /// `E|Z|^4 = 1 + 2/beta` for a standard Gaussian of this field.
    pub fn fourth_moment(self) -> f64 {
        1.0 + 2.0 / self.beta_f64()
    }
}

/// Time-correlation family of one entry process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProcessFamily {
    /// Stationary Ornstein-Uhlenbeck process, correlation `exp(-rate |t - s|)`.
    OrnsteinUhlenbeck { rate: f64 },
    /// `Z(t) = Z(0)` for all t.
    Frozen,
    /// Independent redraw at every distinct time.
    IndependentRefresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryProcessSpec {
    pub field: ScalarField,
    pub family: ProcessFamily,
}

impl EntryProcessSpec {
    pub fn new(field: ScalarField, family: ProcessFamily) -> Result<Self, ProcessError> {
        if let ProcessFamily::OrnsteinUhlenbeck { rate } = family {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(ProcessError::InvalidRate(rate));
            }
        }
        Ok(Self { field, family })
    }

    /// OU rate at which the correlation across a gap `dt` equals `corr`.
    pub fn ou_rate_for(corr: f64, dt: f64) -> f64 {
        -corr.ln() / dt
    }

    /// Two-time correlation `E[Z(s) conj(Z(t))]`.
    pub fn c1(&self, s: f64, t: f64) -> f64 {
        if s == t {
            return 1.0;
        }
        match self.family {
            ProcessFamily::OrnsteinUhlenbeck { rate } => (-rate * (t - s).abs()).exp(),
            ProcessFamily::Frozen => 1.0,
            ProcessFamily::IndependentRefresh => 0.0,
        }
    }

    /// Two-time fourth moment `E|Z(s)|^2 |Z(t)|^2`.
    ///
    /// Per component the pair `(x(s), x(t))` is bivariate normal with variance
    /// `1/beta` and correlation `c1`, so Isserlis gives
    /// `E x(s)^2 x(t)^2 = (1 + 2 c1^2)/beta^2`; cross-component terms
    /// factorise to `1/beta^2`. Summing `beta` diagonal and `beta^2 - beta`
    /// off-diagonal terms yields `1 + (2/beta) c1^2`.
    pub fn c2(&self, s: f64, t: f64) -> f64 {
        let c1 = self.c1(s, t);
        1.0 + 2.0 / self.field.beta_f64() * c1 * c1
    }

    /// Autocorrelation of one component across a forward gap `dt >= 0`.
    fn step_correlation(&self, dt: f64) -> f64 {
        if dt == 0.0 {
            return 1.0;
        }
        match self.family {
            ProcessFamily::OrnsteinUhlenbeck { rate } => (-rate * dt).exp(),
            ProcessFamily::Frozen => 1.0,
            ProcessFamily::IndependentRefresh => 0.0,
        }
    }

    /// Samples one real component at the increasing `times`, writing
    /// `out[k * stride]` for the k-th time.
    ///
    /// Exact transitions: `x' = rho x + sqrt(1 - rho^2) sigma xi` with
    /// `sigma^2 = 1/beta`.
    #[inline]
    pub fn sample_component<R: Rng + ?Sized>(
        &self,
        times: &[f64],
        rng: &mut R,
        out: &mut [f64],
        stride: usize,
    ) {
        let sigma = (1.0 / self.field.beta_f64()).sqrt();
        let mut prev_time = 0.0;
        let mut x = 0.0;
        for (k, &t) in times.iter().enumerate() {
            if k == 0 {
                let xi: f64 = rng.sample(StandardNormal);
                x = sigma * xi;
            } else {
                let rho = self.step_correlation(t - prev_time);
                if rho != 1.0 {
                    let xi: f64 = rng.sample(StandardNormal);
                    x = rho * x + (1.0 - rho * rho).sqrt() * sigma * xi;
                }
            }
            out[k * stride] = x;
            prev_time = t;
        }
    }
}

/// Strictly increasing, non-empty list of observation times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self, ProcessError> {
        if times.is_empty() {
            return Err(ProcessError::EmptyGrid);
        }
        let mut prev = f64::NEG_INFINITY;
        for &t in &times {
            if !(t.is_finite() && t >= 0.0 && t > prev) {
                return Err(ProcessError::UnsortedGrid(t));
            }
            prev = t;
        }
        Ok(Self(times))
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = ProcessError;

    fn try_from(times: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(times)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.0
    }
}

/// One joint sample `(Z(t_1), ..., Z(t_m))`, components stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryPath {
    field: ScalarField,
    values: Vec<f64>,
}

impl EntryPath {
    /// Components of `Z(t_k)`: `[re]`, `[re, im]` or `[1, i, j, k]`.
    pub fn at(&self, k: usize) -> &[f64] {
        let d = self.field.components();
        &self.values[k * d..(k + 1) * d]
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.field.components()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn sample_entry_path(spec: &EntryProcessSpec, grid: &TimeGrid, stream: &EntryStream) -> EntryPath {
    let d = spec.field.components();
    let mut values = vec![0.0; grid.len() * d];
    for c in 0..d {
        let mut rng = stream.component(c as u32);
        spec.sample_component(grid.times(), &mut rng, &mut values[c..], d);
    }
    EntryPath {
        field: spec.field,
        values,
    }
}

/// Deviations beyond this many standard errors are flagged.
pub const MOMENT_FLAG_SE: f64 = 4.0;

pub const MIN_VALIDATION_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCheck {
    pub label: String,
    pub times: (usize, usize),
    pub estimate: f64,
    pub se: f64,
    pub expected: f64,
    pub z: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub draws: usize,
    pub checks: Vec<MomentCheck>,
}

impl MomentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| !c.flagged)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &MomentCheck> {
        self.checks.iter().filter(|c| c.flagged)
    }

    pub fn find(&self, label: &str, times: (usize, usize)) -> Option<&MomentCheck> {
        self.checks.iter().find(|c| c.label == label && c.times == times)
    }
}

#[derive(Default, Clone, Copy)]
struct Running {
    sum: f64,
    sum_sq: f64,
}

impl Running {
    #[inline]
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn finish(self, n: usize, label: String, times: (usize, usize), expected: f64) -> MomentCheck {
        let n = n as f64;
        let estimate = self.sum / n;
        let var = ((self.sum_sq - n * estimate * estimate) / (n - 1.0)).max(0.0);
        let se = (var / n).sqrt();
        let diff = estimate - expected;
        let z = if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        };
        MomentCheck {
            label,
            times,
            estimate,
            se,
            expected,
            z,
            flagged: z.abs() > MOMENT_FLAG_SE,
        }
    }
}

/// Empirical check of the one- and two-time moment conditions over
/// independent draws of the entry path on `grid`.
///
/// Draw `d` uses the entry stream of replica `d` at position (0, 0).
pub fn validate_moments(
    spec: &EntryProcessSpec,
    grid: &TimeGrid,
    draws: usize,
    seed: StreamSeed,
) -> Result<MomentReport, ProcessError> {
    if draws < MIN_VALIDATION_DRAWS {
        return Err(ProcessError::TooFewDraws {
            min: MIN_VALIDATION_DRAWS,
            got: draws,
        });
    }
    let m = grid.len();
    let d = spec.field.components();
    let mut mean = vec![Running::default(); m * d];
    let mut second = vec![Running::default(); m];
    let mut fourth = vec![Running::default(); m];
    let mut c1 = vec![Running::default(); m * m];
    let mut c2 = vec![Running::default(); m * m];
    // E[Z_a(s) Z_b(t)] for components a != b.
    let mut cross = vec![Running::default(); m * m * d * d];

    for draw in 0..draws {
        let path = sample_entry_path(spec, grid, &seed.replica(draw as u64).entry(0, 0));
        for s in 0..m {
            let zs = path.at(s);
            let abs2_s: f64 = zs.iter().map(|x| x * x).sum();
            for (c, &x) in zs.iter().enumerate() {
                mean[s * d + c].push(x);
            }
            second[s].push(abs2_s);
            fourth[s].push(abs2_s * abs2_s);
            for t in s..m {
                let zt = path.at(t);
                if t > s {
                    let abs2_t: f64 = zt.iter().map(|x| x * x).sum();
                    let re: f64 = zs.iter().zip(zt).map(|(a, b)| a * b).sum();
                    c1[s * m + t].push(re);
                    c2[s * m + t].push(abs2_s * abs2_t);
                }
                for a in 0..d {
                    for b in 0..d {
                        if a != b {
                            cross[((s * m + t) * d + a) * d + b].push(zs[a] * zt[b]);
                        }
                    }
                }
            }
        }
    }

    let times = grid.times();
    let mut checks = Vec::new();
    for s in 0..m {
        for c in 0..d {
            checks.push(mean[s * d + c].finish(draws, format!("mean[{c}]"), (s, s), 0.0));
        }
        checks.push(second[s].finish(draws, "E|Z|^2".into(), (s, s), 1.0));
        checks.push(fourth[s].finish(draws, "E|Z|^4".into(), (s, s), spec.field.fourth_moment()));
    }
    for s in 0..m {
        for t in s + 1..m {
            checks.push(c1[s * m + t].finish(draws, "c1".into(), (s, t), spec.c1(times[s], times[t])));
            checks.push(c2[s * m + t].finish(draws, "c2".into(), (s, t), spec.c2(times[s], times[t])));
        }
    }
    for s in 0..m {
        for t in s..m {
            for a in 0..d {
                for b in 0..d {
                    if a != b {
                        let acc = cross[((s * m + t) * d + a) * d + b];
                        checks.push(acc.finish(draws, format!("cross[{a},{b}]"), (s, t), 0.0));
                    }
                }
            }
        }
    }
    Ok(MomentReport { draws, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou_half(field: ScalarField) -> EntryProcessSpec {
        EntryProcessSpec::new(
            field,
            ProcessFamily::OrnsteinUhlenbeck {
                rate: std::f64::consts::LN_2,
            },
        )
        .unwrap()
    }

    fn frozen(field: ScalarField) -> EntryProcessSpec {
        EntryProcessSpec::new(field, ProcessFamily::Frozen).unwrap()
    }

    #[test]
    fn ou_with_rate_ln2_has_half_correlation_at_unit_gap() {
        let spec = ou_half(ScalarField::Real);
        assert!((spec.c1(0.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((spec.c1(1.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((EntryProcessSpec::ou_rate_for(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn equal_times_are_fully_correlated() {
        for family in [
            ProcessFamily::OrnsteinUhlenbeck { rate: 3.0 },
            ProcessFamily::Frozen,
            ProcessFamily::IndependentRefresh,
        ] {
            let spec = EntryProcessSpec::new(ScalarField::Complex, family).unwrap();
            assert_eq!(spec.c1(2.5, 2.5), 1.0);
            assert_eq!(spec.c2(2.5, 2.5), 2.0);
        }
    }

    #[test]
    fn refresh_is_uncorrelated() {
        let spec = EntryProcessSpec::new(ScalarField::Real, ProcessFamily::IndependentRefresh).unwrap();
        assert_eq!(spec.c1(0.0, 1.0), 0.0);
        assert_eq!(spec.c2(0.0, 1.0), 1.0);
    }

    #[test]
    fn c2_values() {
        assert_eq!(ou_half(ScalarField::Real).c2(0.0, 1.0), 1.5);
        assert!((ou_half(ScalarField::Quaternion).c2(0.0, 1.0) - 9.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn c2_bounded_by_cauchy_schwarz() {
        for field in [ScalarField::Real, ScalarField::Complex, ScalarField::Quaternion] {
            let spec = EntryProcessSpec::new(field, ProcessFamily::OrnsteinUhlenbeck { rate: 0.3 }).unwrap();
            for gap in [0.0, 0.1, 1.0, 10.0] {
                let c2 = spec.c2(1.0, 1.0 + gap);
                assert!((1.0..=field.fourth_moment()).contains(&c2));
                assert!(spec.c1(1.0, 1.0 + gap).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert_eq!(ScalarField::from_beta(3), Err(ProcessError::InvalidBeta(3)));
        assert!(EntryProcessSpec::new(ScalarField::Real, ProcessFamily::OrnsteinUhlenbeck { rate: 0.0 }).is_err());
        assert!(EntryProcessSpec::new(ScalarField::Real, ProcessFamily::OrnsteinUhlenbeck { rate: f64::NAN }).is_err());
        assert_eq!(TimeGrid::new(vec![]), Err(ProcessError::EmptyGrid));
        assert!(TimeGrid::new(vec![1.0, 1.0]).is_err());
        assert!(TimeGrid::new(vec![-1.0]).is_err());
        let grid = TimeGrid::new(vec![0.0]).unwrap();
        assert!(validate_moments(&frozen(ScalarField::Real), &grid, 10, StreamSeed::new(1)).is_err());
    }

    #[test]
    fn frozen_path_is_constant() {
        let spec = frozen(ScalarField::Quaternion);
        let grid = TimeGrid::new(vec![0.0, 1.0, 7.0]).unwrap();
        let path = sample_entry_path(&spec, &grid, &StreamSeed::new(3).replica(0).entry(1, 2));
        assert_eq!(path.len(), 3);
        assert_eq!(path.at(0), path.at(1));
        assert_eq!(path.at(0), path.at(2));
    }

    #[test]
    fn paths_are_deterministic() {
        let spec = ou_half(ScalarField::Complex);
        let grid = TimeGrid::new(vec![0.0, 0.5, 2.0]).unwrap();
        let stream = StreamSeed::new(99).replica(5).entry(3, 4);
        let a = sample_entry_path(&spec, &grid, &stream);
        let b = sample_entry_path(&spec, &grid, &stream);
        let bits = |p: &EntryPath| p.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn refresh_paths_decorrelate() {
        let spec = EntryProcessSpec::new(ScalarField::Real, ProcessFamily::IndependentRefresh).unwrap();
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let report = validate_moments(&spec, &grid, 100_000, StreamSeed::new(11)).unwrap();
        let c1 = report.find("c1", (0, 1)).unwrap();
        assert!(c1.z.abs() < 3.0, "{c1:?}");
    }

    #[test]
    fn ou_moments_match_isserlis() {
        let spec = ou_half(ScalarField::Real);
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let report = validate_moments(&spec, &grid, 1_000_000, StreamSeed::new(2024)).unwrap();
        let c1 = report.find("c1", (0, 1)).unwrap();
        let c2 = report.find("c2", (0, 1)).unwrap();
        assert_eq!(c1.expected, 0.5);
        assert_eq!(c2.expected, 1.5);
        assert!(c1.z.abs() < 3.0, "{c1:?}");
        assert!(c2.z.abs() < 3.0, "{c2:?}");
        assert!(report.passed());
    }

    #[test]
    fn quaternion_c2_oracle_by_simulation() {
        let spec = ou_half(ScalarField::Quaternion);
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let report = validate_moments(&spec, &grid, 200_000, StreamSeed::new(5)).unwrap();
        let c2 = report.find("c2", (0, 1)).unwrap();
        assert!((c2.expected - 9.0 / 8.0).abs() < 1e-15);
        assert!(c2.z.abs() < 3.0, "{c2:?}");
    }

    #[test]
    fn frozen_fourth_moments() {
        let grid = TimeGrid::new(vec![0.0]).unwrap();
        for (field, target) in [(ScalarField::Complex, 2.0), (ScalarField::Quaternion, 1.5)] {
            let report = validate_moments(&frozen(field), &grid, 100_000, StreamSeed::new(8)).unwrap();
            let m4 = report.find("E|Z|^4", (0, 0)).unwrap();
            assert_eq!(m4.expected, target);
            assert!(!m4.flagged, "{m4:?}");
            assert!(report.passed());
        }
    }
}
