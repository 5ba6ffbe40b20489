//! Streaming moment accumulation with batch-means standard errors.

use ndarray::Array2;
use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use super::exact::{scaled_to_f64, ExactSum, UNIT_EXP};
use super::McError;

/// Exact power sums of a shifted vector stream.
///
/// Samples are shifted by a fixed reference vector before accumulation to
/// keep the rounded products well conditioned. Per coordinate the first four
/// power sums are kept; across coordinates only the cross products.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentAccumulator {
    shift: Vec<u64>,
    count: u64,
    s1: Vec<ExactSum>,
    /// Upper triangle, row-major: `(a, b)` with `a <= b`.
    cross: Vec<ExactSum>,
    s3: Vec<ExactSum>,
    s4: Vec<ExactSum>,
}

fn packed(dim: usize, a: usize, b: usize) -> usize {
    debug_assert!(a <= b);
    a * dim - a * (a + 1) / 2 + b
}

impl MomentAccumulator {
    pub fn new(shift: &[f64]) -> Self {
        let dim = shift.len();
        Self {
            shift: shift.iter().map(|x| x.to_bits()).collect(),
            count: 0,
            s1: vec![ExactSum::new(); dim],
            cross: vec![ExactSum::new(); dim * (dim + 1) / 2],
            s3: vec![ExactSum::new(); dim],
            s4: vec![ExactSum::new(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn shift_value(&self, a: usize) -> f64 {
        f64::from_bits(self.shift[a])
    }

    pub fn push(&mut self, x: &[f64]) -> Result<(), McError> {
        let dim = self.dim();
        if x.len() != dim {
            return Err(McError::InvalidConfig(format!("sample has {} coordinates, expected {dim}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(McError::NonFinite);
        }
        let y: Vec<f64> = x.iter().enumerate().map(|(a, v)| v - self.shift_value(a)).collect();
        for a in 0..dim {
            let sq = y[a] * y[a];
            self.s1[a].add(y[a]);
            self.s3[a].add(sq * y[a]);
            self.s4[a].add(sq * sq);
            for b in a..dim {
                self.cross[packed(dim, a, b)].add(y[a] * y[b]);
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<(), McError> {
        if self.shift != other.shift {
            return Err(McError::InvalidConfig("cannot merge accumulators with different reference shifts".into()));
        }
        self.count += other.count;
        for (dst, src) in [
            (&mut self.s1, &other.s1),
            (&mut self.cross, &other.cross),
            (&mut self.s3, &other.s3),
            (&mut self.s4, &other.s4),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                d.merge(s);
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.count as f64;
        (0..self.dim()).map(|a| self.s1[a].to_f64() / n + self.shift_value(a)).collect()
    }

    /// Unbiased sample covariance, computed exactly from the power sums and
    /// rounded once.
    pub fn covariance(&self) -> Array2<f64> {
        let dim = self.dim();
        let n = self.count;
        let mut out = Array2::from_elem((dim, dim), f64::NAN);
        if n < 2 {
            return out;
        }
        let nb = BigInt::from(n);
        for a in 0..dim {
            for b in a..dim {
                let num = (&nb * self.cross[packed(dim, a, b)].units() << UNIT_EXP)
                    - self.s1[a].units() * self.s1[b].units();
                let v = scaled_to_f64(&num, 2 * UNIT_EXP) / (n as f64 * (n - 1) as f64);
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        out
    }

    /// Biased central moments `(m2, m3, m4)` of coordinate `a`.
    fn central_moments(&self, a: usize) -> (f64, f64, f64) {
        let n = BigInt::from(self.count);
        let nf = self.count as f64;
        let s1 = self.s1[a].units();
        let s2 = self.cross[packed(self.dim(), a, a)].units();
        let s3 = self.s3[a].units();
        let s4 = self.s4[a].units();
        let u = UNIT_EXP;
        let s1_2 = s1 * s1;
        let s1_3 = &s1_2 * s1;
        let m2 = (&n * s2 << u) - &s1_2;
        let m3 = (&n * &n * s3 << (2 * u)) - (BigInt::from(3) * &n * s1 * s2 << u) + BigInt::from(2) * &s1_3;
        let m4 = (&n * &n * &n * s4 << (3 * u)) - (BigInt::from(4) * &n * &n * s1 * s3 << (2 * u))
            + (BigInt::from(6) * &n * &s1_2 * s2 << u)
            - BigInt::from(3) * &s1_3 * s1;
        (
            scaled_to_f64(&m2, 2 * u) / (nf * nf),
            scaled_to_f64(&m3, 3 * u) / (nf * nf * nf),
            scaled_to_f64(&m4, 4 * u) / (nf * nf * nf * nf),
        )
    }

    /// Sample skewness `m3 / m2^1.5` per coordinate.
    pub fn skewness(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|a| {
                let (m2, m3, _) = self.central_moments(a);
                m3 / m2.powf(1.5)
            })
            .collect()
    }

    /// Sample excess kurtosis `m4 / m2^2 - 3` per coordinate.
    pub fn excess_kurtosis(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|a| {
                let (m2, _, m4) = self.central_moments(a);
                m4 / (m2 * m2) - 3.0
            })
            .collect()
    }
}

/// Accumulator of a whole run: exact totals plus the covariance estimate of
/// every completed batch, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunAccumulator {
    total: MomentAccumulator,
    batch_size: u64,
    batch_covariances: Vec<Array2<f64>>,
}

impl RunAccumulator {
    pub fn new(shift: &[f64], batch_size: u64) -> Self {
        Self {
            total: MomentAccumulator::new(shift),
            batch_size,
            batch_covariances: Vec::new(),
        }
    }

    /// Adds one batch of samples.
    pub fn push_batch<'a>(&mut self, samples: impl IntoIterator<Item = &'a [f64]>) -> Result<(), McError> {
        let mut batch = MomentAccumulator::new(&self.total.shift.iter().map(|b| f64::from_bits(*b)).collect::<Vec<_>>());
        for x in samples {
            batch.push(x)?;
        }
        self.add_batch(batch)
    }

    pub(crate) fn add_batch(&mut self, batch: MomentAccumulator) -> Result<(), McError> {
        self.total.merge(&batch)?;
        self.batch_covariances.push(batch.covariance());
        if batch.count() != self.batch_size {
            // Short final batch: counted in the totals, excluded from the SE.
            self.batch_covariances.pop();
        }
        Ok(())
    }

    /// Appends all batches of `other`, which must follow this one.
    pub fn merge(&mut self, other: &RunAccumulator) -> Result<(), McError> {
        if self.batch_size != other.batch_size {
            return Err(McError::InvalidConfig("cannot merge runs with different batch sizes".into()));
        }
        self.total.merge(&other.total)?;
        self.batch_covariances.extend(other.batch_covariances.iter().cloned());
        Ok(())
    }

    pub fn replicas(&self) -> u64 {
        self.total.count()
    }

    pub fn full_batches(&self) -> usize {
        self.batch_covariances.len()
    }

    /// Batch-means standard error of each covariance entry:
    /// `sd(batch estimates) / sqrt(batches)`. NaN with fewer than two full
    /// batches.
    pub fn covariance_se(&self) -> Array2<f64> {
        let dim = self.total.dim();
        let nb = self.batch_covariances.len();
        if nb < 2 {
            return Array2::from_elem((dim, dim), f64::NAN);
        }
        let nbf = nb as f64;
        let mut mean = Array2::<f64>::zeros((dim, dim));
        for c in &self.batch_covariances {
            mean += c;
        }
        mean /= nbf;
        let mut var = Array2::<f64>::zeros((dim, dim));
        for c in &self.batch_covariances {
            let d = c - &mean;
            var += &(&d * &d);
        }
        var.mapv(|v| (v / (nbf - 1.0) / nbf).sqrt())
    }

    pub fn finish(&self) -> super::McEstimate {
        super::McEstimate {
            mean: self.total.mean(),
            cov: self.total.covariance(),
            se_cov: self.covariance_se(),
            skewness: self.total.skewness(),
            excess_kurtosis: self.total.excess_kurtosis(),
            replicas_used: self.total.count(),
            full_batches: self.full_batches(),
        }
    }

    pub(crate) fn to_state(&self) -> AccumulatorState {
        let hex = |v: &[ExactSum]| v.iter().map(|s| s.units().to_str_radix(16)).collect();
        AccumulatorState {
            shift: self.total.shift.clone(),
            count: self.total.count,
            s1: hex(&self.total.s1),
            cross: hex(&self.total.cross),
            s3: hex(&self.total.s3),
            s4: hex(&self.total.s4),
            batch_size: self.batch_size,
            batch_covariances: self
                .batch_covariances
                .iter()
                .map(|c| c.iter().map(|x| x.to_bits()).collect())
                .collect(),
        }
    }

    pub(crate) fn from_state(state: AccumulatorState) -> Result<Self, McError> {
        let dim = state.shift.len();
        let corrupt = |what: &str| McError::Checkpoint(format!("corrupt accumulator state: {what}"));
        let parse = |v: Vec<String>, len: usize, what: &str| -> Result<Vec<ExactSum>, McError> {
            if v.len() != len {
                return Err(corrupt(what));
            }
            v.iter()
                .map(|s| BigInt::parse_bytes(s.as_bytes(), 16).map(ExactSum::from_units).ok_or_else(|| corrupt(what)))
                .collect()
        };
        let total = MomentAccumulator {
            s1: parse(state.s1, dim, "s1")?,
            cross: parse(state.cross, dim * (dim + 1) / 2, "cross")?,
            s3: parse(state.s3, dim, "s3")?,
            s4: parse(state.s4, dim, "s4")?,
            shift: state.shift,
            count: state.count,
        };
        let batch_covariances = state
            .batch_covariances
            .into_iter()
            .map(|bits| {
                Array2::from_shape_vec((dim, dim), bits.into_iter().map(f64::from_bits).collect())
                    .map_err(|_| corrupt("batch covariance shape"))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            total,
            batch_size: state.batch_size,
            batch_covariances,
        })
    }
}

/// Serialisable form of a [`RunAccumulator`]. Doubles are stored as bit
/// patterns and exact sums as hexadecimal integers, so a save/load cycle is
/// lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct AccumulatorState {
    shift: Vec<u64>,
    count: u64,
    s1: Vec<String>,
    cross: Vec<String>,
    s3: Vec<String>,
    s4: Vec<String>,
    batch_size: u64,
    batch_covariances: Vec<Vec<u64>>,
}
