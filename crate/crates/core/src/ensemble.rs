//! Finite-`L` realisation of overlapping Wishart blocks on the virtual array.
//!
//! Observables are rectangular windows `B_i` into one infinite array of entry
//! processes, each read at its own observation time. Entries shared by
//! several windows are generated once per replica and copied into every
//! window that contains them, which is what couples the trace statistics.

use ndarray::{Array2, ArrayView2, LinalgScalar, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entry_process::{EntryProcessSpec, ScalarField, TimeGrid};
use crate::rng::ReplicaStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("array scale L must be positive")]
    ZeroScale,
    #[error("experiment has no observables")]
    NoObservables,
    #[error("observable {index}: {reason}")]
    InvalidObservable { index: usize, reason: String },
    #[error("trace_power needs a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix power must be at least 1")]
    ZeroPower,
    #[error("could not allocate a {rows}x{cols} block")]
    Allocation { rows: usize, cols: usize },
}

/// One statistic `Tr(W^p)` of a window placed in scaled (units of `L`)
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    pub row_offset: f64,
    pub col_offset: f64,
    pub mu: f64,
    pub nu: f64,
    pub power: u32,
    pub time_index: usize,
}

/// Integer placement of a window at a concrete `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub row_start: usize,
    pub rows: usize,
    pub col_start: usize,
    pub cols: usize,
}

impl Placement {
    fn row_end(&self) -> usize {
        self.row_start + self.rows
    }

    fn col_end(&self) -> usize {
        self.col_start + self.cols
    }
}

fn interval_overlap(a_start: usize, a_end: usize, b_start: usize, b_end: usize) -> usize {
    a_end.min(b_end).saturating_sub(a_start.max(b_start))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapStats {
    pub m_ij: usize,
    pub n_ij: usize,
    pub mu_ij: f64,
    pub nu_ij: f64,
    pub theta: f64,
}

/// Trace statistics of one replica, in observable order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaStatistics {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentGeometry {
    scale: usize,
    grid: TimeGrid,
    process: EntryProcessSpec,
    observables: Vec<ObservableSpec>,
    #[serde(skip)]
    placements: Vec<Placement>,
}

fn scaled_to_count(x: f64, scale: usize) -> f64 {
    (x * scale as f64).round()
}

impl ExperimentGeometry {
    pub fn new(
        scale: usize,
        grid: TimeGrid,
        process: EntryProcessSpec,
        observables: Vec<ObservableSpec>,
    ) -> Result<Self, EnsembleError> {
        if scale == 0 {
            return Err(EnsembleError::ZeroScale);
        }
        if observables.is_empty() {
            return Err(EnsembleError::NoObservables);
        }
        let mut placements = Vec::with_capacity(observables.len());
        for (index, obs) in observables.iter().enumerate() {
            let bad = |reason: String| EnsembleError::InvalidObservable { index, reason };
            for (name, v) in [("row_offset", obs.row_offset), ("col_offset", obs.col_offset)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(bad(format!("{name} must be finite and non-negative, got {v}")));
                }
            }
            for (name, v) in [("mu", obs.mu), ("nu", obs.nu)] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(bad(format!("{name} must be finite and positive, got {v}")));
                }
            }
            if obs.power == 0 {
                return Err(bad("power must be at least 1".into()));
            }
            if obs.time_index >= grid.len() {
                return Err(bad(format!(
                    "time_index {} out of range for {} observation times",
                    obs.time_index,
                    grid.len()
                )));
            }
            let rows = scaled_to_count(obs.mu, scale);
            let cols = scaled_to_count(obs.nu, scale);
            if rows < 1.0 || cols < 1.0 {
                return Err(bad(format!("rounds to an empty {rows}x{cols} block at L={scale}")));
            }
            placements.push(Placement {
                row_start: scaled_to_count(obs.row_offset, scale) as usize,
                rows: rows as usize,
                col_start: scaled_to_count(obs.col_offset, scale) as usize,
                cols: cols as usize,
            });
        }
        Ok(Self {
            scale,
            grid,
            process,
            observables,
            placements,
        })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn process(&self) -> &EntryProcessSpec {
        &self.process
    }

    pub fn observables(&self) -> &[ObservableSpec] {
        &self.observables
    }

    pub fn len(&self) -> usize {
        self.observables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observables.is_empty()
    }

    pub fn placement(&self, i: usize) -> Placement {
        self.placements[i]
    }

    /// Observation time of observable `i`.
    pub fn time_of(&self, i: usize) -> f64 {
        self.grid.times()[self.observables[i].time_index]
    }

    /// `(m_i / L, n_i / L)` after rounding.
    pub fn effective_dims(&self, i: usize) -> (f64, f64) {
        let p = self.placements[i];
        let l = self.scale as f64;
        (p.rows as f64 / l, p.cols as f64 / l)
    }

    /// Scaled quantities that are not integral at this `L` and were rounded.
    pub fn rounding_warnings(&self) -> Vec<String> {
        let l = self.scale as f64;
        let mut out = Vec::new();
        for (i, obs) in self.observables.iter().enumerate() {
            for (name, v) in [
                ("row_offset", obs.row_offset),
                ("col_offset", obs.col_offset),
                ("mu", obs.mu),
                ("nu", obs.nu),
            ] {
                let exact = v * l;
                if (exact - exact.round()).abs() > 1e-9 * exact.abs().max(1.0) {
                    out.push(format!(
                        "observable {i}: {name}*L = {exact} is not an integer; rounded to {}",
                        exact.round()
                    ));
                }
            }
        }
        out
    }

    /// Shared rows/columns of windows `i` and `j` and the overlap ratio
    /// `theta = m_ij n_ij L^2 / (m_i n_i m_j n_j)`.
    pub fn overlap(&self, i: usize, j: usize) -> OverlapStats {
        let a = self.placements[i];
        let b = self.placements[j];
        let m_ij = interval_overlap(a.row_start, a.row_end(), b.row_start, b.row_end());
        let n_ij = interval_overlap(a.col_start, a.col_end(), b.col_start, b.col_end());
        let l = self.scale as u128;
        let num = (m_ij as u128) * (n_ij as u128) * l * l;
        let den = (a.rows as u128) * (a.cols as u128) * (b.rows as u128) * (b.cols as u128);
        OverlapStats {
            m_ij,
            n_ij,
            mu_ij: m_ij as f64 / self.scale as f64,
            nu_ij: n_ij as f64 / self.scale as f64,
            theta: num as f64 / den as f64,
        }
    }

    /// Samples every window of one replica.
    ///
    /// The union of windows is cut into cells with a constant set of covering
    /// windows. Each entry of a cell is generated once, at exactly the
    /// observation times its covering windows need, and copied into each of
    /// them.
    pub fn sample_blocks(&self, stream: &ReplicaStream) -> Result<Vec<Block>, EnsembleError> {
        let field = self.process.field;
        let d = field.components();
        let mut blocks = self
            .placements
            .iter()
            .map(|p| Block::zeros(field, p.rows, p.cols))
            .collect::<Result<Vec<_>, _>>()?;

        let row_cells = cells(self.placements.iter().map(|p| (p.row_start, p.row_end())));
        let col_cells = cells(self.placements.iter().map(|p| (p.col_start, p.col_end())));
        let times = self.grid.times();

        let mut path_times = Vec::new();
        let mut targets: Vec<(usize, usize)> = Vec::new();
        let mut buf = Vec::new();
        for (r0, r1, row_cover) in &row_cells {
            for (c0, c1, col_cover) in &col_cells {
                // Windows covering this cell and the slot of each one's time.
                let cover: Vec<usize> = row_cover.iter().copied().filter(|k| col_cover.contains(k)).collect();
                if cover.is_empty() {
                    continue;
                }
                let mut needed: Vec<usize> = cover.iter().map(|&k| self.observables[k].time_index).collect();
                needed.sort_unstable();
                needed.dedup();
                path_times.clear();
                path_times.extend(needed.iter().map(|&t| times[t]));
                targets.clear();
                targets.extend(cover.iter().map(|&k| {
                    let slot = needed.binary_search(&self.observables[k].time_index).unwrap();
                    (k, slot)
                }));
                buf.resize(d * needed.len(), 0.0);

                for r in *r0..*r1 {
                    for c in *c0..*c1 {
                        let entry = stream.entry(r as u64, c as u64);
                        for comp in 0..d {
                            let mut rng = entry.component(comp as u32);
                            self.process.sample_component(&path_times, &mut rng, &mut buf[comp..], d);
                        }
                        for &(k, slot) in &targets {
                            let p = &self.placements[k];
                            let value = &buf[slot * d..(slot + 1) * d];
                            blocks[k].set(r - p.row_start, c - p.col_start, value);
                        }
                    }
                }
            }
        }
        Ok(blocks)
    }

    /// One replica of `(Tr W_1^{p_1}(s_1), ..., Tr W_k^{p_k}(s_k))` with
    /// `W_i = B_i^* B_i / L`.
    pub fn sample_replica(&self, stream: &ReplicaStream) -> Result<ReplicaStatistics, EnsembleError> {
        let blocks = self.sample_blocks(stream)?;
        let values = blocks
            .iter()
            .zip(&self.observables)
            .map(|(b, obs)| b.wishart_trace_power(obs.power, self.scale))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ReplicaStatistics { values })
    }
}

/// Elementary intervals of the union of `ranges`, each with the indices of
/// the ranges covering it.
fn cells(ranges: impl Iterator<Item = (usize, usize)> + Clone) -> Vec<(usize, usize, Vec<usize>)> {
    let mut cuts: Vec<usize> = ranges.clone().flat_map(|(a, b)| [a, b]).collect();
    cuts.sort_unstable();
    cuts.dedup();
    cuts.windows(2)
        .filter_map(|w| {
            let cover: Vec<usize> = ranges
                .clone()
                .enumerate()
                .filter(|(_, (a, b))| *a <= w[0] && w[1] <= *b)
                .map(|(k, _)| k)
                .collect();
            (!cover.is_empty()).then_some((w[0], w[1], cover))
        })
        .collect()
}

/// Scalars the trace routines work over.
pub trait Field: LinalgScalar + Send + Sync {
    const IS_REAL: bool;
    fn conj(self) -> Self;
    fn re(self) -> f64;
    fn norm_sqr(self) -> f64;
}

impl Field for f64 {
    const IS_REAL: bool = true;

    fn conj(self) -> Self {
        self
    }

    fn re(self) -> f64 {
        self
    }

    fn norm_sqr(self) -> f64 {
        self * self
    }
}

impl Field for Complex64 {
    const IS_REAL: bool = false;

    fn conj(self) -> Self {
        Complex64::conj(&self)
    }

    fn re(self) -> f64 {
        self.re
    }

    fn norm_sqr(self) -> f64 {
        Complex64::norm_sqr(&self)
    }
}

/// `Tr(W^p)` for a square matrix, using `ceil(p/2)` products and a final
/// contraction `sum_ab (W^h)_ab (W^(p-h))_ba`.
pub fn trace_power<T: Field>(w: ArrayView2<'_, T>, p: u32) -> Result<f64, EnsembleError> {
    let (rows, cols) = w.dim();
    if rows != cols {
        return Err(EnsembleError::NotSquare { rows, cols });
    }
    if p == 0 {
        return Err(EnsembleError::ZeroPower);
    }
    if p == 1 {
        return Ok(w.diag().iter().map(|x| x.re()).sum());
    }
    let half = p / 2;
    let mut lo = w.to_owned();
    for _ in 1..half {
        lo = lo.dot(&w);
    }
    let hi = if p % 2 == 1 { lo.dot(&w) } else { lo.clone() };
    let tr = Zip::from(&lo).and(hi.t()).fold(T::zero(), |acc, &a, &b| acc + a * b);
    Ok(tr.re())
}

/// `B^* B` or `B B^*`, whichever is smaller. Both have the same non-zero
/// spectrum.
pub fn gram<T: Field>(b: ArrayView2<'_, T>) -> Array2<T> {
    let (rows, cols) = b.dim();
    match (rows >= cols, T::IS_REAL) {
        (true, true) => b.t().dot(&b),
        (false, true) => b.dot(&b.t()),
        (true, false) => b.t().mapv(T::conj).dot(&b),
        (false, false) => b.dot(&b.t().mapv(T::conj)),
    }
}

fn try_zeros<T: Clone + num_traits::Zero>(rows: usize, cols: usize) -> Result<Array2<T>, EnsembleError> {
    let len = rows.checked_mul(cols).ok_or(EnsembleError::Allocation { rows, cols })?;
    let mut v = Vec::new();
    v.try_reserve_exact(len).map_err(|_| EnsembleError::Allocation { rows, cols })?;
    v.resize(len, T::zero());
    Ok(Array2::from_shape_vec((rows, cols), v).expect("shape matches length"))
}

/// A sampled window `B`. Quaternion windows are held as their `2m x 2n`
/// complex embedding `q = z1 + z2 j -> [[z1, z2], [-conj z2, conj z1]]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Real(Array2<f64>),
    Complex(Array2<Complex64>),
    Quaternion(Array2<Complex64>),
}

impl Block {
    pub fn zeros(field: ScalarField, rows: usize, cols: usize) -> Result<Self, EnsembleError> {
        Ok(match field {
            ScalarField::Real => Block::Real(try_zeros(rows, cols)?),
            ScalarField::Complex => Block::Complex(try_zeros(rows, cols)?),
            ScalarField::Quaternion => Block::Quaternion(try_zeros(2 * rows, 2 * cols)?),
        })
    }

    /// Logical `(rows, cols)` in field scalars.
    pub fn dim(&self) -> (usize, usize) {
        match self {
            Block::Real(a) => a.dim(),
            Block::Complex(a) => a.dim(),
            Block::Quaternion(a) => (a.nrows() / 2, a.ncols() / 2),
        }
    }

    /// Stores one scalar given by its real components.
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: &[f64]) {
        match self {
            Block::Real(a) => a[(r, c)] = v[0],
            Block::Complex(a) => a[(r, c)] = Complex64::new(v[0], v[1]),
            Block::Quaternion(a) => {
                let (i, j) = (2 * r, 2 * c);
                a[(i, j)] = Complex64::new(v[0], v[1]);
                a[(i, j + 1)] = Complex64::new(v[2], v[3]);
                a[(i + 1, j)] = Complex64::new(-v[2], v[3]);
                a[(i + 1, j + 1)] = Complex64::new(v[0], -v[1]);
            }
        }
    }

    /// Real components of the scalar at `(r, c)`.
    pub fn get(&self, r: usize, c: usize) -> Vec<f64> {
        match self {
            Block::Real(a) => vec![a[(r, c)]],
            Block::Complex(a) => vec![a[(r, c)].re, a[(r, c)].im],
            Block::Quaternion(a) => {
                let z1 = a[(2 * r, 2 * c)];
                let z2 = a[(2 * r, 2 * c + 1)];
                vec![z1.re, z1.im, z2.re, z2.im]
            }
        }
    }

    /// `Tr((B^* B / L)^p)`. For quaternions this is half the complex trace of
    /// the embedding.
    pub fn wishart_trace_power(&self, p: u32, scale: usize) -> Result<f64, EnsembleError> {
        if p == 0 {
            return Err(EnsembleError::ZeroPower);
        }
        let l = scale as f64;
        let raw = match self {
            Block::Real(a) if p == 1 => a.iter().map(|x| x * x).sum(),
            Block::Complex(a) | Block::Quaternion(a) if p == 1 => a.iter().map(|x| x.norm_sqr()).sum(),
            Block::Real(a) => trace_power(gram(a.view()).view(), p)?,
            Block::Complex(a) | Block::Quaternion(a) => trace_power(gram(a.view()).view(), p)?,
        };
        let raw = if matches!(self, Block::Quaternion(_)) { raw / 2.0 } else { raw };
        Ok(raw / l.powi(p as i32))
    }
}
