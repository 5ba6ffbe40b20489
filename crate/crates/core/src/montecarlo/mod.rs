//! Parallel, reproducible Monte Carlo estimation of the covariance of the
//! trace statistics.
//!
//! Replicas are grouped into fixed batches. Batch `b` always contains
//! replicas `b * batch_size ..`, each replica draws from its own keyed
//! stream, and batches are reduced with exact sums, so the estimate is
//! bit-identical for any worker count and across checkpoint restarts.

pub mod accumulator;
pub mod exact;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ensemble::{EnsembleError, ExperimentGeometry};
use crate::rng::StreamSeed;
pub use accumulator::{MomentAccumulator, RunAccumulator};

#[derive(Debug, Error)]
pub enum McError {
    #[error("invalid Monte Carlo configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("a replica produced a non-finite trace statistic")]
    NonFinite,
    #[error("run aborted after {completed_batches} of {total_batches} batches: {source}")]
    Aborted {
        completed_batches: u64,
        total_batches: u64,
        source: Box<McError>,
    },
    #[error("could not start worker pool: {0}")]
    ThreadPool(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for a different experiment (hash {found}, expected {expected})")]
    CheckpointMismatch { expected: String, found: String },
    #[error("need at least {needed} replicas, have {got}")]
    TooFewReplicas { needed: u64, got: u64 },
}

/// Size of the worker pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Workers {
    #[default]
    Auto,
    Fixed(usize),
}

impl Serialize for Workers {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Workers::Auto => s.serialize_str("auto"),
            Workers::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Workers {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(serde::de::Error::custom("workers must be positive")),
            Raw::Count(n) => Ok(Workers::Fixed(n as usize)),
            Raw::Name(s) if s == "auto" => Ok(Workers::Auto),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("workers must be a positive integer or \"auto\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub replicas: u64,
    pub seed: u64,
    #[serde(default)]
    pub workers: Workers,
    pub batch_size: u64,
}

impl McConfig {
    pub fn validate(&self) -> Result<(), McError> {
        if self.replicas < 2 {
            return Err(McError::InvalidConfig(format!("replicas must be at least 2, got {}", self.replicas)));
        }
        if self.batch_size == 0 || self.batch_size > self.replicas {
            return Err(McError::InvalidConfig(format!(
                "batch_size must be in 1..={}, got {}",
                self.replicas, self.batch_size
            )));
        }
        if self.workers == Workers::Fixed(0) {
            return Err(McError::InvalidConfig("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn batches(&self) -> u64 {
        self.replicas.div_ceil(self.batch_size)
    }
}

/// Restart file written after every `every_batches` completed batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointOptions {
    pub path: PathBuf,
    pub every_batches: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    /// Unbiased sample covariance of the trace vector.
    pub cov: Array2<f64>,
    /// Batch-means standard error of each entry of `cov`.
    pub se_cov: Array2<f64>,
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
    pub replicas_used: u64,
    pub full_batches: usize,
}

impl McEstimate {
    /// Exact bitwise equality, treating NaN payloads as values.
    pub fn bit_identical(&self, other: &McEstimate) -> bool {
        let bits = |v: &mut dyn Iterator<Item = &f64>| v.map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&mut self.mean.iter()) == bits(&mut other.mean.iter())
            && bits(&mut self.cov.iter()) == bits(&mut other.cov.iter())
            && bits(&mut self.se_cov.iter()) == bits(&mut other.se_cov.iter())
            && bits(&mut self.skewness.iter()) == bits(&mut other.skewness.iter())
            && bits(&mut self.excess_kurtosis.iter()) == bits(&mut other.excess_kurtosis.iter())
            && self.replicas_used == other.replicas_used
            && self.full_batches == other.full_batches
    }
}

/// Hash of everything that determines the estimate (worker count excluded).
pub fn config_hash(geom: &ExperimentGeometry, mc: &McConfig) -> String {
    let payload = serde_json::to_vec(&(geom, mc.replicas, mc.seed, mc.batch_size)).expect("geometry serialises");
    Sha256::digest(&payload).iter().map(|b| format!("{b:02x}")).collect()
}

const CHECKPOINT_FORMAT: &str = "overlap-wishart-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config_hash: String,
    completed_batches: u64,
    accumulator: accumulator::AccumulatorState,
}

fn load_checkpoint(path: &Path, expected_hash: &str) -> Result<(u64, RunAccumulator), McError> {
    let text = fs::read_to_string(path).map_err(|e| McError::Checkpoint(format!("{}: {e}", path.display())))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| McError::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(McError::Checkpoint(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            file.format,
            file.version
        )));
    }
    if file.config_hash != expected_hash {
        return Err(McError::CheckpointMismatch {
            expected: expected_hash.to_string(),
            found: file.config_hash,
        });
    }
    Ok((file.completed_batches, RunAccumulator::from_state(file.accumulator)?))
}

fn write_checkpoint(path: &Path, hash: &str, completed: u64, acc: &RunAccumulator) -> Result<(), McError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_hash: hash.into(),
        completed_batches: completed,
        accumulator: acc.to_state(),
    };
    let text = serde_json::to_string(&file).map_err(|e| McError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| McError::Checkpoint(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| McError::Checkpoint(format!("{}: {e}", path.display())))
}

fn run_batch(geom: &ExperimentGeometry, mc: &McConfig, shift: &[f64], batch: u64) -> Result<MomentAccumulator, McError> {
    let root = StreamSeed::new(mc.seed);
    let start = batch * mc.batch_size;
    let end = (start + mc.batch_size).min(mc.replicas);
    let mut acc = MomentAccumulator::new(shift);
    for replica in start..end {
        let stats = geom.sample_replica(&root.replica(replica))?;
        acc.push(&stats.values)?;
    }
    Ok(acc)
}

pub fn run(geom: &ExperimentGeometry, mc: &McConfig) -> Result<McEstimate, McError> {
    run_with_checkpoint(geom, mc, None)
}

/// Runs all replicas, resuming from and periodically writing `checkpoint`
/// when given.
pub fn run_with_checkpoint(
    geom: &ExperimentGeometry,
    mc: &McConfig,
    checkpoint: Option<&CheckpointOptions>,
) -> Result<McEstimate, McError> {
    mc.validate()?;
    if let Some(c) = checkpoint {
        if c.every_batches == 0 {
            return Err(McError::InvalidConfig("checkpoint interval must be positive".into()));
        }
    }
    let hash = config_hash(geom, mc);
    // Replica 0 doubles as the reference shift; it is a pure function of the
    // seed, so every worker count and every restart agrees on it.
    let shift = geom.sample_replica(&StreamSeed::new(mc.seed).replica(0))?.values;
    let total_batches = mc.batches();

    let (mut done, mut acc) = match checkpoint {
        Some(c) if c.path.exists() => load_checkpoint(&c.path, &hash)?,
        _ => (0, RunAccumulator::new(&shift, mc.batch_size)),
    };

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Workers::Fixed(n) = mc.workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| McError::ThreadPool(e.to_string()))?;
    let chunk = checkpoint.map_or(total_batches, |c| c.every_batches);

    while done < total_batches {
        let end = (done + chunk).min(total_batches);
        let results: Vec<Result<MomentAccumulator, McError>> =
            pool.install(|| (done..end).into_par_iter().map(|b| run_batch(geom, mc, &shift, b)).collect());
        for result in results {
            let abort = |source| McError::Aborted {
                completed_batches: done,
                total_batches,
                source: Box::new(source),
            };
            acc.add_batch(result.map_err(abort)?).map_err(abort)?;
            done += 1;
        }
        if let Some(c) = checkpoint {
            write_checkpoint(&c.path, &hash, done, &acc)?;
        }
    }
    Ok(acc.finish())
}

/// Standardised skewness and excess kurtosis of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianityZ {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub z_skewness: f64,
    pub z_kurtosis: f64,
}

pub const MIN_GAUSSIANITY_REPLICAS: u64 = 1000;

/// z-scores of the sample skewness and excess kurtosis against their
/// Gaussian null standard errors `sqrt(6/R)` and `sqrt(24/R)`.
pub fn gaussianity_report(est: &McEstimate) -> Result<Vec<GaussianityZ>, McError> {
    if est.replicas_used < MIN_GAUSSIANITY_REPLICAS {
        return Err(McError::TooFewReplicas {
            needed: MIN_GAUSSIANITY_REPLICAS,
            got: est.replicas_used,
        });
    }
    let r = est.replicas_used as f64;
    let (se_skew, se_kurt) = ((6.0 / r).sqrt(), (24.0 / r).sqrt());
    Ok(est
        .skewness
        .iter()
        .zip(&est.excess_kurtosis)
        .map(|(&s, &k)| GaussianityZ {
            skewness: s,
            excess_kurtosis: k,
            z_skewness: s / se_skew,
            z_kurtosis: k / se_kurt,
        })
        .collect())
}

/// Estimate from an explicit sample stream, batched in arrival order.
pub fn estimate_from_samples<I, V>(samples: I, batch_size: u64) -> Result<McEstimate, McError>
where
    I: IntoIterator<Item = V>,
    V: AsRef<[f64]>,
{
    if batch_size == 0 {
        return Err(McError::InvalidConfig("batch_size must be positive".into()));
    }
    let mut iter = samples.into_iter().peekable();
    let first: Vec<f64> = match iter.peek() {
        Some(v) => v.as_ref().to_vec(),
        None => return Err(McError::TooFewReplicas { needed: 2, got: 0 }),
    };
    let mut acc = RunAccumulator::new(&first, batch_size);
    let mut batch = MomentAccumulator::new(&first);
    for v in iter {
        batch.push(v.as_ref())?;
        if batch.count() == batch_size {
            acc.add_batch(std::mem::replace(&mut batch, MomentAccumulator::new(&first)))?;
        }
    }
    if batch.count() > 0 {
        acc.add_batch(batch)?;
    }
    if acc.replicas() < 2 {
        return Err(McError::TooFewReplicas { needed: 2, got: acc.replicas() });
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ObservableSpec;
    use crate::entry_process::{EntryProcessSpec, ProcessFamily, ScalarField, TimeGrid};

    fn geometry(family: ProcessFamily, obs: Vec<ObservableSpec>) -> ExperimentGeometry {
        let process = EntryProcessSpec::new(ScalarField::Real, family).unwrap();
        ExperimentGeometry::new(10, TimeGrid::new(vec![0.0, 1.0]).unwrap(), process, obs).unwrap()
    }

    fn window(row_offset: f64, power: u32, time_index: usize) -> ObservableSpec {
        ObservableSpec {
            row_offset,
            col_offset: 0.0,
            mu: 1.0,
            nu: 0.5,
            power,
            time_index,
        }
    }

    fn config(replicas: u64, batch_size: u64, workers: Workers) -> McConfig {
        McConfig {
            replicas,
            seed: 42,
            workers,
            batch_size,
        }
    }

    #[test]
    fn config_validation() {
        assert!(config(1, 1, Workers::Auto).validate().is_err());
        assert!(config(10, 11, Workers::Auto).validate().is_err());
        assert!(config(10, 0, Workers::Auto).validate().is_err());
        assert!(config(10, 5, Workers::Fixed(0)).validate().is_err());
        assert!(config(10, 5, Workers::Fixed(2)).validate().is_ok());
        assert_eq!(config(10, 3, Workers::Auto).batches(), 4);
    }

    #[test]
    fn workers_serde() {
        let w: Workers = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(w, Workers::Auto);
        let w: Workers = serde_json::from_str("3").unwrap();
        assert_eq!(w, Workers::Fixed(3));
        assert!(serde_json::from_str::<Workers>("0").is_err());
        assert!(serde_json::from_str::<Workers>("\"many\"").is_err());
        assert_eq!(serde_json::to_string(&Workers::Fixed(4)).unwrap(), "4");
    }

    #[test]
    fn duplicated_frozen_statistic_has_equal_covariances() {
        let g = geometry(ProcessFamily::Frozen, vec![window(0.0, 2, 0), window(0.0, 2, 1)]);
        let est = run(&g, &config(200, 20, Workers::Fixed(1))).unwrap();
        assert_eq!(est.cov[(0, 1)], est.cov[(0, 0)]);
        assert_eq!(est.cov[(0, 1)], est.cov[(1, 1)]);
        assert_eq!(est.mean[0], est.mean[1]);
    }

    #[test]
    fn estimate_is_independent_of_worker_count() {
        let g = geometry(
            ProcessFamily::OrnsteinUhlenbeck { rate: 0.7 },
            vec![window(0.0, 1, 0), window(0.3, 3, 1)],
        );
        let one = run(&g, &config(300, 25, Workers::Fixed(1))).unwrap();
        let three = run(&g, &config(300, 25, Workers::Fixed(3))).unwrap();
        assert!(one.bit_identical(&three));
        assert_eq!(one.full_batches, 12);
    }

    #[test]
    fn checkpoint_resume_reproduces_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let g = geometry(ProcessFamily::IndependentRefresh, vec![window(0.0, 1, 0), window(0.5, 2, 1)]);
        let mc = config(120, 10, Workers::Fixed(2));
        let reference = run(&g, &mc).unwrap();

        let ckpt = CheckpointOptions {
            path: dir.path().join("run.ckpt"),
            every_batches: 5,
        };
        // Simulate an interrupted run: only the first five batches complete.
        let partial = McConfig { replicas: 50, ..mc };
        run_with_checkpoint(&g, &partial, Some(&ckpt)).unwrap();
        let text = fs::read_to_string(&ckpt.path).unwrap();
        let mut file: CheckpointFile = serde_json::from_str(&text).unwrap();
        file.config_hash = config_hash(&g, &mc);
        fs::write(&ckpt.path, serde_json::to_string(&file).unwrap()).unwrap();

        let resumed = run_with_checkpoint(&g, &mc, Some(&ckpt)).unwrap();
        assert!(resumed.bit_identical(&reference));
    }

    #[test]
    fn checkpoint_for_other_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let g = geometry(ProcessFamily::Frozen, vec![window(0.0, 1, 0)]);
        let ckpt = CheckpointOptions {
            path: dir.path().join("run.ckpt"),
            every_batches: 2,
        };
        run_with_checkpoint(&g, &config(20, 5, Workers::Fixed(1)), Some(&ckpt)).unwrap();
        let other = McConfig { seed: 7, ..config(20, 5, Workers::Fixed(1)) };
        assert!(matches!(
            run_with_checkpoint(&g, &other, Some(&ckpt)),
            Err(McError::CheckpointMismatch { .. })
        ));
        fs::write(&ckpt.path, "not json").unwrap();
        assert!(matches!(
            run_with_checkpoint(&g, &config(20, 5, Workers::Fixed(1)), Some(&ckpt)),
            Err(McError::Checkpoint(_))
        ));
    }

    #[test]
    fn gaussianity_needs_enough_replicas() {
        let est = estimate_from_samples((0..100).map(|i| [i as f64]), 10).unwrap();
        assert!(matches!(gaussianity_report(&est), Err(McError::TooFewReplicas { .. })));
    }
}
