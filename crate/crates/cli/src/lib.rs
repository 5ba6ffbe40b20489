//! Command implementations behind the `owishart` binary.
//!
//! Exit codes: 0 success, 1 a comparison or moment check failed, 2 bad
//! configuration or usage, 3 the predicted covariance matrix is not positive
//! semi-definite, 4 any other runtime failure.

pub mod config;
pub mod report;

use std::path::PathBuf;

use ndarray::Array2;
use overlap_wishart::entry_process::validate_moments;
use overlap_wishart::montecarlo::{self, gaussianity_report, McEstimate, Workers, MIN_GAUSSIANITY_REPLICAS};
use overlap_wishart::theory::{self, covariance_exact, covariance_quadrature, CovarianceParams, TheoryError};
use overlap_wishart::{ExperimentGeometry, StreamSeed};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, OutputFormat};
use crate::report::{
    Cell, Report, Table, COORDINATE_COLUMNS, MOMENT_COLUMNS, PAIR_COLUMNS, QUADRATURE_COLUMNS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_PSD: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub const DEFAULT_Z_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    /// Limiting covariance matrix (and optionally its quadrature cross-check).
    Theory,
    /// Monte Carlo estimate of the covariance matrix.
    Simulate,
    /// Theory against simulation, pair by pair.
    Compare,
    /// Empirical moments of the entry process against their targets.
    Validate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Theory => "theory",
            Command::Simulate => "simulate",
            Command::Compare => "compare",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    NotPsd(TheoryError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::NotPsd(_) => EXIT_NOT_PSD,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::NotPositiveSemiDefinite { .. } => CliError::NotPsd(e),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<montecarlo::McError> for CliError {
    fn from(e: montecarlo::McError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub format: Option<OutputFormat>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), ConfigError> {
        if let Some(f) = self.format {
            cfg.output.format = f;
        }
        if let Some(p) = &self.out {
            cfg.output.path = Some(p.clone());
        }
        if let Some(n) = self.workers {
            if n == 0 {
                return Err(ConfigError::Invalid("--workers must be positive".into()));
            }
            match cfg.mc.as_mut() {
                Some(mc) => mc.workers = Workers::Fixed(n),
                None => return Err(ConfigError::Invalid("--workers given but the config has no [mc] section".into())),
            }
        }
        Ok(())
    }
}

/// Result of one command: the report plus diagnostics meant for stderr.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub warnings: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.passed == Some(false) {
            EXIT_CHECK_FAILED
        } else {
            EXIT_OK
        }
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.report.to_csv(),
            OutputFormat::Json => self.report.to_json(),
        }
    }
}

pub fn execute(command: Command, cfg: &ExperimentConfig, z_threshold: f64) -> Result<Outcome, CliError> {
    if !(z_threshold.is_finite() && z_threshold > 0.0) {
        return Err(ConfigError::Invalid(format!("z threshold must be positive, got {z_threshold}")).into());
    }
    let geom = cfg.geometry()?;
    let mut warnings = geom.rounding_warnings();
    let mut report = Report {
        command: command.name(),
        config_hash: cfg.hash(),
        passed: None,
        tables: Vec::new(),
    };
    match command {
        Command::Theory => {
            let cov = theory::covariance_matrix(&geom)?;
            report.tables.push(pair_table(&cov, None));
            if cfg.quadrature.enabled {
                report.tables.push(quadrature_table(&geom, cfg)?);
            }
        }
        Command::Simulate => {
            let est = simulate(&geom, cfg)?;
            report.tables.push(pair_table_mc(&est));
            report.tables.push(coordinate_table(&est, &mut warnings));
        }
        Command::Compare => {
            let cov = theory::covariance_matrix(&geom)?;
            let est = simulate(&geom, cfg)?;
            let table = pair_table(&cov, Some(&est));
            report.passed = Some(table.rows.iter().all(|row| match row[5] {
                Cell::Number(z) => z.abs() <= z_threshold,
                _ => true,
            }));
            report.tables.push(table);
            report.tables.push(coordinate_table(&est, &mut warnings));
        }
        Command::Validate => {
            let spec = cfg.process_spec()?;
            let grid = cfg.grid()?;
            let moments = validate_moments(&spec, &grid, cfg.validate.draws, StreamSeed::new(cfg.validate.seed))
                .map_err(|e| ConfigError::Invalid(format!("[validate] {e}")))?;
            let mut table = Table::new("moments", &MOMENT_COLUMNS);
            let mut passed = true;
            for c in &moments.checks {
                let flagged = !(c.z.abs() <= z_threshold);
                passed &= !flagged;
                table.push(vec![
                    Cell::Text(c.label.clone()),
                    Cell::Index(c.times.0 as u64),
                    Cell::Index(c.times.1 as u64),
                    Cell::Number(c.estimate),
                    Cell::Number(c.se),
                    Cell::Number(c.expected),
                    Cell::Number(c.z),
                    Cell::Flag(flagged),
                ]);
            }
            report.passed = Some(passed);
            report.tables.push(table);
        }
    }
    Ok(Outcome { report, warnings })
}

fn simulate(geom: &ExperimentGeometry, cfg: &ExperimentConfig) -> Result<McEstimate, CliError> {
    let (mc, checkpoint) = cfg.mc()?;
    Ok(montecarlo::run_with_checkpoint(geom, &mc, checkpoint.as_ref())?)
}

/// `(mc - theory) / se`, infinite when the standard error vanishes but the
/// values differ.
pub fn z_score(mc: f64, theory: f64, se: f64) -> f64 {
    let diff = mc - theory;
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    }
}

fn pair_table(cov: &Array2<f64>, est: Option<&McEstimate>) -> Table {
    let mut table = Table::new("pairs", &PAIR_COLUMNS);
    let k = cov.nrows();
    for i in 0..k {
        for j in 0..k {
            let theory = cov[(i, j)];
            let mut row = vec![Cell::Index(i as u64), Cell::Index(j as u64), Cell::Number(theory)];
            match est {
                Some(est) => {
                    let (mc, se) = (est.cov[(i, j)], est.se_cov[(i, j)]);
                    let rel = (theory != 0.0).then(|| (mc - theory) / theory.abs());
                    row.extend([
                        Cell::Number(mc),
                        Cell::Number(se),
                        Cell::Number(z_score(mc, theory, se)),
                        Cell::opt(rel),
                    ]);
                }
                None => row.extend(vec![Cell::Empty; 4]),
            }
            table.push(row);
        }
    }
    table
}

fn pair_table_mc(est: &McEstimate) -> Table {
    let mut table = Table::new("pairs", &PAIR_COLUMNS);
    let k = est.cov.nrows();
    for i in 0..k {
        for j in 0..k {
            table.push(vec![
                Cell::Index(i as u64),
                Cell::Index(j as u64),
                Cell::Empty,
                Cell::Number(est.cov[(i, j)]),
                Cell::Number(est.se_cov[(i, j)]),
                Cell::Empty,
                Cell::Empty,
            ]);
        }
    }
    table
}

fn coordinate_table(est: &McEstimate, warnings: &mut Vec<String>) -> Table {
    let mut table = Table::new("coordinates", &COORDINATE_COLUMNS);
    let z = match gaussianity_report(est) {
        Ok(z) => Some(z),
        Err(_) => {
            warnings.push(format!(
                "gaussianity z-scores need at least {MIN_GAUSSIANITY_REPLICAS} replicas; left empty"
            ));
            None
        }
    };
    for c in 0..est.mean.len() {
        let g = z.as_ref().map(|z| z[c]);
        table.push(vec![
            Cell::Index(c as u64),
            Cell::Number(est.mean[c]),
            Cell::Number(est.skewness[c]),
            Cell::Number(est.excess_kurtosis[c]),
            Cell::opt(g.map(|g| g.z_skewness)),
            Cell::opt(g.map(|g| g.z_kurtosis)),
            Cell::Index(est.replicas_used),
        ]);
    }
    table
}

fn quadrature_table(geom: &ExperimentGeometry, cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let options = cfg.quadrature_options();
    let mut table = Table::new("quadrature", &QUADRATURE_COLUMNS);
    for i in 0..geom.len() {
        for j in i..geom.len() {
            let params = CovarianceParams::for_pair(geom, i, j);
            let exact = covariance_exact(&params)?;
            let quad = covariance_quadrature(&params, &options)?;
            table.push(vec![
                Cell::Index(i as u64),
                Cell::Index(j as u64),
                Cell::Number(exact),
                Cell::Number(quad),
                Cell::Number((exact - quad).abs()),
            ]);
        }
    }
    Ok(table)
}
