//! Data-generating processes for potential outcomes.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{EstimatorError, PotentialTable, Provenance};

#[derive(Debug, Error)]
pub enum DgpError {
    #[error("invalid data-generating process: {0}")]
    Invalid(String),
    #[error(transparent)]
    Table(#[from] EstimatorError),
}

/// How potential outcomes are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DgpSpec {
    /// `y0 ~ U(lo, hi)`, `y1 = y0 + shift`.
    UniformShift { lo: f64, hi: f64, shift: f64 },
    /// `y0 ~ U(lo, hi)`, `y1 = y0`.
    UniformNull { lo: f64, hi: f64 },
    /// Potential outcomes read from a CSV with header `y0,y1`.
    FixedTable { path: PathBuf },
}

impl DgpSpec {
    /// Outcomes of the first figure scenario: a constant effect of 0.5.
    pub fn fig2a() -> Self {
        DgpSpec::UniformShift {
            lo: 0.1,
            hi: 0.5,
            shift: 0.5,
        }
    }

    /// Null effect with outcomes near one.
    pub fn fig2b() -> Self {
        DgpSpec::UniformNull { lo: 0.9, hi: 1.0 }
    }

    /// Null effect with outcomes near zero.
    pub fn fig2c() -> Self {
        DgpSpec::UniformNull { lo: 0.0, hi: 0.1 }
    }

    pub fn validate(&self) -> Result<(), DgpError> {
        let check_range = |lo: f64, hi: f64| {
            if lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= 1.0 {
                Ok(())
            } else {
                Err(DgpError::Invalid(format!(
                    "need 0 <= lo <= hi <= 1, got lo={lo}, hi={hi}"
                )))
            }
        };
        match *self {
            DgpSpec::UniformShift { lo, hi, shift } => {
                check_range(lo, hi)?;
                if !shift.is_finite() || hi + shift > 1.0 || lo + shift < 0.0 {
                    return Err(DgpError::Invalid(format!(
                        "shift {shift} moves outcomes of U({lo}, {hi}) outside [0, 1]"
                    )));
                }
                Ok(())
            }
            DgpSpec::UniformNull { lo, hi } => check_range(lo, hi),
            DgpSpec::FixedTable { .. } => Ok(()),
        }
    }

    /// Superpopulation average treatment effect, known in closed form for
    /// the uniform processes.
    pub fn psi_iid(&self) -> Option<f64> {
        match *self {
            DgpSpec::UniformShift { shift, .. } => Some(shift),
            DgpSpec::UniformNull { .. } => Some(0.0),
            DgpSpec::FixedTable { .. } => None,
        }
    }

    pub fn is_fixed_table(&self) -> bool {
        matches!(self, DgpSpec::FixedTable { .. })
    }
}

fn uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws (or loads) a table of `n` potential-outcome pairs.
///
/// Fixed tables ignore the generator and must have exactly `n` rows.
pub fn sample_population<R: Rng + ?Sized>(
    spec: &DgpSpec,
    n: usize,
    rng: &mut R,
) -> Result<PotentialTable, DgpError> {
    spec.validate()?;
    match spec {
        DgpSpec::UniformShift { lo, hi, shift } => {
            let y0: Vec<f64> = (0..n).map(|_| uniform(*lo, *hi, rng)).collect();
            let y1 = y0.iter().map(|v| (v + shift).clamp(0.0, 1.0)).collect();
            Ok(PotentialTable::new(y0, y1, Provenance::Sampled)?)
        }
        DgpSpec::UniformNull { lo, hi } => {
            let y0: Vec<f64> = (0..n).map(|_| uniform(*lo, *hi, rng)).collect();
            Ok(PotentialTable::new(y0.clone(), y0, Provenance::Sampled)?)
        }
        DgpSpec::FixedTable { path } => {
            let table = PotentialTable::from_csv_path(path)?;
            if table.n() != n {
                return Err(DgpError::Invalid(format!(
                    "{} has {} rows but the experiment needs n={n}",
                    path.display(),
                    table.n()
                )));
            }
            Ok(table)
        }
    }
}
