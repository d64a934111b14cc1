//! Independent oracles and property harnesses.
//!
//! Every check yields an [`OracleReport`] with both the maximum absolute
//! and the maximum relative error; whether a check is judged on the
//! absolute or the relative figure is fixed by its constructor.

mod attention;
mod gradcheck;
mod suite;

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

pub use attention::{attention_bruteforce, eq5_weights};
pub use gradcheck::{
    check_case, check_decoder_input, check_pair, check_primitives, check_total_loss,
    finite_diff_grad, perturbed_net, primitive_cases, run_gradcheck, sample_coords, Case, Step,
    F32_PATHWAY, F64_PATHWAY, GRAD_TOL, GRAD_TOL_F64, H_F32, H_F64, LOSS_REL_FLOOR, MAX_COORDS,
    REL_FLOOR_F32, REL_FLOOR_F64,
};
pub use suite::{
    attention_oracle_check, random_instance, row_normalization_check, run_property_suite,
    run_property_suite_with, style_permutation_check, AttentionInstance, SoftmaxFn, SuiteHooks,
    ATTENTION_TOL, CHECK_NAMES,
};

use crate::losses::LossError;
use crate::network::NetworkError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("loss is not finite after perturbing coordinate {coord}")]
    NonFiniteLoss { coord: usize },
    #[error("no gradient reached {0}")]
    MissingGradient(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Outcome of one oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tol: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Judged on `max_abs`.
    pub fn abs(name: impl Into<String>, max_abs: f64, max_rel: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            max_abs,
            max_rel,
            tol,
            pass: max_abs <= tol,
        }
    }

    /// Judged on `max_rel`.
    pub fn rel(name: impl Into<String>, max_abs: f64, max_rel: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            max_abs,
            max_rel,
            tol,
            pass: max_rel <= tol,
        }
    }

    /// A yes/no property; errors are 0 on success and 1 on failure.
    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        let e = if ok { 0.0 } else { 1.0 };
        Self::abs(name, e, e, 0.0)
    }
}

/// Running maxima of absolute and relative error.
///
/// The relative error is `|a − e| / max(|a|, |e|, floor)`.
#[derive(Debug, Clone, Copy)]
pub struct ErrorStats {
    pub max_abs: f64,
    pub max_rel: f64,
    floor: f64,
}

impl ErrorStats {
    pub fn new(floor: f64) -> Self {
        Self {
            max_abs: 0.0,
            max_rel: 0.0,
            floor,
        }
    }

    pub fn add(&mut self, actual: f64, expected: f64) {
        let d = (actual - expected).abs();
        let rel = d / actual.abs().max(expected.abs()).max(self.floor);
        // NaN must stick, so compare explicitly.
        self.max_abs = if d.is_nan() || d > self.max_abs {
            d
        } else {
            self.max_abs
        };
        self.max_rel = if rel.is_nan() || rel > self.max_rel {
            rel
        } else {
            self.max_rel
        };
    }

    pub fn add_all(&mut self, actual: &[f64], expected: &[f64]) {
        for (a, e) in actual.iter().zip(expected) {
            self.add(*a, *e);
        }
    }

    pub fn abs_report(&self, name: String, tol: f64) -> OracleReport {
        OracleReport::abs(name, self.max_abs, self.max_rel, tol)
    }

    pub fn rel_report(&self, name: String, tol: f64) -> OracleReport {
        OracleReport::rel(name, self.max_abs, self.max_rel, tol)
    }
}

/// Writes reports as CSV with columns `name,max_abs,max_rel,tol,pass`.
pub fn write_reports_csv<W: Write>(reports: &[OracleReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
