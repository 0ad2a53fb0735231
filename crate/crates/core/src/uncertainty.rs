//! Entropy-based uncertainty decomposition of MC-dropout predictions.
//!
//! For `T` stochastic softmax rows `p_1..p_T`:
//!
//! - total `U_t = H(mean_t p_t)`
//! - aleatoric `U_a = mean_t H(p_t)`
//! - epistemic `U_e = U_t - U_a` (the mutual information between the
//!   prediction and the dropout-sampled weights; non-negative by concavity
//!   of entropy)
//!
//! All quantities are in nats.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result};

/// Rows whose sum deviates from 1 by more than this are rejected rather than
/// renormalized.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;
const NEGATIVE_TOLERANCE: f64 = 1e-9;

/// Check that `p` is a probability vector up to float drift and return the
/// renormalized copy.
pub fn to_simplex(p: &[f64]) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::EmptyInput("probability vector"));
    }
    let mut sum = 0.0;
    for (c, &v) in p.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!(
                "probability {c} is not finite"
            )));
        }
        if v < -NEGATIVE_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probability {c} is negative ({v})"
            )));
        }
        sum += v.max(0.0);
    }
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(p.iter().map(|&v| v.max(0.0) / sum).collect())
}

fn entropy_of_simplex(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    h.max(0.0)
}

/// Shannon entropy in nats; `0 log 0` is taken as 0.
pub fn entropy(p: &[f64]) -> Result<f64> {
    Ok(entropy_of_simplex(&to_simplex(p)?))
}

/// `T` probability rows from stochastic forward passes and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPrediction {
    pub sample_id: String,
    probs: Matrix,
    mean_probs: Vec<f64>,
}

impl McPrediction {
    /// Validates and renormalizes every row, then averages them.
    pub fn new(sample_id: impl Into<String>, probs: Matrix) -> Result<Self> {
        if probs.rows() == 0 {
            return Err(Error::EmptyInput("MC prediction has no passes"));
        }
        let mut data = Vec::with_capacity(probs.data().len());
        for row in probs.iter_rows() {
            data.extend(to_simplex(row)?);
        }
        let probs = Matrix::new(probs.rows(), probs.cols(), data)?;
        let mean_probs = probs.column_means();
        Ok(Self {
            sample_id: sample_id.into(),
            probs,
            mean_probs,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(sample_id: impl Into<String>, rows: &[R]) -> Result<Self> {
        Self::new(sample_id, Matrix::from_rows(rows)?)
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn mean_probs(&self) -> &[f64] {
        &self.mean_probs
    }

    pub fn passes(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }
}

/// `(U_t, U_a, U_e)` in nats, with `u_total == u_aleatoric + u_epistemic`
/// holding exactly for the stored values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTriple {
    pub u_total: f64,
    pub u_aleatoric: f64,
    pub u_epistemic: f64,
}

impl UncertaintyTriple {
    /// Assemble from independently computed total and aleatoric terms. The
    /// stored total is re-derived as `aleatoric + epistemic` so the identity
    /// is exact in floating point.
    pub fn from_parts(total: f64, aleatoric: f64) -> Self {
        let u_epistemic = total - aleatoric;
        Self {
            u_total: aleatoric + u_epistemic,
            u_aleatoric: aleatoric,
            u_epistemic,
        }
    }
}

pub fn total_uncertainty(mc: &McPrediction) -> f64 {
    entropy_of_simplex(&mc.mean_probs)
}

pub fn aleatoric_uncertainty(mc: &McPrediction) -> f64 {
    let sum: f64 = mc.probs.iter_rows().map(entropy_of_simplex).sum();
    sum / mc.passes() as f64
}

pub fn decompose(mc: &McPrediction) -> UncertaintyTriple {
    UncertaintyTriple::from_parts(total_uncertainty(mc), aleatoric_uncertainty(mc))
}
