//! Monte-Carlo-dropout uncertainty decomposition, annotator disagreement and
//! calibration analysis for soft-labeled classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`mlp`]: a small feed-forward classifier with inverted dropout, trained
//!   by plain SGD against soft labels; deterministic ("baseline") and
//!   stochastic MC ("uncnet") inference.
//! - [`uncertainty`]: entropy-based split of an MC prediction into total,
//!   aleatoric and epistemic parts (nats).
//! - [`annotations`]: crowd vote counts, soft labels and the two-draw
//!   disagreement probability `1 - sum p^2`.
//! - [`calibration`]: pair-expanded Brier score, reliability diagrams and the
//!   ECE/MCE/SCE/ACE/TACE family.
//! - [`evaluation`]: JSD, Pearson correlation and t-tests with exact Student-t
//!   p-values, accuracy, rejection curves and extreme ranking.
//! - [`synth`]: Gaussian-mixture data with closed-form posteriors and simulated
//!   annotators.
//! - [`pipeline`]: the `synth -> train -> predict -> analyze` flow used by the
//!   `uncproxy` binary.
//!
//! Every random draw comes from [`rng`], which derives independent ChaCha8
//! streams from a 64-bit seed and a key path, so results never depend on
//! thread scheduling.

pub mod annotations;
pub mod calibration;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod mlp;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, Result};

/// Probabilities are clipped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
