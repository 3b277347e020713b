//! The shared output contract of every predictor: a mean and a standard
//! deviation for the next label.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::taskgen::PromptSequence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub y_hat: f64,
    pub sigma_hat: f64,
}

impl Prediction {
    pub fn new(y_hat: f64, sigma_hat: f64) -> Self {
        Self { y_hat, sigma_hat }
    }

    /// Gaussian negative log-likelihood `log σ̂ + (y - ŷ)² / (2σ̂²)`.
    pub fn nll(&self, y: f64) -> f64 {
        let r = y - self.y_hat;
        self.sigma_hat.ln() + r * r / (2.0 * self.sigma_hat * self.sigma_hat)
    }
}

/// Something that predicts `y_t` from `(x_1, y_1, …, x_t)` at every position
/// of a sequence.
pub trait SequencePredictor: Sync {
    fn name(&self) -> String;

    /// One prediction per position `t = 1..=len`, each using only the pairs
    /// before `t` and `x_t`.
    fn predict_sequence(&self, seq: &PromptSequence) -> Result<Vec<Prediction>>;
}
