//! Ridge and least-squares baselines with residual-based uncertainty.
//!
//! Both report `σ̂ = √(Σ(y_s − ŵᵀx_s)² / max(n, 1))` over the `n` context
//! pairs, floored at [`SIGMA_FLOOR`] so the NLL stays finite on exact fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predict::{Prediction, SequencePredictor};
use crate::taskgen::PromptSequence;

pub const SIGMA_FLOOR: f64 = 1e-6;
/// Singular values below this are treated as zero in the pseudoinverse.
pub const SVD_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeConfig {
    pub lambda: f64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "ridge lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn design(xs: &[Vec<f64>], ys: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let d = xs[0].len();
    let x = DMatrix::from_fn(xs.len(), d, |i, j| xs[i][j]);
    (x, DVector::from_column_slice(ys))
}

fn finish(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, query: &[f64]) -> Prediction {
    let resid = y - x * w;
    let n = y.len().max(1) as f64;
    let sigma = (resid.norm_squared() / n).sqrt().max(SIGMA_FLOOR);
    let y_hat = w.iter().zip(query).map(|(w, q)| w * q).sum();
    Prediction::new(y_hat, sigma)
}

/// Ridge prediction at `x` from the context pairs `(xs, ys)`.
pub fn ridge_predict(xs: &[Vec<f64>], ys: &[f64], x: &[f64], cfg: &RidgeConfig) -> Prediction {
    if ys.is_empty() {
        return Prediction::new(0.0, 1.0);
    }
    let (xm, y) = design(xs, ys);
    let d = x.len();
    let gram = xm.tr_mul(&xm) + DMatrix::identity(d, d) * cfg.lambda;
    let rhs = xm.tr_mul(&y);
    let w = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        // only reachable for λ so small that rounding breaks definiteness
        None => gram.svd(true, true).solve(&rhs, SVD_EPS).expect("svd computed with u and v"),
    };
    finish(&xm, &y, &w, x)
}

/// Minimum-norm least-squares prediction at `x`.
pub fn ols_predict(xs: &[Vec<f64>], ys: &[f64], x: &[f64]) -> Prediction {
    if ys.is_empty() {
        return Prediction::new(0.0, 1.0);
    }
    let (xm, y) = design(xs, ys);
    let w = xm
        .clone()
        .svd(true, true)
        .solve(&y, SVD_EPS)
        .expect("svd computed with u and v");
    finish(&xm, &y, &w, x)
}

#[derive(Clone, Debug, Default)]
pub struct RidgePredictor {
    pub cfg: RidgeConfig,
}

impl SequencePredictor for RidgePredictor {
    fn name(&self) -> String {
        "ridge".into()
    }

    fn predict_sequence(&self, seq: &PromptSequence) -> Result<Vec<Prediction>> {
        Ok((0..seq.len())
            .map(|t| ridge_predict(&seq.xs[..t], &seq.ys[..t], &seq.xs[t], &self.cfg))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct OlsPredictor;

impl SequencePredictor for OlsPredictor {
    fn name(&self) -> String {
        "ols".into()
    }

    fn predict_sequence(&self, seq: &PromptSequence) -> Result<Vec<Prediction>> {
        Ok((0..seq.len())
            .map(|t| ols_predict(&seq.xs[..t], &seq.ys[..t], &seq.xs[t]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_single_pair() {
        let p = ridge_predict(&[vec![1.0, 0.0]], &[2.0], &[1.0, 0.0], &RidgeConfig::default());
        assert!((p.y_hat - 1.0).abs() < 1e-12);
        // residual 2 − 1 = 1 over one pair
        assert!((p.sigma_hat - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ols_single_pair_is_min_norm() {
        let p = ols_predict(&[vec![1.0, 0.0]], &[2.0], &[1.0, 0.0]);
        assert!((p.y_hat - 2.0).abs() < 1e-12);
        assert_eq!(p.sigma_hat, SIGMA_FLOOR);
        // the unseen direction gets zero weight
        let q = ols_predict(&[vec![1.0, 0.0]], &[2.0], &[0.0, 1.0]);
        assert!(q.y_hat.abs() < 1e-12);
    }

    #[test]
    fn zero_context() {
        assert_eq!(ols_predict(&[], &[], &[1.0]), Prediction::new(0.0, 1.0));
        assert_eq!(
            ridge_predict(&[], &[], &[1.0], &RidgeConfig::default()),
            Prediction::new(0.0, 1.0)
        );
    }

    #[test]
    fn interpolation_hits_floor() {
        let xs = vec![vec![1.0, 0.5], vec![-0.3, 2.0]];
        let p = ols_predict(&xs, &[0.7, -1.1], &[0.2, 0.2]);
        assert_eq!(p.sigma_hat, SIGMA_FLOOR);
    }

    #[test]
    fn invalid_lambda() {
        assert!(RidgeConfig { lambda: 0.0 }.validate().is_err());
        assert!(RidgeConfig { lambda: -1.0 }.validate().is_err());
        assert!(RidgeConfig { lambda: 1e-8 }.validate().is_ok());
    }
}
