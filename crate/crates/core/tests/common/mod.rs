#![allow(dead_code)]

use icl_uq::predict::Prediction;
use icl_uq::rng::{Rng, SeedStream};
use nalgebra::{DMatrix, DVector};
use icl_uq::taskgen::{sample_sequence, sample_task, CovariateConfig, PriorConfig, PromptSequence};
use icl_uq::transformer::{init_params, InitScheme, ModelConfig, ModelParams, PosMode};

pub fn rng(seed: u64, i: u64) -> Rng {
    SeedStream::new(seed).substream(9, i)
}

/// A small model with the given shape and Gaussian weights of scale `std`.
pub fn small_model(d: usize, d_model: usize, layers: usize, heads: usize, window: usize, pos: PosMode, std: f64, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        layers,
        heads,
        d_in: d,
        d_model,
        d_key: 4,
        d_hidden: 12,
        window,
        pos_mode: pos,
        pos_scale: 0.1,
        init_std: std,
    };
    init_params(&cfg, &mut rng(seed, 1_000_000), InitScheme::Gaussian).unwrap()
}

pub fn prior_sequence(d: usize, len: usize, seed: u64) -> PromptSequence {
    let mut r = rng(seed, 2_000_000);
    let task = sample_task(&PriorConfig::in_distribution(d), &mut r);
    sample_sequence(&task, &CovariateConfig::default(), len, &mut r)
}

/// Posterior predictive from the batch formulas: one matrix inverse of the
/// full precision, no sequential updates.
pub fn batch_oracle(xs: &[Vec<f64>], ys: &[f64], x: &[f64], prior: &PriorConfig) -> Prediction {
    let d = prior.d;
    let n = ys.len();
    let xm = DMatrix::from_fn(n, d, |i, j| xs[i][j]);
    let y = DVector::from_column_slice(ys);
    let wbar = DVector::from_column_slice(&prior.w_bar);
    let precision = DMatrix::identity(d, d) + xm.transpose() * &xm;
    let sigma = precision.clone().try_inverse().unwrap();
    let w = &sigma * (&wbar + xm.transpose() * &y);
    let a = prior.tau_shape + n as f64 / 2.0;
    let b = prior.tau_rate + 0.5 * (y.dot(&y) + wbar.dot(&wbar) - w.dot(&(&precision * &w)));
    let xv = DVector::from_column_slice(x);
    let var = b / (a - 1.0) * (xv.dot(&(&sigma * &xv)) + 1.0);
    Prediction::new(w.dot(&xv), var.sqrt())
}
