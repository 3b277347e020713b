//! Exact Bayes-optimal mean and uncertainty under the Normal–Inverse-Gamma
//! prior of [`PriorConfig`].
//!
//! After `n` pairs the posterior is `τ ~ Gamma(a, b)` and
//! `w | σ ~ N(w_n, σ² Σ_n)` with
//!
//! ```text
//! Σ_n = (I + Σ x_s x_sᵀ)⁻¹          w_n = Σ_n (w̄ + Σ x_s y_s)
//! a   = τ̲ + n/2                      b   = τ̄ + ½ (Σ y_s² + w̄ᵀw̄ − w_nᵀ Σ_n⁻¹ w_n)
//! ```
//!
//! and the predictive moments at `x` are `ŷ = w_nᵀx`,
//! `σ*² = b/(a−1) · (xᵀ Σ_n x + 1)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::montecarlo::{self, EvalSpec, Metric, MetricSeries};
use crate::predict::{Prediction, SequencePredictor};
use crate::taskgen::{PriorConfig, PromptSequence};

/// Updates between full re-inversions of the precision matrix.
const REINVERT_EVERY: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorState {
    sigma: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// `w̄ + Σ x_s y_s`
    moment: DVector<f64>,
    w: DVector<f64>,
    sum_yy: f64,
    wbar_sq: f64,
    tau_rate: f64,
    a: f64,
    b: f64,
    t_obs: usize,
}

pub fn init_prior(prior: &PriorConfig) -> PosteriorState {
    let d = prior.d;
    let w_bar = DVector::from_column_slice(&prior.w_bar);
    PosteriorState {
        sigma: DMatrix::identity(d, d),
        precision: DMatrix::identity(d, d),
        wbar_sq: w_bar.dot(&w_bar),
        moment: w_bar.clone(),
        w: w_bar,
        sum_yy: 0.0,
        tau_rate: prior.tau_rate,
        a: prior.tau_shape,
        b: prior.tau_rate,
        t_obs: 0,
    }
}

impl PosteriorState {
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn w(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn t_obs(&self) -> usize {
        self.t_obs
    }

    /// `E[σ² | history] = b / (a − 1)`.
    pub fn noise_variance(&self) -> Result<f64> {
        if self.a <= 1.0 {
            return Err(Error::UndefinedMoment { shape: self.a });
        }
        Ok(self.b / (self.a - 1.0))
    }

    /// `xᵀ Σ x`, the epistemic factor.
    pub fn epistemic(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let mut acc = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += self.sigma[(i, j)] * x[j];
            }
            acc += x[i] * row;
        }
        acc
    }

    pub fn update(&self, x: &[f64], y: f64) -> PosteriorState {
        let mut next = self.clone();
        next.absorb(x, y);
        next
    }

    /// In-place conjugate update with a Sherman–Morrison step on `Σ`.
    pub fn absorb(&mut self, x: &[f64], y: f64) {
        let d = x.len();
        debug_assert_eq!(d, self.sigma.nrows());
        let xv = DVector::from_column_slice(x);
        self.t_obs += 1;
        self.precision.ger(1.0, &xv, &xv, 1.0);
        self.moment.axpy(y, &xv, 1.0);
        self.sum_yy += y * y;
        if self.t_obs % REINVERT_EVERY == 0 {
            self.sigma = invert_spd(&self.precision);
        } else {
            let u = &self.sigma * &xv;
            let denom = 1.0 + xv.dot(&u);
            self.sigma.ger(-1.0 / denom, &u, &u, 1.0);
        }
        self.w = &self.sigma * &self.moment;
        self.a += 0.5;
        self.b = self.tau_rate + 0.5 * (self.sum_yy + self.wbar_sq - self.w.dot(&self.moment));
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let var = self.noise_variance()?;
        let y_hat: f64 = self.w.iter().zip(x).map(|(w, x)| w * x).sum();
        Ok(Prediction::new(y_hat, (var * (self.epistemic(x) + 1.0)).sqrt()))
    }
}

fn invert_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let inv = m
        .clone()
        .cholesky()
        .expect("posterior precision is positive definite")
        .inverse();
    // symmetrize to keep the Loewner comparisons exact-ish
    (&inv + inv.transpose()) * 0.5
}

/// Bayes prediction from only the last `min(window, len)` pairs of `history`.
pub fn truncated_predict(
    history_xs: &[Vec<f64>],
    history_ys: &[f64],
    window: usize,
    x: &[f64],
    prior: &PriorConfig,
) -> Result<Prediction> {
    let n = history_ys.len();
    let start = n - window.min(n);
    let mut state = init_prior(prior);
    for s in start..n {
        state.absorb(&history_xs[s], history_ys[s]);
    }
    state.predict(x)
}

/// Full-history Bayes-optimal predictor.
#[derive(Clone, Debug)]
pub struct BayesPredictor {
    pub prior: PriorConfig,
}

impl BayesPredictor {
    pub fn new(prior: PriorConfig) -> Self {
        Self { prior }
    }
}

impl SequencePredictor for BayesPredictor {
    fn name(&self) -> String {
        "bayes".into()
    }

    fn predict_sequence(&self, seq: &PromptSequence) -> Result<Vec<Prediction>> {
        let mut state = init_prior(&self.prior);
        let mut out = Vec::with_capacity(seq.len());
        for (x, &y) in seq.xs.iter().zip(&seq.ys) {
            out.push(state.predict(x)?);
            state.absorb(x, y);
        }
        Ok(out)
    }
}

/// Bayes predictor restricted to the last `window` pairs.
#[derive(Clone, Debug)]
pub struct TruncatedBayesPredictor {
    pub prior: PriorConfig,
    pub window: usize,
}

impl SequencePredictor for TruncatedBayesPredictor {
    fn name(&self) -> String {
        format!("bayes_s{}", self.window)
    }

    fn predict_sequence(&self, seq: &PromptSequence) -> Result<Vec<Prediction>> {
        (0..seq.len())
            .map(|t| truncated_predict(&seq.xs[..t], &seq.ys[..t], self.window, &seq.xs[t], &self.prior))
            .collect()
    }
}

/// Per-position Monte-Carlo risk `E[ℓ(pred(H_t), y_t)]` with standard errors.
pub fn mc_risk(predictor: &dyn SequencePredictor, spec: &EvalSpec) -> Result<MetricSeries> {
    let mut out = montecarlo::eval_by_position(&[predictor], spec, &[Metric::Nll])?;
    Ok(out.remove(0).remove(0))
}

/// Grid resolution for [`grid_oracle_1d`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub w_half_width: f64,
    pub w_points: usize,
    pub log_tau_min: f64,
    pub log_tau_max: f64,
    pub tau_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            w_half_width: 12.0,
            w_points: 2001,
            log_tau_min: (1e-3f64).ln(),
            log_tau_max: (50.0f64).ln(),
            tau_points: 1501,
        }
    }
}

/// Posterior-predictive mean and standard deviation for `d = 1` by brute-force
/// integration of the joint posterior of `(w, τ)` on a grid.
///
/// Works directly from the prior density and the Gaussian likelihood, with no
/// use of the conjugate update formulas.
pub fn grid_oracle_1d(xs: &[f64], ys: &[f64], x: f64, prior: &PriorConfig, grid: &GridSpec) -> Result<Prediction> {
    if prior.d != 1 {
        return Err(Error::Unsupported(format!("grid oracle needs d = 1, got d = {}", prior.d)));
    }
    let w_bar = prior.w_bar[0];
    let n = ys.len() as f64;
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();

    let w_at = |k: usize| w_bar - grid.w_half_width + 2.0 * grid.w_half_width * k as f64 / (grid.w_points - 1) as f64;
    let lt_at = |k: usize| {
        grid.log_tau_min + (grid.log_tau_max - grid.log_tau_min) * k as f64 / (grid.tau_points - 1) as f64
    };

    let mut logp = vec![0.0; grid.w_points * grid.tau_points];
    let mut max = f64::NEG_INFINITY;
    for i in 0..grid.tau_points {
        let lt = lt_at(i);
        let tau = lt.exp();
        // Gamma(shape, rate) prior, N(w̄, 1/τ) weight prior, n Gaussian
        // likelihood terms, and the dτ = τ d(log τ) Jacobian.
        let base = (prior.tau_shape - 1.0) * lt - prior.tau_rate * tau + 0.5 * lt + 0.5 * n * lt + lt;
        for k in 0..grid.w_points {
            let w = w_at(k);
            let sse = syy - 2.0 * w * sxy + w * w * sxx;
            let v = base - 0.5 * tau * ((w - w_bar) * (w - w_bar) + sse);
            logp[i * grid.w_points + k] = v;
            max = max.max(v);
        }
    }
    let (mut z, mut ew, mut eww, mut evar) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..grid.tau_points {
        let inv_tau = (-lt_at(i)).exp();
        for k in 0..grid.w_points {
            let p = (logp[i * grid.w_points + k] - max).exp();
            let w = w_at(k);
            z += p;
            ew += p * w;
            eww += p * w * w;
            evar += p * inv_tau;
        }
    }
    let (ew, eww, evar) = (ew / z, eww / z, evar / z);
    let var = x * x * (eww - ew * ew) + evar;
    Ok(Prediction::new(x * ew, var.sqrt()))
}
