//! Task, covariate, and prompt-sequence sampling.
//!
//! A task is a pair `(w, σ)`. The noise precision `τ = 1/σ²` is drawn from a
//! Gamma with shape `tau_shape` and rate `tau_rate` (so `σ²` is
//! inverse-Gamma), then `w | σ ~ N(w̄, σ² I)`. Prompts are
//! `y_t = wᵀx_t + σ ε_t` with standard normal noise.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng, SeedStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub d: usize,
    pub tau_shape: f64,
    pub tau_rate: f64,
    pub w_bar: Vec<f64>,
}

impl PriorConfig {
    pub fn new(d: usize, tau_shape: f64, tau_rate: f64) -> Self {
        Self {
            d,
            tau_shape,
            tau_rate,
            w_bar: vec![1.0; d],
        }
    }

    /// `τ̲ = τ̄ = 20`, prior mean of σ around 1.
    pub fn in_distribution(d: usize) -> Self {
        Self::new(d, 20.0, 20.0)
    }

    /// S-OOD: `τ̲ = 80, τ̄ = 20`.
    pub fn small_ood(d: usize) -> Self {
        Self::new(d, 80.0, 20.0)
    }

    /// M-OOD: `τ̲ = 100, τ̄ = 400`.
    pub fn medium_ood(d: usize) -> Self {
        Self::new(d, 100.0, 400.0)
    }

    /// L-OOD: `τ̲ = 100, τ̄ = 1600`.
    pub fn large_ood(d: usize) -> Self {
        Self::new(d, 100.0, 1600.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("prior.d must be at least 1"));
        }
        if !(self.tau_shape > 1.0) {
            return Err(Error::config(format!(
                "prior.tau_shape = {} must be > 1 so that E[σ²] exists",
                self.tau_shape
            )));
        }
        if !(self.tau_rate > 0.0) {
            return Err(Error::config(format!("prior.tau_rate = {} must be > 0", self.tau_rate)));
        }
        if self.w_bar.len() != self.d {
            return Err(Error::config(format!(
                "prior.w_bar has length {}, expected d = {}",
                self.w_bar.len(),
                self.d
            )));
        }
        Ok(())
    }

    /// `E[σ²] = τ̄ / (τ̲ - 1)`.
    pub fn mean_noise_variance(&self) -> f64 {
        self.tau_rate / (self.tau_shape - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub w: Vec<f64>,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateConfig {
    /// `x ~ N(0, s·I)`.
    Isotropic { scale: f64 },
    /// `x ~ N(0, diag(λ))`.
    FixedDiagonal { lambda: Vec<f64> },
    /// Per sequence `λ_j ~ U[lo, hi]`, then `x ~ N(0, diag(λ))`.
    MetaUniform { lo: f64, hi: f64 },
    /// Per sequence Haar `U`, then `x ~ N(0, U diag(d/i) Uᵀ)`.
    RotatedDecreasing,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        CovariateConfig::Isotropic { scale: 1.0 }
    }
}

impl CovariateConfig {
    /// `diag([d/i])`.
    pub fn decreasing(d: usize) -> Self {
        CovariateConfig::FixedDiagonal {
            lambda: (1..=d).map(|i| d as f64 / i as f64).collect(),
        }
    }

    /// `diag([d/i²])`.
    pub fn shrinking(d: usize) -> Self {
        CovariateConfig::FixedDiagonal {
            lambda: (1..=d).map(|i| d as f64 / (i * i) as f64).collect(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            CovariateConfig::Isotropic { scale } if !(*scale >= 0.0) => {
                Err(Error::config(format!("covariates.scale = {scale} must be >= 0")))
            }
            CovariateConfig::FixedDiagonal { lambda } => {
                if lambda.len() != d {
                    return Err(Error::config(format!(
                        "covariates.lambda has length {}, expected {d}",
                        lambda.len()
                    )));
                }
                if lambda.iter().any(|&l| !(l >= 0.0)) {
                    return Err(Error::config("covariates.lambda entries must be >= 0"));
                }
                Ok(())
            }
            CovariateConfig::MetaUniform { lo, hi } if !(*lo >= 0.0 && hi >= lo) => Err(Error::config(format!(
                "covariates meta-uniform range [{lo}, {hi}] must satisfy 0 <= lo <= hi"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskPool {
    pub tasks: Vec<TaskParams>,
}

impl TaskPool {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSequence {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub task: TaskParams,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.first().map_or(self.task.w.len(), |x| x.len())
    }

    /// First `t` pairs.
    pub fn prefix(&self, t: usize) -> PromptSequence {
        PromptSequence {
            xs: self.xs[..t].to_vec(),
            ys: self.ys[..t].to_vec(),
            task: self.task.clone(),
        }
    }
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gamma draw with the given shape and rate (mean `shape / rate`).
pub fn gamma_shape_rate(rng: &mut Rng, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters validated by PriorConfig")
        .sample(rng)
}

pub fn sample_task(prior: &PriorConfig, rng: &mut Rng) -> TaskParams {
    let tau = gamma_shape_rate(rng, prior.tau_shape, prior.tau_rate);
    let sigma = 1.0 / tau.sqrt();
    let w = prior
        .w_bar
        .iter()
        .map(|&m| m + sigma * standard_normal(rng))
        .collect();
    TaskParams { w, sigma }
}

/// `n` i.i.d. tasks drawn on the pool substream of `seeds`.
pub fn build_pool(prior: &PriorConfig, n: usize, seeds: &SeedStream) -> Result<TaskPool> {
    if n == 0 {
        return Err(Error::config("task pool size must be at least 1"));
    }
    let mut rng = seeds.substream(streams::POOL, 0);
    Ok(TaskPool {
        tasks: (0..n).map(|_| sample_task(prior, &mut rng)).collect(),
    })
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal(d: usize, rng: &mut Rng) -> DMatrix<f64> {
    assert!(d >= 1, "dimension must be at least 1");
    let g = DMatrix::from_fn(d, d, |_, _| standard_normal(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Per-sequence covariate sampler with its random covariance drawn once.
enum CovariateDraw {
    Diagonal(Vec<f64>),
    Rotated(DMatrix<f64>),
}

impl CovariateDraw {
    fn new(cov: &CovariateConfig, d: usize, rng: &mut Rng) -> Self {
        match cov {
            CovariateConfig::Isotropic { scale } => CovariateDraw::Diagonal(vec![scale.sqrt(); d]),
            CovariateConfig::FixedDiagonal { lambda } => {
                CovariateDraw::Diagonal(lambda.iter().map(|l| l.sqrt()).collect())
            }
            CovariateConfig::MetaUniform { lo, hi } => CovariateDraw::Diagonal(
                (0..d).map(|_| (lo + (hi - lo) * rng.random::<f64>()).sqrt()).collect(),
            ),
            CovariateConfig::RotatedDecreasing => {
                let u = random_orthogonal(d, rng);
                let scales = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |i, _| {
                    (d as f64 / (i + 1) as f64).sqrt()
                }));
                CovariateDraw::Rotated(u * scales)
            }
        }
    }

    fn sample(&self, d: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            CovariateDraw::Diagonal(sd) => sd.iter().map(|s| s * standard_normal(rng)).collect(),
            CovariateDraw::Rotated(m) => {
                let z: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
                (0..d).map(|i| (0..d).map(|k| m[(i, k)] * z[k]).sum()).collect()
            }
        }
    }
}

pub fn sample_sequence(task: &TaskParams, cov: &CovariateConfig, len: usize, rng: &mut Rng) -> PromptSequence {
    let d = task.w.len();
    let draw = CovariateDraw::new(cov, d, rng);
    let mut xs = Vec::with_capacity(len);
    let mut ys = Vec::with_capacity(len);
    for _ in 0..len {
        let x = draw.sample(d, rng);
        let mean: f64 = task.w.iter().zip(&x).map(|(w, x)| w * x).sum();
        ys.push(mean + task.sigma * standard_normal(rng));
        xs.push(x);
    }
    PromptSequence {
        xs,
        ys,
        task: task.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRegion {
    /// `w = |β|`.
    Positive,
    /// `w = -|β|`.
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaGroup {
    /// `[0.1, 0.3] ∪ [0.5, 0.7]`.
    G1,
    /// `[0.3, 0.5] ∪ [0.7, 0.9]`.
    G2,
}

impl SigmaGroup {
    pub fn intervals(self) -> [(f64, f64); 2] {
        match self {
            SigmaGroup::G1 => [(0.1, 0.3), (0.5, 0.7)],
            SigmaGroup::G2 => [(0.3, 0.5), (0.7, 0.9)],
        }
    }

    pub fn complement(self) -> SigmaGroup {
        match self {
            SigmaGroup::G1 => SigmaGroup::G2,
            SigmaGroup::G2 => SigmaGroup::G1,
        }
    }

    pub fn contains(self, sigma: f64) -> bool {
        self.intervals().iter().any(|&(lo, hi)| sigma >= lo && sigma <= hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    /// `(W₁, G₁) ∪ (W₂, G₂)`.
    Id,
    /// `(W₁, G₂) ∪ (W₂, G₁)`.
    Ood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlippedRegionConfig {
    pub d: usize,
    pub mode: FlipMode,
    /// Fixed weight region; `None` picks one of the two blocks uniformly.
    pub region: Option<WeightRegion>,
}

impl FlippedRegionConfig {
    pub fn new(d: usize, mode: FlipMode) -> Self {
        Self { d, mode, region: None }
    }

    pub fn group_for(&self, region: WeightRegion) -> SigmaGroup {
        match (self.mode, region) {
            (FlipMode::Id, WeightRegion::Positive) | (FlipMode::Ood, WeightRegion::Negative) => SigmaGroup::G1,
            (FlipMode::Id, WeightRegion::Negative) | (FlipMode::Ood, WeightRegion::Positive) => SigmaGroup::G2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlippedTask {
    pub task: TaskParams,
    pub region: WeightRegion,
    pub group: SigmaGroup,
}

pub fn sample_flipped_task(cfg: &FlippedRegionConfig, rng: &mut Rng) -> FlippedTask {
    let region = cfg.region.unwrap_or_else(|| {
        if rng.random::<bool>() {
            WeightRegion::Positive
        } else {
            WeightRegion::Negative
        }
    });
    let group = cfg.group_for(region);
    let sign = match region {
        WeightRegion::Positive => 1.0,
        WeightRegion::Negative => -1.0,
    };
    let w = (0..cfg.d).map(|_| sign * standard_normal(rng).abs()).collect();
    let [first, second] = group.intervals();
    let (lo, hi) = if rng.random::<bool>() { first } else { second };
    let sigma = lo + (hi - lo) * rng.random::<f64>();
    FlippedTask {
        task: TaskParams { w, sigma },
        region,
        group,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(i: u64) -> Rng {
        SeedStream::new(11).substream(streams::CHECKS, i)
    }

    #[test]
    fn noiseless_sequence_is_exact() {
        let task = TaskParams {
            w: vec![1.0, 0.0],
            sigma: 0.0,
        };
        let seq = sample_sequence(&task, &CovariateConfig::FixedDiagonal { lambda: vec![1.0, 0.0] }, 5, &mut rng(0));
        for (x, y) in seq.xs.iter().zip(&seq.ys) {
            assert_eq!(x[1], 0.0);
            assert_eq!(*y, x[0]);
        }
    }

    #[test]
    fn orthogonal_matrices() {
        let mut r = rng(1);
        let u1 = random_orthogonal(1, &mut r);
        assert_eq!(u1[(0, 0)].abs(), 1.0);
        for _ in 0..20 {
            let u = random_orthogonal(8, &mut r);
            let e = u.transpose() * &u - DMatrix::<f64>::identity(8, 8);
            assert!(e.amax() < 1e-10);
            assert!((u.determinant().abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn flipped_regions() {
        let mut r = rng(2);
        let id = FlippedRegionConfig {
            d: 8,
            mode: FlipMode::Id,
            region: Some(WeightRegion::Positive),
        };
        let ood = FlippedRegionConfig {
            d: 8,
            mode: FlipMode::Ood,
            region: Some(WeightRegion::Negative),
        };
        for _ in 0..500 {
            let t = sample_flipped_task(&id, &mut r);
            assert!(t.task.w.iter().all(|&w| w >= 0.0));
            assert!(SigmaGroup::G1.contains(t.task.sigma));
            let t = sample_flipped_task(&ood, &mut r);
            assert!(t.task.w.iter().all(|&w| w <= 0.0));
            assert!(SigmaGroup::G1.contains(t.task.sigma));
            let any = sample_flipped_task(&FlippedRegionConfig::new(8, FlipMode::Id), &mut r);
            assert!((0.1..=0.9).contains(&any.task.sigma));
        }
    }

    #[test]
    fn validation_rejects_bad_prior() {
        assert!(PriorConfig::new(8, 0.5, 1.0).validate().is_err());
        assert!(PriorConfig::new(0, 2.0, 1.0).validate().is_err());
        assert!(PriorConfig::in_distribution(8).validate().is_ok());
    }

    #[test]
    fn pool_sizes() {
        let seeds = SeedStream::new(3);
        let prior = PriorConfig::in_distribution(8);
        assert_eq!(build_pool(&prior, 1, &seeds).unwrap().len(), 1);
        assert_eq!(build_pool(&prior, 4096, &seeds).unwrap().len(), 4096);
        assert!(build_pool(&prior, 0, &seeds).is_err());
        assert_eq!(build_pool(&prior, 7, &seeds).unwrap(), build_pool(&prior, 7, &seeds).unwrap());
    }
}
