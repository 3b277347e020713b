//! Experiment drivers. Each suite returns plain [`MetricSeries`] so the CLI can
//! write them out as CSV and SVG without knowing what produced them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::baselines::{OlsPredictor, RidgePredictor};
use crate::bayes::{truncated_predict, BayesPredictor};
use crate::error::{Error, Result};
use crate::montecarlo::{eval_by_position, EvalSpec, Metric, MetricSeries, PositionAccumulator, TaskSource};
use crate::par::{self, Execution};
use crate::predict::{Prediction, SequencePredictor};
use crate::rng::{streams, SeedStream};
use crate::taskgen::{
    sample_flipped_task, sample_sequence, CovariateConfig, FlipMode, FlippedRegionConfig, FlippedTask, PriorConfig,
    PromptSequence, SigmaGroup,
};
use crate::trainer::{self, Example, TrainConfig, TrainSetup};
use crate::transformer::{ModelConfig, ModelParams, TransformerPredictor};

fn prefixed(prefix: &str, groups: Vec<Vec<MetricSeries>>) -> Vec<MetricSeries> {
    groups
        .into_iter()
        .flatten()
        .map(|mut s| {
            s.name = format!("{prefix}/{}", s.name);
            s
        })
        .collect()
}

/// Bayes, ridge and OLS on in-distribution tasks: mean error, average
/// predicted σ and NLL per position.
pub fn bayes_curves(prior: &PriorConfig, cov: &CovariateConfig, len: usize, n_eval: usize, seed: u64, exec: Execution) -> Result<Vec<MetricSeries>> {
    let mut spec = EvalSpec::from_prior(prior.clone(), len, n_eval, seed);
    spec.covariates = cov.clone();
    spec.exec = exec;
    let bayes = BayesPredictor::new(prior.clone());
    let ridge = RidgePredictor::default();
    let ols = OlsPredictor;
    let out = eval_by_position(
        &[&bayes, &ridge, &ols],
        &spec,
        &[Metric::MeanMse, Metric::AvgSigma, Metric::Nll],
    )?;
    Ok(out.into_iter().flatten().collect())
}

/// The task-shift priors, labelled, for dimension `d`.
pub fn task_shift_priors(d: usize) -> Vec<(&'static str, PriorConfig)> {
    vec![
        ("id", PriorConfig::in_distribution(d)),
        ("s_ood", PriorConfig::small_ood(d)),
        ("m_ood", PriorConfig::medium_ood(d)),
        ("l_ood", PriorConfig::large_ood(d)),
    ]
}

/// Average predicted σ of each model and of the Bayes oracle built on the
/// training prior, on tasks drawn from each shifted prior.
pub fn task_shift_suite(
    models: &[TransformerPredictor],
    train_prior: &PriorConfig,
    len: usize,
    n_eval: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<MetricSeries>> {
    let bayes = BayesPredictor::new(train_prior.clone());
    let mut predictors: Vec<&dyn SequencePredictor> = models.iter().map(|m| m as &dyn SequencePredictor).collect();
    predictors.push(&bayes);
    let mut out = Vec::new();
    for (label, prior) in task_shift_priors(train_prior.d) {
        let spec = EvalSpec {
            tasks: TaskSource::Prior(prior),
            covariates: CovariateConfig::default(),
            len,
            n_eval,
            seed,
            reference_prior: train_prior.clone(),
            exec,
        };
        out.extend(prefixed(
            label,
            eval_by_position(&predictors, &spec, &[Metric::AvgSigma, Metric::AbsErrVsBayesSigma])?,
        ));
    }
    Ok(out)
}

/// The covariate-shift test settings, labelled, for dimension `d`.
pub fn covariate_shift_settings(d: usize) -> Vec<(&'static str, CovariateConfig)> {
    vec![
        ("id", CovariateConfig::Isotropic { scale: 1.0 }),
        ("l_cov", CovariateConfig::Isotropic { scale: 4.0 }),
        ("decreasing", CovariateConfig::decreasing(d)),
        ("shrinking", CovariateConfig::shrinking(d)),
        ("rotated", CovariateConfig::RotatedDecreasing),
    ]
}

/// Distance of the models' mean and σ from the Bayes oracle under each
/// covariate setting. The oracle conditions on the realized covariates, so it
/// stays exact under any shift.
pub fn covariate_shift_suite(
    models: &[TransformerPredictor],
    prior: &PriorConfig,
    len: usize,
    n_eval: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<MetricSeries>> {
    let predictors: Vec<&dyn SequencePredictor> = models.iter().map(|m| m as &dyn SequencePredictor).collect();
    let mut out = Vec::new();
    for (label, cov) in covariate_shift_settings(prior.d) {
        let spec = EvalSpec {
            tasks: TaskSource::Prior(prior.clone()),
            covariates: cov,
            len,
            n_eval,
            seed,
            reference_prior: prior.clone(),
            exec,
        };
        out.extend(prefixed(
            label,
            eval_by_position(
                &predictors,
                &spec,
                &[Metric::AbsErrVsBayesMean, Metric::AbsErrVsBayesSigma, Metric::MeanMse],
            )?,
        ));
    }
    Ok(out)
}

/// `|σ̂ − σ*|` per position for models trained on truncated losses.
pub fn length_shift_suite(
    models: &[TransformerPredictor],
    prior: &PriorConfig,
    len: usize,
    n_eval: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<MetricSeries>> {
    let predictors: Vec<&dyn SequencePredictor> = models.iter().map(|m| m as &dyn SequencePredictor).collect();
    let mut spec = EvalSpec::from_prior(prior.clone(), len, n_eval, seed);
    spec.exec = exec;
    Ok(eval_by_position(&predictors, &spec, &[Metric::AbsErrVsBayesSigma, Metric::NeglogAbsSigmaErr])?
        .into_iter()
        .flatten()
        .collect())
}

/// Where a predicted σ falls relative to the task's true group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupCall {
    Accurate,
    Complementary,
    OutOfSupport,
}

/// Membership of `sigma_hat` as predicted; boundary values count for the true
/// group.
pub fn classify_raw(sigma_hat: f64, truth: SigmaGroup) -> GroupCall {
    if truth.contains(sigma_hat) {
        GroupCall::Accurate
    } else if truth.complement().contains(sigma_hat) {
        GroupCall::Complementary
    } else {
        GroupCall::OutOfSupport
    }
}

fn group_distance(group: SigmaGroup, s: f64) -> f64 {
    group
        .intervals()
        .iter()
        .map(|&(lo, hi)| if s < lo { lo - s } else if s > hi { s - hi } else { 0.0 })
        .fold(f64::INFINITY, f64::min)
}

/// Membership after snapping values outside both groups to the nearest
/// interval, so every prediction is either accurate or complementary.
pub fn classify_resolved(sigma_hat: f64, truth: SigmaGroup) -> GroupCall {
    if group_distance(truth, sigma_hat) <= group_distance(truth.complement(), sigma_hat) {
        GroupCall::Accurate
    } else {
        GroupCall::Complementary
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlippedRates {
    pub n: usize,
    pub accuracy: f64,
    pub complementary: f64,
    pub out_of_support: f64,
    pub resolved_accuracy: f64,
}

impl FlippedRates {
    pub fn resolved_complementary(&self) -> f64 {
        1.0 - self.resolved_accuracy
    }

    /// Share of raw misclassifications that land in the complementary group.
    pub fn complementary_share(&self) -> Option<f64> {
        let miss = self.complementary + self.out_of_support;
        (miss > 0.0).then(|| self.complementary / miss)
    }
}

/// Bayes predictor that knows the task's σ group: σ uniform on the group's
/// support, `w ~ N(0, I)`. The marginal likelihood over a σ grid is evaluated
/// through one eigendecomposition of `XᵀX` per history.
#[derive(Clone, Debug)]
pub struct GroupBayesOracle {
    pub points_per_interval: usize,
}

impl Default for GroupBayesOracle {
    fn default() -> Self {
        Self { points_per_interval: 200 }
    }
}

/// Posterior summary of [`GroupBayesOracle`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupPosterior {
    pub prediction: Prediction,
    /// `E[σ | history]`.
    pub sigma_mean: f64,
}

impl GroupBayesOracle {
    pub fn grid(&self, group: SigmaGroup) -> Vec<f64> {
        let k = self.points_per_interval;
        group
            .intervals()
            .iter()
            .flat_map(|&(lo, hi)| (0..k).map(move |i| lo + (hi - lo) * (i as f64 + 0.5) / k as f64))
            .collect()
    }

    pub fn posterior(&self, xs: &[Vec<f64>], ys: &[f64], x: &[f64], group: SigmaGroup) -> Result<GroupPosterior> {
        let d = x.len();
        let n = ys.len();
        let mut gram = DMatrix::<f64>::zeros(d, d);
        let mut xty = DVector::<f64>::zeros(d);
        for (xi, &yi) in xs.iter().zip(ys) {
            let v = DVector::from_column_slice(xi);
            gram.ger(1.0, &v, &v, 1.0);
            xty.axpy(yi, &v, 1.0);
        }
        let yy: f64 = ys.iter().map(|y| y * y).sum();
        let eig = SymmetricEigen::new(gram);
        let lambda: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
        let z = eig.eigenvectors.tr_mul(&xty);
        let u = eig.eigenvectors.tr_mul(&DVector::from_column_slice(x));

        let grid = self.grid(group);
        let mut logp = Vec::with_capacity(grid.len());
        let mut moments = Vec::with_capacity(grid.len());
        for &sigma in &grid {
            let s = sigma * sigma;
            let (mut logdet, mut quad, mut mean, mut epi) = ((n as f64 - d as f64) * s.ln(), yy, 0.0, 0.0);
            for i in 0..d {
                let denom = s + lambda[i];
                logdet += denom.ln();
                quad -= z[i] * z[i] / denom;
                mean += u[i] * z[i] / denom;
                epi += u[i] * u[i] * s / denom;
            }
            logp.push(-0.5 * (logdet + quad / s));
            moments.push((mean, s + epi));
        }
        let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut z_sum, mut m1, mut m2, mut es) = (0.0, 0.0, 0.0, 0.0);
        for ((lp, (mean, var)), sigma) in logp.iter().zip(&moments).zip(&grid) {
            let p = (lp - max).exp();
            z_sum += p;
            m1 += p * mean;
            m2 += p * (var + mean * mean);
            es += p * sigma;
        }
        if !(z_sum > 0.0) {
            return Err(Error::Domain {
                op: "group_bayes",
                detail: "posterior weights vanished".into(),
            });
        }
        let (m1, m2) = (m1 / z_sum, m2 / z_sum);
        Ok(GroupPosterior {
            prediction: Prediction::new(m1, (m2 - m1 * m1).max(0.0).sqrt()),
            sigma_mean: es / z_sum,
        })
    }
}

/// Flipped-region evaluation task `i` (EVAL stream): the task and a sequence
/// of length `len` drawn from it.
pub fn flipped_example(cfg: &FlippedRegionConfig, len: usize, seed: u64, i: usize) -> (FlippedTask, PromptSequence) {
    let mut rng = SeedStream::new(seed).substream(streams::EVAL, i as u64);
    let task = sample_flipped_task(cfg, &mut rng);
    let seq = sample_sequence(&task.task, &CovariateConfig::default(), len, &mut rng);
    (task, seq)
}

/// Classification rates of the σ predicted at the last token of `n_eval`
/// flipped-region sequences. `sigma_at_last` maps a task and its sequence to
/// the predicted σ at position `len`.
pub fn flipped_rates<F>(cfg: &FlippedRegionConfig, len: usize, n_eval: usize, seed: u64, exec: Execution, sigma_at_last: F) -> Result<FlippedRates>
where
    F: Fn(&FlippedTask, &PromptSequence) -> Result<f64> + Sync + Send,
{
    if n_eval == 0 {
        return Err(Error::config("n_eval must be at least 1"));
    }
    let calls = par::try_map_indexed(n_eval, exec, |i| -> Result<(GroupCall, GroupCall)> {
        let (task, seq) = flipped_example(cfg, len, seed, i);
        let s = sigma_at_last(&task, &seq)?;
        Ok((classify_raw(s, task.group), classify_resolved(s, task.group)))
    })?;
    let n = calls.len() as f64;
    let frac = |f: &dyn Fn(&(GroupCall, GroupCall)) -> bool| calls.iter().filter(|c| f(c)).count() as f64 / n;
    Ok(FlippedRates {
        n: calls.len(),
        accuracy: frac(&|c| c.0 == GroupCall::Accurate),
        complementary: frac(&|c| c.0 == GroupCall::Complementary),
        out_of_support: frac(&|c| c.0 == GroupCall::OutOfSupport),
        resolved_accuracy: frac(&|c| c.1 == GroupCall::Accurate),
    })
}

/// σ̂ at the last token of a sequence for a generic predictor.
pub fn last_sigma(p: &dyn SequencePredictor, seq: &PromptSequence) -> Result<f64> {
    let preds = p.predict_sequence(seq)?;
    Ok(preds.last().map(|p| p.sigma_hat).unwrap_or(f64::NAN))
}

/// Rates of the group-aware oracle, classifying its posterior mean of σ.
pub fn flipped_oracle_rates(d: usize, mode: FlipMode, len: usize, n_eval: usize, seed: u64, exec: Execution) -> Result<FlippedRates> {
    let oracle = GroupBayesOracle::default();
    let cfg = FlippedRegionConfig::new(d, mode);
    flipped_rates(&cfg, len, n_eval, seed, exec, |task, seq| {
        let t = seq.len() - 1;
        Ok(oracle.posterior(&seq.xs[..t], &seq.ys[..t], &seq.xs[t], task.group)?.sigma_mean)
    })
}

fn proportion_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// ID and OOD classification rates of each checkpoint along a training run,
/// as series over the training step.
pub fn flipped_suite(checkpoints: &[(u64, ModelParams)], d: usize, len: usize, n_eval: usize, seed: u64, exec: Execution) -> Result<Vec<MetricSeries>> {
    let names = [
        "id/accuracy",
        "id/resolved_accuracy",
        "ood/accuracy",
        "ood/complementary",
        "ood/out_of_support",
        "ood/resolved_accuracy",
        "ood/resolved_complementary",
    ];
    let mut out: Vec<MetricSeries> = names.iter().map(|n| MetricSeries::new(*n)).collect();
    for (step, params) in checkpoints {
        let model = TransformerPredictor::new(params.clone());
        let sigma = |_: &FlippedTask, seq: &PromptSequence| last_sigma(&model, seq);
        let id = flipped_rates(&FlippedRegionConfig::new(d, FlipMode::Id), len, n_eval, seed, exec, sigma)?;
        let ood = flipped_rates(&FlippedRegionConfig::new(d, FlipMode::Ood), len, n_eval, seed, exec, sigma)?;
        let values = [
            id.accuracy,
            id.resolved_accuracy,
            ood.accuracy,
            ood.complementary,
            ood.out_of_support,
            ood.resolved_accuracy,
            ood.resolved_complementary(),
        ];
        for (s, v) in out.iter_mut().zip(values) {
            s.push(*step as f64, v, proportion_se(v, n_eval));
            s.n_eval = n_eval;
        }
    }
    Ok(out)
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Fits `ln y = a + b ln x` over the pairs with `x, y > 0`; `None` if fewer
/// than two such pairs remain.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some(SlopeFit {
        slope,
        intercept: my - slope * mx,
        points: pts.len(),
    })
}

/// One cell of the gap-study grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapPoint {
    /// Number of training sequences.
    pub n: usize,
    /// Sequence length `T`.
    pub seq_len: usize,
    /// Context window `S`.
    pub window: usize,
}

#[derive(Clone, Debug)]
pub struct GapStudyConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prior: PriorConfig,
    pub covariates: CovariateConfig,
    pub grid: Vec<GapPoint>,
    pub trials: usize,
    /// Fresh sequences for each population-risk estimate.
    pub n_pop: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapMeasurement {
    pub point: GapPoint,
    pub gap: f64,
    pub stderr: f64,
    pub train_risk: f64,
    pub population_risk: f64,
    pub mean_epochs: f64,
    pub all_converged: bool,
}

/// A slope fit over one slice of the grid, with the coordinates held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceFit {
    /// `(T, S)` for fits against `n`, `(n, T)` for fits against `min(S, T)`.
    pub fixed: (usize, usize),
    pub fit: SlopeFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapStudyResult {
    pub measurements: Vec<GapMeasurement>,
    pub slope_vs_n: Vec<SliceFit>,
    pub slope_vs_window: Vec<SliceFit>,
}

impl GapStudyResult {
    /// Gaps as series over `n`, one per `(T, S)`.
    pub fn series(&self) -> Vec<MetricSeries> {
        let mut keys: Vec<(usize, usize)> = self.measurements.iter().map(|m| (m.point.seq_len, m.point.window)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .map(|(t, s)| {
                let mut rows: Vec<&GapMeasurement> = self
                    .measurements
                    .iter()
                    .filter(|m| (m.point.seq_len, m.point.window) == (t, s))
                    .collect();
                rows.sort_by_key(|m| m.point.n);
                let mut series = MetricSeries::new(format!("gap_t{t}_s{s}"));
                for m in rows {
                    series.push(m.point.n as f64, m.gap, m.stderr);
                }
                series
            })
            .collect()
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean per-sequence loss of `params` on `n_pop` fresh sequences (POPULATION
/// stream), with its Monte-Carlo standard error.
pub fn population_risk(params: &ModelParams, setup: &TrainSetup, n_pop: usize) -> Result<(f64, f64)> {
    let (lo, hi) = setup.train.positions();
    let seeds = SeedStream::new(setup.seed);
    let per_seq = par::try_map_indexed(n_pop, setup.train.exec(), |i| -> Result<f64> {
        let mut rng = seeds.substream(streams::POPULATION, i as u64);
        let seq = setup.tasks.sample_sequence(&setup.covariates, setup.train.seq_len, &mut rng);
        let ex = Example { seq, offset: 0 };
        trainer::eval_loss(params, std::slice::from_ref(&ex), lo, hi, Execution::Sequential)
    })?;
    Ok(mean_and_se(&per_seq))
}

/// Fixed-data ERM at every grid point: gap between Monte-Carlo population
/// risk and empirical risk, with log-log slopes against `n` and `min(S, T)`.
pub fn gap_study(cfg: &GapStudyConfig) -> Result<GapStudyResult> {
    if cfg.trials == 0 || cfg.n_pop == 0 {
        return Err(Error::config("gap study needs trials ≥ 1 and n_pop ≥ 1"));
    }
    let root = SeedStream::new(cfg.seed);
    let mut measurements = Vec::with_capacity(cfg.grid.len());
    for (gi, point) in cfg.grid.iter().enumerate() {
        let mut gaps = Vec::with_capacity(cfg.trials);
        let (mut train_sum, mut pop_sum, mut epochs, mut all_converged, mut mc_se) = (0.0, 0.0, 0.0, true, 0.0);
        for trial in 0..cfg.trials {
            let mut model = cfg.model.clone();
            model.window = point.window;
            let mut train = cfg.train.clone();
            train.seq_len = point.seq_len;
            train.fixed_dataset = Some(point.n);
            let setup = TrainSetup {
                model,
                train,
                tasks: TaskSource::Prior(cfg.prior.clone()),
                covariates: cfg.covariates.clone(),
                seed: root.child((gi * cfg.trials + trial) as u64).root(),
                config_hash: [0; 32],
            };
            let fit = trainer::train_fixed_dataset(&setup)?;
            let (pop, se) = population_risk(&fit.checkpoint.params, &setup, cfg.n_pop)?;
            gaps.push(pop - fit.train_risk);
            train_sum += fit.train_risk;
            pop_sum += pop;
            epochs += fit.epochs as f64;
            all_converged &= fit.converged;
            mc_se += se * se;
        }
        let k = cfg.trials as f64;
        let (gap, trial_se) = mean_and_se(&gaps);
        let stderr = if cfg.trials > 1 { trial_se } else { mc_se.sqrt() };
        measurements.push(GapMeasurement {
            point: *point,
            gap,
            stderr,
            train_risk: train_sum / k,
            population_risk: pop_sum / k,
            mean_epochs: epochs / k,
            all_converged,
        });
    }

    let slices = |key: &dyn Fn(&GapPoint) -> (usize, usize), x: &dyn Fn(&GapPoint) -> f64| {
        let mut keys: Vec<(usize, usize)> = measurements.iter().map(|m| key(&m.point)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .filter_map(|k| {
                let rows: Vec<&GapMeasurement> = measurements.iter().filter(|m| key(&m.point) == k).collect();
                let xs: Vec<f64> = rows.iter().map(|m| x(&m.point)).collect();
                let ys: Vec<f64> = rows.iter().map(|m| m.gap).collect();
                fit_loglog(&xs, &ys).map(|fit| SliceFit { fixed: k, fit })
            })
            .collect::<Vec<_>>()
    };
    let slope_vs_n = slices(&|p| (p.seq_len, p.window), &|p| p.n as f64);
    let slope_vs_window = slices(&|p| (p.n, p.seq_len), &|p| p.window.min(p.seq_len) as f64);
    Ok(GapStudyResult {
        measurements,
        slope_vs_n,
        slope_vs_window,
    })
}

#[derive(Clone, Debug)]
pub struct TruncationConfig {
    pub prior: PriorConfig,
    pub covariates: CovariateConfig,
    /// Position (1-based) at which the risks are compared.
    pub t_eval: usize,
    pub windows: Vec<usize>,
    pub n_mc: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl TruncationConfig {
    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            tasks: TaskSource::Prior(self.prior.clone()),
            covariates: self.covariates.clone(),
            len: self.t_eval,
            n_eval: self.n_mc,
            seed: self.seed,
            reference_prior: self.prior.clone(),
            exec: self.exec,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruncationResult {
    /// `R^S_t − R_t` against `S`, from paired per-sequence differences.
    pub gaps: MetricSeries,
    /// Full-history Bayes risk at `t_eval` and its standard error.
    pub full_risk: f64,
    pub full_stderr: f64,
    pub slope: Option<SlopeFit>,
}

/// Risk lost by restricting the Bayes oracle to its last `S` pairs, at one
/// position, on the same sequences [`eval_by_position`] would draw.
pub fn truncation_gap_study(cfg: &TruncationConfig) -> Result<TruncationResult> {
    if cfg.t_eval < 2 || cfg.n_mc == 0 {
        return Err(Error::config("truncation study needs t_eval ≥ 2 and n_mc ≥ 1"));
    }
    let spec = cfg.eval_spec();
    let full = BayesPredictor::new(cfg.prior.clone());
    let t = cfg.t_eval - 1;
    let rows = par::try_map_indexed(cfg.n_mc, cfg.exec, |i| -> Result<Vec<f64>> {
        let seq = spec.sequence(i);
        let y = seq.ys[t];
        let base = Metric::Nll.score(&full.predict_sequence(&seq)?[t], y, None);
        let mut row = vec![base];
        for &s in &cfg.windows {
            let p = truncated_predict(&seq.xs[..t], &seq.ys[..t], s, &seq.xs[t], &cfg.prior)?;
            row.push(Metric::Nll.score(&p, y, None) - base);
        }
        Ok(row)
    })?;
    let mut acc = PositionAccumulator::new(cfg.windows.len() + 1);
    for r in &rows {
        acc.add(r);
    }
    let stats = acc.finish("truncation");
    let mut gaps = MetricSeries::new("truncation_gap");
    for (k, &s) in cfg.windows.iter().enumerate() {
        gaps.push(s as f64, stats.mean[k + 1], stats.stderr[k + 1]);
    }
    gaps.n_eval = cfg.n_mc;
    let slope = fit_loglog(&gaps.x, &gaps.mean);
    Ok(TruncationResult {
        gaps,
        full_risk: stats.mean[0],
        full_stderr: stats.stderr[0],
        slope,
    })
}
