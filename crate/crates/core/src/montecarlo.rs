//! Per-position Monte-Carlo evaluation shared by the Bayes risk estimator,
//! the baselines and every experiment suite.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bayes::BayesPredictor;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::predict::{Prediction, SequencePredictor};
use crate::rng::{streams, SeedStream};
use crate::taskgen::{
    sample_flipped_task, sample_sequence, sample_task, CovariateConfig, FlippedRegionConfig, PriorConfig,
    PromptSequence, TaskPool,
};

/// Where evaluation tasks come from.
#[derive(Clone, Debug)]
pub enum TaskSource {
    /// Fresh draws from a prior.
    Prior(PriorConfig),
    /// Fresh draws from a flipped-region design.
    Flipped(FlippedRegionConfig),
    /// Uniform draws (with replacement) from a frozen pool.
    Pool(TaskPool),
}

impl TaskSource {
    pub fn sample_sequence(&self, cov: &CovariateConfig, len: usize, rng: &mut crate::rng::Rng) -> PromptSequence {
        use rand::Rng as _;
        let task = match self {
            TaskSource::Prior(p) => sample_task(p, rng),
            TaskSource::Flipped(f) => sample_flipped_task(f, rng).task,
            TaskSource::Pool(pool) => pool.tasks[rng.random_range(0..pool.len())].clone(),
        };
        sample_sequence(&task, cov, len, rng)
    }
}

#[derive(Clone, Debug)]
pub struct EvalSpec {
    pub tasks: TaskSource,
    pub covariates: CovariateConfig,
    pub len: usize,
    pub n_eval: usize,
    pub seed: u64,
    /// Prior of the Bayes oracle used by the `*_vs_bayes` metrics.
    pub reference_prior: PriorConfig,
    pub exec: Execution,
}

impl EvalSpec {
    /// Evaluation on fresh tasks from `prior`, isotropic unit covariates, with
    /// the same prior as Bayes reference.
    pub fn from_prior(prior: PriorConfig, len: usize, n_eval: usize, seed: u64) -> Self {
        Self {
            tasks: TaskSource::Prior(prior.clone()),
            covariates: CovariateConfig::default(),
            len,
            n_eval,
            seed,
            reference_prior: prior,
            exec: Execution::default(),
        }
    }

    pub fn sequence(&self, i: usize) -> PromptSequence {
        let mut rng = SeedStream::new(self.seed).substream(streams::EVAL, i as u64);
        self.tasks.sample_sequence(&self.covariates, self.len, &mut rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MeanMse,
    AvgSigma,
    Nll,
    NeglogAbsSigmaErr,
    AbsErrVsBayesMean,
    AbsErrVsBayesSigma,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::MeanMse,
        Metric::AvgSigma,
        Metric::Nll,
        Metric::NeglogAbsSigmaErr,
        Metric::AbsErrVsBayesMean,
        Metric::AbsErrVsBayesSigma,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::MeanMse => "mean_mse",
            Metric::AvgSigma => "avg_sigma",
            Metric::Nll => "nll",
            Metric::NeglogAbsSigmaErr => "neglog_abs_sigma_err",
            Metric::AbsErrVsBayesMean => "abs_err_vs_bayes_mean",
            Metric::AbsErrVsBayesSigma => "abs_err_vs_bayes_sigma",
        }
    }

    fn needs_reference(self) -> bool {
        matches!(
            self,
            Metric::NeglogAbsSigmaErr | Metric::AbsErrVsBayesMean | Metric::AbsErrVsBayesSigma
        )
    }

    /// Value of the metric for one prediction.
    pub fn score(self, pred: &Prediction, y: f64, reference: Option<&Prediction>) -> f64 {
        match self {
            Metric::MeanMse => (y - pred.y_hat).powi(2),
            Metric::AvgSigma => pred.sigma_hat,
            Metric::Nll => pred.nll(y),
            Metric::NeglogAbsSigmaErr => {
                let r = reference.expect("reference prediction");
                -(pred.sigma_hat - r.sigma_hat).abs().max(1e-8).ln()
            }
            Metric::AbsErrVsBayesMean => (pred.y_hat - reference.expect("reference prediction").y_hat).abs(),
            Metric::AbsErrVsBayesSigma => (pred.sigma_hat - reference.expect("reference prediction").sigma_hat).abs(),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown metric '{s}'")))
    }
}

/// One plotted curve: per-`x` means with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub config_hash: String,
    pub n_eval: usize,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            x: Vec::new(),
            mean: Vec::new(),
            stderr: Vec::new(),
            config_hash: String::new(),
            n_eval: 0,
        }
    }

    pub fn push(&mut self, x: f64, mean: f64, stderr: f64) {
        self.x.push(x);
        self.mean.push(mean);
        self.stderr.push(stderr);
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Mean at position `t` (1-based), assuming `x = 1, 2, …`.
    pub fn at(&self, t: usize) -> f64 {
        self.mean[t - 1]
    }

    /// Average of the means over positions `lo..=hi` (1-based).
    pub fn window_mean(&self, lo: usize, hi: usize) -> f64 {
        let s = &self.mean[lo - 1..hi];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Running sum / sum of squares per position.
#[derive(Clone, Debug)]
pub struct PositionAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    n: usize,
}

impl PositionAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
            n: 0,
        }
    }

    pub fn add(&mut self, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
        }
        self.n += 1;
    }

    pub fn finish(&self, name: impl Into<String>) -> MetricSeries {
        let mut s = MetricSeries::new(name);
        let n = self.n as f64;
        for i in 0..self.sum.len() {
            let mean = self.sum[i] / n;
            let se = if self.n > 1 {
                let var = ((self.sum_sq[i] - n * mean * mean) / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            s.push((i + 1) as f64, mean, se);
        }
        s.n_eval = self.n;
        s
    }
}

/// Evaluates every predictor on the same `n_eval` sequences and returns
/// `result[predictor][metric]`, each a series over positions `1..=len`.
pub fn eval_by_position(
    predictors: &[&dyn SequencePredictor],
    spec: &EvalSpec,
    metrics: &[Metric],
) -> Result<Vec<Vec<MetricSeries>>> {
    if spec.n_eval == 0 {
        return Err(Error::config("n_eval must be at least 1"));
    }
    let reference = BayesPredictor::new(spec.reference_prior.clone());
    let need_ref = metrics.iter().any(|m| m.needs_reference());

    let per_seq = par::try_map_indexed(spec.n_eval, spec.exec, |i| -> Result<Vec<Vec<Vec<f64>>>> {
        let seq = spec.sequence(i);
        let ref_preds = if need_ref {
            Some(reference.predict_sequence(&seq)?)
        } else {
            None
        };
        predictors
            .iter()
            .map(|p| {
                let preds = p.predict_sequence(&seq)?;
                Ok(metrics
                    .iter()
                    .map(|m| {
                        preds
                            .iter()
                            .enumerate()
                            .map(|(t, pr)| m.score(pr, seq.ys[t], ref_preds.as_ref().map(|r| &r[t])))
                            .collect()
                    })
                    .collect())
            })
            .collect()
    })?;

    let mut acc = vec![vec![PositionAccumulator::new(spec.len); metrics.len()]; predictors.len()];
    for seq_vals in &per_seq {
        for (p, per_metric) in seq_vals.iter().enumerate() {
            for (m, vals) in per_metric.iter().enumerate() {
                acc[p][m].add(vals);
            }
        }
    }
    Ok(predictors
        .iter()
        .zip(acc)
        .map(|(p, accs)| {
            metrics
                .iter()
                .zip(accs)
                .map(|(m, a)| a.finish(format!("{}/{}", p.name(), m)))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
        }
        assert!("bogus".parse::<Metric>().is_err());
    }

    #[test]
    fn accumulator_stats() {
        let mut a = PositionAccumulator::new(2);
        a.add(&[1.0, 5.0]);
        a.add(&[3.0, 5.0]);
        let s = a.finish("x");
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert!((s.stderr[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.stderr[1], 0.0);
    }

    #[test]
    fn constant_sigma_perfect_mean_has_log_c_risk() {
        struct Oracle(f64);
        impl SequencePredictor for Oracle {
            fn name(&self) -> String {
                "oracle".into()
            }
            fn predict_sequence(&self, seq: &PromptSequence) -> Result<Vec<Prediction>> {
                Ok(seq
                    .xs
                    .iter()
                    .map(|x| Prediction::new(seq.task.w.iter().zip(x).map(|(w, x)| w * x).sum(), self.0))
                    .collect())
            }
        }
        let pool = TaskPool {
            tasks: vec![crate::taskgen::TaskParams {
                w: vec![1.0, -2.0],
                sigma: 0.0,
            }],
        };
        let spec = EvalSpec {
            tasks: TaskSource::Pool(pool),
            covariates: CovariateConfig::default(),
            len: 5,
            n_eval: 20,
            seed: 1,
            reference_prior: PriorConfig::in_distribution(2),
            exec: Execution::Sequential,
        };
        let out = eval_by_position(&[&Oracle(0.7)], &spec, &[Metric::Nll]).unwrap();
        for v in &out[0][0].mean {
            assert_eq!(*v, 0.7f64.ln());
        }
    }
}
