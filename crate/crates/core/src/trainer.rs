//! Empirical-risk training of the transformer on the per-position Gaussian
//! NLL, with Adam and global-norm gradient clipping.
//!
//! Every random draw of step `k` comes from substream `(TRAIN, k·b + i)` of the
//! run seed, so a resumed run replays exactly the batches an uninterrupted
//! run would have seen.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::montecarlo::TaskSource;
use crate::par::{self, Execution};
use crate::predict::Prediction;
use crate::rng::{streams, SeedStream};
use crate::taskgen::{CovariateConfig, PromptSequence};
use crate::transformer::{self, ModelConfig, ModelParams};

/// `log σ̂ + (y − ŷ)² / (2σ̂²)`.
pub fn nll_loss(pred: &Prediction, y: f64) -> f64 {
    pred.nll(y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    /// T, the training sequence length.
    pub seq_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// N; 0 draws every training task fresh from the prior.
    pub pool_size: usize,
    /// `[t_lo, t_hi]`, 1-based and inclusive; defaults to `[1, seq_len]`.
    pub loss_positions: Option<[usize; 2]>,
    /// Size of the frozen dataset for fixed-data ERM.
    pub fixed_dataset: Option<usize>,
    /// Epoch cap for fixed-data ERM.
    pub max_epochs: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Held-out sequences scored at every trace row; 0 skips evaluation.
    pub trace_eval: usize,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200_000,
            batch: 64,
            seq_len: 100,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            pool_size: 65_536,
            loss_positions: None,
            fixed_dataset: None,
            max_epochs: 20_000,
            log_every: 100,
            checkpoint_every: 0,
            trace_eval: 0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn positions(&self) -> (usize, usize) {
        match self.loss_positions {
            Some([lo, hi]) => (lo, hi),
            None => (1, self.seq_len),
        }
    }

    pub fn exec(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.positions();
        if self.batch == 0 {
            return Err(Error::config("train.batch must be at least 1"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("train.seq_len must be at least 1"));
        }
        if !(1 <= lo && lo <= hi && hi <= self.seq_len) {
            return Err(Error::config(format!(
                "train.loss_positions [{lo}, {hi}] must satisfy 1 ≤ lo ≤ hi ≤ seq_len = {}",
                self.seq_len
            )));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.lr must be positive and betas in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.grad_clip < 0.0 {
            return Err(Error::config("train.eps must be positive and grad_clip non-negative"));
        }
        if self.fixed_dataset == Some(0) {
            return Err(Error::config("train.fixed_dataset must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Global L2 norm of the trainable gradients.
pub fn grad_norm(params: &ModelParams, grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .enumerate()
        .filter(|(s, _)| params.is_trainable(*s))
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update; gradients are first rescaled so their
/// global norm is at most `grad_clip`. Returns the pre-clip norm.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> f64 {
    let norm = grad_norm(params, grads);
    let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for slot in 0..grads.len() {
        if !params.is_trainable(slot) {
            continue;
        }
        let g = grads[slot].data();
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let p = params.get_mut(slot).data_mut();
        for i in 0..g.len() {
            let gi = g[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    norm
}

/// One training example: a sequence and its positional offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub seq: PromptSequence,
    pub offset: usize,
}

/// Mean NLL over the batch and positions `lo..=hi`, with its gradient.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[Example],
    lo: usize,
    hi: usize,
    exec: Execution,
) -> Result<(f64, Vec<Tensor>)> {
    let per = par::try_map_indexed(batch.len(), exec, |i| {
        transformer::sequence_loss(params, &batch[i].seq, batch[i].offset, lo, hi)
    })?;
    let count: usize = per.iter().map(|p| p.count).sum();
    let w = 1.0 / count as f64;
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut total = 0.0;
    for p in &per {
        total += p.loss_sum;
        p.grads.accumulate_into(&mut grads, w);
    }
    Ok((total * w, grads))
}

/// Mean NLL only, without building gradients.
pub fn eval_loss(params: &ModelParams, data: &[Example], lo: usize, hi: usize, exec: Execution) -> Result<f64> {
    let per = par::try_map_indexed(data.len(), exec, |i| -> Result<(f64, usize)> {
        let ex = &data[i];
        let preds = transformer::forward(params, &ex.seq.xs[..hi], &ex.seq.ys, ex.offset)?;
        Ok((
            (lo - 1..hi).map(|t| nll_loss(&preds[t], ex.seq.ys[t])).sum(),
            hi - lo + 1,
        ))
    })?;
    let (s, n) = per.iter().fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    Ok(s / n as f64)
}

/// Largest relative disagreement between backpropagated gradients of the
/// summed sequence loss and central differences with step `step`, over every
/// trainable entry.
pub fn gradient_check(params: &ModelParams, seq: &PromptSequence, step: f64) -> Result<f64> {
    let len = seq.len();
    let value_and_grad = |flat: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut p = params.clone();
        p.set_flat(flat);
        let lg = transformer::sequence_loss(&p, seq, 0, 1, len)?;
        let mut g: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        lg.grads.accumulate_into(&mut g, 1.0);
        let flat_g = g
            .iter()
            .enumerate()
            .filter(|(s, _)| p.is_trainable(*s))
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        Ok((lg.loss_sum, flat_g))
    };
    let point = params.flatten();
    value_and_grad(&point)?;
    Ok(crate::linalg::finite_diff_check(
        |x| value_and_grad(x).unwrap_or((f64::NAN, vec![f64::NAN; x.len()])),
        &point,
        step,
    ))
}

/// Everything a run needs besides the evolving state.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tasks: TaskSource,
    pub covariates: CovariateConfig,
    pub seed: u64,
    pub config_hash: [u8; 32],
}

impl TrainSetup {
    /// Example `i` of step `step`.
    pub fn example(&self, step: u64, i: usize) -> Example {
        let mut rng = SeedStream::new(self.seed).substream(streams::TRAIN, step * self.train.batch as u64 + i as u64);
        let seq = self.tasks.sample_sequence(&self.covariates, self.train.seq_len, &mut rng);
        let offset = self.model.pos_mode.sample_offset(&mut rng);
        Example { seq, offset }
    }

    pub fn batch(&self, step: u64) -> Vec<Example> {
        (0..self.train.batch).map(|i| self.example(step, i)).collect()
    }

    /// Fixed held-out set for trace evaluation, drawn like training data.
    pub fn trace_eval_set(&self) -> Vec<Example> {
        let seeds = SeedStream::new(self.seed);
        (0..self.train.trace_eval)
            .map(|i| {
                let mut rng = seeds.substream(streams::TRAIN_EVAL, i as u64);
                let seq = self.tasks.sample_sequence(&self.covariates, self.train.seq_len, &mut rng);
                Example { seq, offset: 0 }
            })
            .collect()
    }

    pub fn init(&self) -> Result<Checkpoint> {
        let mut rng = SeedStream::new(self.seed).substream(streams::INIT, 0);
        let params = transformer::init_params(&self.model, &mut rng, transformer::InitScheme::Gaussian)?;
        Ok(Checkpoint {
            opt: AdamState::new(&params),
            params,
            step: 0,
            seed: self.seed,
            config_hash: self.config_hash,
        })
    }
}

/// Parameters plus optimizer state at a given step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: AdamState,
    pub step: u64,
    pub seed: u64,
    pub config_hash: [u8; 32],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    /// Mean batch loss since the previous row.
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    /// Batch loss at every step, for smoothing.
    pub losses: Vec<f64>,
}

/// Trains from a fresh initialization. `on_checkpoint` is called every
/// `checkpoint_every` steps and, on divergence, with the last finite state.
pub fn train(setup: &TrainSetup, on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>) -> Result<TrainOutcome> {
    let ckpt = setup.init()?;
    resume(setup, ckpt, setup.train.steps, on_checkpoint)
}

/// Continues `ckpt` until step `until`.
pub fn resume(
    setup: &TrainSetup,
    mut ckpt: Checkpoint,
    until: u64,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    setup.train.validate()?;
    let (lo, hi) = setup.train.positions();
    let exec = setup.train.exec();
    let adam = setup.train.adam();
    let eval_set = setup.trace_eval_set();
    let mut trace = Vec::new();
    let mut losses = Vec::new();
    let mut window = (0.0, 0u64);
    while ckpt.step < until {
        let batch = setup.batch(ckpt.step);
        let (loss, grads) = match batch_loss(&ckpt.params, &batch, lo, hi, exec) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => (f64::NAN, Vec::new()),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            on_checkpoint(&ckpt)?;
            return Err(Error::Diverged { step: ckpt.step, loss });
        }
        let before = ckpt.clone();
        adam_step(&mut ckpt.params, &grads, &mut ckpt.opt, &adam);
        if !ckpt.params.is_finite() {
            on_checkpoint(&before)?;
            return Err(Error::Diverged { step: before.step, loss });
        }
        ckpt.step += 1;
        losses.push(loss);
        window.0 += loss;
        window.1 += 1;
        let log_now = setup.train.log_every > 0 && ckpt.step % setup.train.log_every == 0;
        if log_now || ckpt.step == until {
            let eval_loss = if eval_set.is_empty() {
                None
            } else {
                Some(eval_loss(&ckpt.params, &eval_set, lo, hi, exec)?)
            };
            trace.push(TraceRow {
                step: ckpt.step,
                train_loss: window.0 / window.1 as f64,
                eval_loss,
            });
            window = (0.0, 0);
        }
        if setup.train.checkpoint_every > 0 && ckpt.step % setup.train.checkpoint_every == 0 {
            on_checkpoint(&ckpt)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        trace,
        losses,
    })
}

#[derive(Clone, Debug)]
pub struct FixedOutcome {
    pub checkpoint: Checkpoint,
    pub data: Vec<Example>,
    /// Empirical risk at the returned parameters.
    pub train_risk: f64,
    pub epochs: u64,
    pub converged: bool,
}

/// The frozen dataset of `n` sequences used by fixed-data ERM.
pub fn fixed_dataset(setup: &TrainSetup, n: usize) -> Vec<Example> {
    let seeds = SeedStream::new(setup.seed);
    (0..n)
        .map(|i| {
            let mut rng = seeds.substream(streams::FIXED_DATA, i as u64);
            let seq = setup.tasks.sample_sequence(&setup.covariates, setup.train.seq_len, &mut rng);
            Example { seq, offset: 0 }
        })
        .collect()
}

/// Full-batch Adam on a frozen dataset until the empirical risk improves by
/// less than `1e-4` over 10 epochs (or `max_epochs` is reached).
pub fn train_fixed_dataset(setup: &TrainSetup) -> Result<FixedOutcome> {
    setup.train.validate()?;
    let n = setup
        .train
        .fixed_dataset
        .ok_or_else(|| Error::config("train.fixed_dataset is not set"))?;
    let data = fixed_dataset(setup, n);
    let (lo, hi) = setup.train.positions();
    let exec = setup.train.exec();
    let adam = setup.train.adam();
    let mut ckpt = setup.init()?;
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    while ckpt.step < setup.train.max_epochs {
        let (loss, grads) = batch_loss(&ckpt.params, &data, lo, hi, exec)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: ckpt.step, loss });
        }
        history.push(loss);
        let e = history.len();
        if e > 10 && history[e - 11] - history[e - 1] < 1e-4 {
            converged = true;
            break;
        }
        adam_step(&mut ckpt.params, &grads, &mut ckpt.opt, &adam);
        ckpt.step += 1;
    }
    let train_risk = eval_loss(&ckpt.params, &data, lo, hi, exec)?;
    Ok(FixedOutcome {
        epochs: ckpt.step,
        checkpoint: ckpt,
        data,
        train_risk,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{init_params, InitScheme};

    #[test]
    fn nll_examples() {
        assert_eq!(nll_loss(&Prediction::new(0.0, 1.0), 0.0), 0.0);
        assert_eq!(nll_loss(&Prediction::new(1.0, 1.0), 0.0), 0.5);
        assert!((nll_loss(&Prediction::new(0.0, std::f64::consts::E), 0.0) - 1.0).abs() < 1e-15);
    }

    fn one_param_model() -> ModelParams {
        let cfg = ModelConfig::theory(1, 1, 1, 1);
        init_params(&cfg, &mut SeedStream::new(0).substream(4, 0), InitScheme::Zero).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = one_param_model();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zeros: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam_step(&mut p, &zeros, &mut st, &AdamConfig::default());
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one_param_model();
        let mut st = AdamState::new(&p);
        let mut g: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let slot = p.config().slot_readout();
        g[slot].set(0, 0, 0.3);
        g[slot].set(1, 0, -0.2);
        let cfg = AdamConfig {
            grad_clip: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &g, &mut st, &cfg);
        let r = p.get(slot);
        assert!((r.get(0, 0) + cfg.lr).abs() < 1e-10);
        assert!((r.get(1, 0) - cfg.lr).abs() < 1e-10);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let p = one_param_model();
        let mut g: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        g[p.config().slot_readout()].set(0, 0, 3.0);
        g[p.config().slot_readout()].set(1, 0, 4.0);
        assert_eq!(grad_norm(&p, &g), 5.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig {
            seq_len: 10,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_ok());
        c.loss_positions = Some([5, 11]);
        assert!(c.validate().is_err());
        c.loss_positions = Some([6, 5]);
        assert!(c.validate().is_err());
        c.loss_positions = Some([5, 10]);
        assert!(c.validate().is_ok());
        c.batch = 0;
        assert!(c.validate().is_err());
    }
}
