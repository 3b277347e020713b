//! Graph construction for the forward pass and the per-sequence loss.
//!
//! With more than one layer, a single causally masked pass would let column
//! `j` see tokens older than its window through the columns it attends to.
//! Positions whose window does not start at the first token are therefore
//! evaluated by a separate pass over exactly their `2S + 1` tokens, which keeps
//! every prediction a function of its own window only.

use super::ModelParams;
use crate::error::{Error, Result};
use crate::linalg::{ColumnMask, Gradients, Graph, Tensor, Var};
use crate::predict::{Prediction, SequencePredictor};
use crate::taskgen::PromptSequence;

/// Token content matrix `d_in × (2t − 1)` for `t = xs.len()`.
fn content(xs: &[Vec<f64>], ys: &[f64], d_in: usize) -> Result<Tensor> {
    let t = xs.len();
    if t == 0 {
        return Err(Error::Domain {
            op: "embed",
            detail: "prompt has no query".into(),
        });
    }
    if ys.len() + 1 < t {
        return Err(Error::Shape {
            op: "embed",
            lhs: vec![t],
            rhs: vec![ys.len()],
        });
    }
    let n = 2 * t - 1;
    let mut c = Tensor::zeros(&[d_in, n]);
    for (s, x) in xs.iter().enumerate() {
        if x.len() != d_in {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![d_in],
                rhs: vec![x.len()],
            });
        }
        for (i, &v) in x.iter().enumerate() {
            c.set(i, 2 * s, v);
        }
        if s + 1 < t {
            c.set(0, 2 * s + 1, ys[s]);
        }
    }
    Ok(c)
}

fn positions(params: &ModelParams, n: usize, offset: usize) -> Tensor {
    let cfg = params.config();
    let mut p = Tensor::zeros(&[cfg.d_model, n]);
    for j in 0..n {
        p.set(0, j, cfg.pos_scale * (j + 1 + offset) as f64);
    }
    p
}

fn embed_graph(g: &mut Graph, params: &ModelParams, slots: &[Var], xs: &[Vec<f64>], ys: &[f64], offset: usize) -> Result<Var> {
    let cfg = params.config();
    let c = content(xs, ys, cfg.d_in)?;
    let n = c.cols();
    let c = g.input(c);
    let h = g.matmul(slots[cfg.slot_embed()], c)?;
    if cfg.pos_mode.enabled() {
        let p = g.input(positions(params, n, offset));
        g.add(h, p)
    } else {
        Ok(h)
    }
}

/// Embedded tokens `D × (2t − 1)` for the prompt `(x_1, y_1, …, x_t)`.
pub fn embed(params: &ModelParams, xs: &[Vec<f64>], ys: &[f64], offset: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let slots = register(&mut g, params);
    let h = embed_graph(&mut g, params, &slots, xs, ys, offset)?;
    Ok(g.value(h).clone())
}

fn register(g: &mut Graph, params: &ModelParams) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .enumerate()
        .map(|(s, t)| {
            if params.is_trainable(s) {
                g.param(s, t.clone())
            } else {
                g.input(t.clone())
            }
        })
        .collect()
}

fn check_finite(g: &Graph, v: Var, layer: usize, stage: &'static str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { layer, stage })
    }
}

/// Runs the layer stack over `z` and returns the readout `2 × n`.
fn stack(g: &mut Graph, params: &ModelParams, slots: &[Var], mut z: Var) -> Result<Var> {
    let cfg = params.config();
    let mask = ColumnMask::Causal {
        lookback: 2 * cfg.window,
    };
    for l in 0..cfg.layers {
        let mut acc = z;
        for m in 0..cfg.heads {
            let q = g.matmul(slots[cfg.slot_attn(l, m, 0)], z)?;
            let k = g.matmul(slots[cfg.slot_attn(l, m, 1)], z)?;
            let logits = g.band_scores(k, q, mask)?;
            let attn = g.softmax_cols(logits, mask);
            let v = g.matmul(slots[cfg.slot_attn(l, m, 2)], z)?;
            let head = g.band_apply(v, attn, mask)?;
            acc = g.add(acc, head)?;
        }
        check_finite(g, acc, l + 1, "attention")?;
        let pre = g.matmul(slots[cfg.slot_mlp(l, 0)], acc)?;
        let hidden = g.relu(pre);
        let out = g.matmul(slots[cfg.slot_mlp(l, 1)], hidden)?;
        z = g.add(acc, out)?;
        check_finite(g, z, l + 1, "mlp")?;
    }
    g.matmul(slots[cfg.slot_readout()], z)
}

/// Outputs `(ŷ, σ̂)` as two `1 × t` rows, one column per x-position.
fn build(g: &mut Graph, params: &ModelParams, xs: &[Vec<f64>], ys: &[f64], offset: usize) -> Result<(Var, Var)> {
    let cfg = params.config();
    let slots = register(g, params);
    let h = embed_graph(g, params, &slots, xs, ys, offset)?;
    let t = xs.len();
    let s = cfg.window;
    // with one layer the mask alone realizes the window exactly
    let main_t = if cfg.layers == 1 { t } else { t.min(s + 1) };

    let main_in = if main_t == t {
        h
    } else {
        g.select_cols(h, (0..2 * main_t - 1).collect())
    };
    let main_out = stack(g, params, &slots, main_in)?;
    let mut parts = vec![g.select_cols(main_out, (0..main_t).map(|i| 2 * i).collect())];
    for pos in main_t + 1..=t {
        let start = 2 * (pos - s - 1);
        let win = g.select_cols(h, (start..=2 * pos - 2).collect());
        let out = stack(g, params, &slots, win)?;
        parts.push(g.select_cols(out, vec![2 * s]));
    }
    let out = if parts.len() == 1 { parts[0] } else { g.concat_cols(parts)? };
    let y_hat = g.row(out, 0);
    let logit = g.row(out, 1);
    let sigma = g.softplus(logit);
    Ok((y_hat, sigma))
}

/// Predictions at every x-position of `(x_1, y_1, …, x_t)`. `ys` may include
/// the final label, which is ignored.
pub fn forward(params: &ModelParams, xs: &[Vec<f64>], ys: &[f64], offset: usize) -> Result<Vec<Prediction>> {
    let mut g = Graph::new();
    let (y_hat, sigma) = build(&mut g, params, xs, ys, offset)?;
    Ok(g.value(y_hat)
        .data()
        .iter()
        .zip(g.value(sigma).data())
        .map(|(&m, &s)| Prediction::new(m, s))
        .collect())
}

/// Prediction for `y_t` given `t` covariates and the first `t − 1` labels.
pub fn predict_at(params: &ModelParams, xs: &[Vec<f64>], ys: &[f64]) -> Result<Prediction> {
    forward(params, xs, ys, 0).map(|mut p| p.pop().expect("non-empty prompt"))
}

#[derive(Debug)]
pub struct LossGrads {
    /// Sum of the per-position NLL over the selected positions.
    pub loss_sum: f64,
    pub count: usize,
    pub grads: Gradients,
}

/// NLL summed over positions `lo..=hi` (1-based) of `seq`, with gradients.
pub fn sequence_loss(params: &ModelParams, seq: &PromptSequence, offset: usize, lo: usize, hi: usize) -> Result<LossGrads> {
    let t = seq.len();
    if !(1 <= lo && lo <= hi && hi <= t) {
        return Err(Error::config(format!("loss positions [{lo}, {hi}] outside 1..={t}")));
    }
    let mut g = Graph::new();
    let (y_hat, sigma) = build(&mut g, params, &seq.xs[..hi], &seq.ys, offset)?;
    let cols: Vec<usize> = (lo - 1..hi).collect();
    let y_hat = g.select_cols(y_hat, cols.clone());
    let sigma = g.select_cols(sigma, cols);
    let y = g.input(Tensor::matrix(1, hi - lo + 1, seq.ys[lo - 1..hi].to_vec()));
    let resid = g.sub(y, y_hat)?;
    let sq = g.square(resid);
    let var = g.square(sigma);
    let inv = g.recip(var)?;
    let quad = g.mul(sq, inv)?;
    let quad = g.scale(quad, 0.5);
    let log_sigma = g.log(sigma)?;
    let per_pos = g.add(log_sigma, quad)?;
    let total = g.sum(per_pos);
    let loss_sum = g.value(total).item();
    if !loss_sum.is_finite() {
        return Err(Error::NonFinite {
            layer: params.config().layers,
            stage: "loss",
        });
    }
    let grads = g.backward(total)?;
    Ok(LossGrads {
        loss_sum,
        count: hi - lo + 1,
        grads,
    })
}

#[derive(Clone, Debug)]
pub struct TransformerPredictor {
    pub params: ModelParams,
    pub label: String,
}

impl TransformerPredictor {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            label: "transformer".into(),
        }
    }

    pub fn named(params: ModelParams, label: impl Into<String>) -> Self {
        Self {
            params,
            label: label.into(),
        }
    }
}

impl SequencePredictor for TransformerPredictor {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict_sequence(&self, seq: &PromptSequence) -> Result<Vec<Prediction>> {
        forward(&self.params, &seq.xs, &seq.ys, 0)
    }
}
