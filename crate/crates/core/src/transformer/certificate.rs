//! Parameter norms and the runtime boundedness certificate.
//!
//! Matrix `(p, q)`-norms are taken column-wise, so `‖·‖_{2,2}` is the
//! Frobenius norm and `‖Pᵀ‖_{2,∞}` is the largest row norm of `P`. With
//! `B_V`, `B_A`, `B_P` bounding the value, MLP and readout norms,
//!
//! ```text
//! C₁ = B_P (1 + B_A²)^L (1 + M B_V)^L
//! ```
//!
//! bounds `|ŷ| ≤ C₁ B` for embedded inputs with column norms at most `B`.
//! Since `σ̂ = softplus(z)` with `|z| ≤ C₁ B`, `σ̂` lies in
//! `[softplus(−C₁ B), 1 + C₁ B]`. The lower end is used here; the textbook
//! `exp(−C₁ B)` fails already at zero parameters (`ln 2 < 1`), so it is only
//! reported. The loss bound follows from the two:
//!
//! ```text
//! C₂ = (B_H + C₁ B)² / (2 σ_lo²) + max(−log σ_lo, log(1 + C₁ B))
//! ```

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{forward, ModelParams};
use crate::error::{Error, Result};
use crate::linalg::{softplus_scalar, Tensor};
use crate::rng::Rng;
use crate::taskgen::standard_normal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorms {
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub a1: f64,
    pub a2: f64,
}

impl LayerNorms {
    /// `‖W^{(l)}‖`, the largest head block norm.
    pub fn w(&self) -> f64 {
        self.w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .fold(0.0, |a: f64, &b| a.max(b))
    }

    /// `‖A^{(l)}‖`.
    pub fn a(&self) -> f64 {
        self.a1.max(self.a2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub layers: Vec<LayerNorms>,
    pub embed: f64,
    /// `‖Pᵀ‖_{2,∞}`
    pub readout: f64,
    /// `‖θ‖ = max{‖W^{(l)}‖, ‖A^{(l)}‖, ‖P‖}`
    pub theta: f64,
    pub b_v: f64,
    pub b_a: f64,
    pub b_p: f64,
}

fn max_row_norm(t: &Tensor) -> f64 {
    (0..t.rows())
        .map(|i| (0..t.cols()).map(|j| t.get(i, j).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

pub fn param_norms(params: &ModelParams) -> NormReport {
    let cfg = params.config();
    let fro = |slot: usize| params.get(slot).frobenius_norm();
    let layers: Vec<LayerNorms> = (0..cfg.layers)
        .map(|l| LayerNorms {
            w_q: (0..cfg.heads).map(|m| fro(cfg.slot_attn(l, m, 0))).collect(),
            w_k: (0..cfg.heads).map(|m| fro(cfg.slot_attn(l, m, 1))).collect(),
            w_v: (0..cfg.heads).map(|m| fro(cfg.slot_attn(l, m, 2))).collect(),
            a1: fro(cfg.slot_mlp(l, 0)),
            a2: fro(cfg.slot_mlp(l, 1)),
        })
        .collect();
    let readout = max_row_norm(params.get(cfg.slot_readout()));
    let theta = layers.iter().fold(readout, |acc, n| acc.max(n.w()).max(n.a()));
    let b_v = layers.iter().flat_map(|n| n.w_v.iter().copied()).fold(0.0, f64::max);
    let b_a = layers.iter().map(LayerNorms::a).fold(0.0, f64::max);
    NormReport {
        embed: fro(cfg.slot_embed()),
        layers,
        readout,
        theta,
        b_v,
        b_a,
        b_p: readout,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub b_h: f64,
    /// Bound on the column norms of the embedded prompt.
    pub b_emb: f64,
    pub c1: f64,
    pub c2: f64,
    /// `(C₁+1)² B_H² exp(2 C₁ B_H) + max{C₁ B_H, 1 + log(C₁ B_H)}`, reported only.
    pub c2_paper: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub max_abs_y_hat: f64,
    pub min_sigma: f64,
    pub max_sigma: f64,
    pub max_abs_loss: f64,
    pub trials: usize,
    pub checks: usize,
    pub violations: usize,
    /// Positions with `σ̂ < exp(−C₁ B_H)`.
    pub paper_sigma_lower_violations: usize,
}

impl CertificateReport {
    pub fn ensure(&self) -> Result<()> {
        if self.violations == 0 {
            Ok(())
        } else {
            Err(Error::Certificate(format!(
                "{} of {} checks violated (C1 = {}, C2 = {})",
                self.violations, self.checks, self.c1, self.c2
            )))
        }
    }
}

/// Uniform draw from the ball of radius `r` in `R^d`.
fn ball(d: usize, r: f64, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let rad = r * rng.random::<f64>().powf(1.0 / d as f64);
    v.into_iter().map(|a| a * rad / n).collect()
}

/// Samples `trials` random prompts of length `len` with `‖x‖₂ ≤ B_H` and
/// `|y| ≤ B_H`, and checks every prediction against the bounds.
pub fn boundedness_certificate(
    params: &ModelParams,
    b_h: f64,
    trials: usize,
    len: usize,
    rng: &mut Rng,
) -> Result<CertificateReport> {
    if !(b_h > 0.0) || len == 0 {
        return Err(Error::config("certificate needs B_H > 0 and len ≥ 1"));
    }
    let cfg = params.config();
    let norms = param_norms(params);
    let embed_factor = if cfg.is_theory_mode() { 1.0 } else { norms.embed };
    let pos = if cfg.pos_mode.enabled() {
        cfg.pos_scale * (2 * len - 1) as f64
    } else {
        0.0
    };
    let b_emb = embed_factor * b_h + pos;
    let l = cfg.layers as i32;
    let c1 = norms.b_p * (1.0 + norms.b_a.powi(2)).powi(l) * (1.0 + cfg.heads as f64 * norms.b_v).powi(l);
    let z_max = c1 * b_emb;
    let sigma_lo = softplus_scalar(-z_max);
    let sigma_hi = 1.0 + z_max;
    let c2 = (b_h + z_max).powi(2) / (2.0 * sigma_lo * sigma_lo) + (-sigma_lo.ln()).max(sigma_hi.ln());
    let c1bh = c1 * b_h;
    let c2_paper = (c1 + 1.0).powi(2) * b_h * b_h * (2.0 * c1bh).exp() + c1bh.max(1.0 + c1bh.ln());
    let paper_lo = (-c1bh).exp();
    let slack = 1e-9;

    let mut rep = CertificateReport {
        b_h,
        b_emb,
        c1,
        c2,
        c2_paper,
        sigma_lo,
        sigma_hi,
        max_abs_y_hat: 0.0,
        min_sigma: f64::INFINITY,
        max_sigma: 0.0,
        max_abs_loss: 0.0,
        trials,
        checks: 0,
        violations: 0,
        paper_sigma_lower_violations: 0,
    };
    for _ in 0..trials {
        let xs: Vec<Vec<f64>> = (0..len).map(|_| ball(cfg.d_in, b_h, rng)).collect();
        let ys: Vec<f64> = (0..len).map(|_| rng.random_range(-b_h..=b_h)).collect();
        let preds = forward(params, &xs, &ys, 0)?;
        for (p, &y) in preds.iter().zip(&ys) {
            let loss = p.nll(y);
            rep.max_abs_y_hat = rep.max_abs_y_hat.max(p.y_hat.abs());
            rep.min_sigma = rep.min_sigma.min(p.sigma_hat);
            rep.max_sigma = rep.max_sigma.max(p.sigma_hat);
            rep.max_abs_loss = rep.max_abs_loss.max(loss.abs());
            rep.checks += 1;
            let ok = p.y_hat.abs() <= z_max * (1.0 + slack) + slack
                && p.sigma_hat >= sigma_lo * (1.0 - slack)
                && p.sigma_hat <= sigma_hi * (1.0 + slack)
                && loss.abs() <= c2 * (1.0 + slack) + slack;
            if !ok {
                rep.violations += 1;
            }
            if p.sigma_hat < paper_lo {
                rep.paper_sigma_lower_violations += 1;
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::transformer::{init_params, InitScheme, ModelConfig};

    #[test]
    fn zero_params_have_zero_norms() {
        let cfg = ModelConfig::theory(3, 2, 2, 4);
        let p = init_params(&cfg, &mut SeedStream::new(0).substream(4, 0), InitScheme::Zero).unwrap();
        let n = param_norms(&p);
        assert_eq!(n.theta, 0.0);
        let rep = boundedness_certificate(&p, 1.0, 5, 4, &mut SeedStream::new(0).substream(5, 0)).unwrap();
        assert_eq!(rep.c1, 0.0);
        assert_eq!(rep.max_abs_y_hat, 0.0);
        rep.ensure().unwrap();
        // ln 2 < exp(0) = 1: the printed lower bound fails on every position
        assert_eq!(rep.paper_sigma_lower_violations, rep.checks);
    }

    #[test]
    fn single_entry_value_norm() {
        let cfg = ModelConfig::theory(3, 1, 1, 4);
        let mut p = init_params(&cfg, &mut SeedStream::new(0).substream(4, 0), InitScheme::Zero).unwrap();
        p.get_mut(cfg.slot_attn(0, 0, 2)).set(0, 0, 3.0);
        let n = param_norms(&p);
        assert_eq!(n.layers[0].w_v[0], 3.0);
        assert_eq!(n.b_v, 3.0);
        assert_eq!(n.theta, 3.0);
    }

    #[test]
    fn readout_norm_is_max_row() {
        let cfg = ModelConfig::theory(2, 1, 1, 4);
        let mut p = init_params(&cfg, &mut SeedStream::new(0).substream(4, 0), InitScheme::Zero).unwrap();
        let r = p.get_mut(cfg.slot_readout());
        r.set(0, 0, 3.0);
        r.set(0, 1, 4.0);
        r.set(1, 0, 1.0);
        assert_eq!(param_norms(&p).readout, 5.0);
    }
}
