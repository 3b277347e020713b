//! Decoder-only transformer with merged residuals, no layer normalization and
//! a two-channel readout `(ŷ, softplus(σ-logit))`.
//!
//! A prompt `(x_1, y_1, …, x_t)` becomes `2t − 1` tokens: `x_s` as is and
//! `y_s` zero-padded to `d_in`. Token `j` (1-based) is embedded as
//! `E·content_j + pos_scale·(j + offset)·e₁` when positions are enabled.
//! Each layer applies
//!
//! ```text
//! Z ← Z + Σ_m (W_V^m Z) softmax((W_K^m Z)ᵀ (W_Q^m Z))
//! Z ← Z + A₂ ReLU(A₁ Z)
//! ```
//!
//! with a causal mask that also limits each column to the previous `S` pairs.

mod certificate;
mod forward;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use certificate::{boundedness_certificate, param_norms, CertificateReport, LayerNorms, NormReport};
pub use forward::{embed, forward, predict_at, sequence_loss, LossGrads, TransformerPredictor};

use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    #[default]
    None,
    Builtin,
    Segment,
    FullRange,
}

impl PosMode {
    pub fn enabled(self) -> bool {
        self != PosMode::None
    }

    /// Largest random training offset for this mode.
    pub fn max_offset(self) -> usize {
        match self {
            PosMode::Segment => 22,
            PosMode::FullRange => 100,
            _ => 0,
        }
    }

    /// Offset for one training sequence; evaluation always uses 0.
    pub fn sample_offset(self, rng: &mut Rng) -> usize {
        match self.max_offset() {
            0 => 0,
            hi => rng.random_range(0..=hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// L
    pub layers: usize,
    /// M
    pub heads: usize,
    /// Token content width, equal to the covariate dimension.
    pub d_in: usize,
    /// D; `d_model == d_in` selects the identity embedding.
    pub d_model: usize,
    /// d_m, the key/query width of each head.
    pub d_key: usize,
    /// d_h, the MLP hidden width.
    pub d_hidden: usize,
    /// S, in (x, y) pairs.
    pub window: usize,
    pub pos_mode: PosMode,
    pub pos_scale: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_in: 8,
            d_model: 64,
            d_key: 16,
            d_hidden: 256,
            window: 100,
            pos_mode: PosMode::None,
            pos_scale: 1.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Identity-embedding model with `D = d_in`.
    pub fn theory(d: usize, layers: usize, heads: usize, window: usize) -> Self {
        Self {
            layers,
            heads,
            d_in: d,
            d_model: d,
            d_key: d,
            d_hidden: 4 * d,
            window,
            ..Self::default()
        }
    }

    pub fn is_theory_mode(&self) -> bool {
        self.d_model == self.d_in
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.layers >= 1, "model.layers must be at least 1"),
            (self.heads >= 1, "model.heads must be at least 1"),
            (self.d_in >= 1, "model.d_in must be at least 1"),
            (self.d_key >= 1, "model.d_key must be at least 1"),
            (self.d_hidden >= 1, "model.d_hidden must be at least 1"),
            (self.window >= 1, "model.window must be at least 1"),
            (self.d_model >= self.d_in, "model.d_model must be at least d_in"),
            (
                self.pos_scale > 0.0 && self.pos_scale.is_finite(),
                "model.pos_scale must be positive",
            ),
            (
                self.init_std >= 0.0 && self.init_std.is_finite(),
                "model.init_std must be non-negative",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }

    fn slots_per_layer(&self) -> usize {
        3 * self.heads + 2
    }

    pub fn slot_count(&self) -> usize {
        self.layers * self.slots_per_layer() + 2
    }

    /// `which`: 0 = W_Q, 1 = W_K, 2 = W_V.
    pub fn slot_attn(&self, layer: usize, head: usize, which: usize) -> usize {
        layer * self.slots_per_layer() + 3 * head + which
    }

    /// `which`: 0 = A₁, 1 = A₂.
    pub fn slot_mlp(&self, layer: usize, which: usize) -> usize {
        layer * self.slots_per_layer() + 3 * self.heads + which
    }

    pub fn slot_embed(&self) -> usize {
        self.layers * self.slots_per_layer()
    }

    pub fn slot_readout(&self) -> usize {
        self.slot_embed() + 1
    }

    /// Name and shape of every slot, in slot order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let (d, dm, dh) = (self.d_model, self.d_key, self.d_hidden);
        let mut out = Vec::with_capacity(self.slot_count());
        for l in 0..self.layers {
            for m in 0..self.heads {
                out.push((format!("layer{l}.head{m}.w_q"), [dm, d]));
                out.push((format!("layer{l}.head{m}.w_k"), [dm, d]));
                out.push((format!("layer{l}.head{m}.w_v"), [d, d]));
            }
            out.push((format!("layer{l}.mlp.a1"), [dh, d]));
            out.push((format!("layer{l}.mlp.a2"), [d, dh]));
        }
        out.push(("embed".into(), [d, self.d_in]));
        out.push(("readout".into(), [2, d]));
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    Gaussian,
    /// Every weight zero and `E = [I; 0]`: the identity-residual network.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    cfg: ModelConfig,
    tensors: Vec<Tensor>,
}

fn padded_identity(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..cols.min(rows) {
        t.set(i, i, 1.0);
    }
    t
}

/// Gaussian weights with `cfg.init_std`. The embedding starts at `[I; 0]`
/// (plus noise when it is trainable) so token content reaches the residual
/// stream at unit scale.
pub fn init_params(cfg: &ModelConfig, rng: &mut Rng, scheme: InitScheme) -> Result<ModelParams> {
    cfg.validate()?;
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::config(e.to_string()))?;
    let embed_slot = cfg.slot_embed();
    let tensors = cfg
        .layout()
        .into_iter()
        .enumerate()
        .map(|(slot, (_, [r, c]))| {
            let mut t = if slot == embed_slot {
                padded_identity(r, c)
            } else {
                Tensor::zeros(&[r, c])
            };
            let noisy = scheme == InitScheme::Gaussian && (slot != embed_slot || !cfg.is_theory_mode());
            if noisy {
                for v in t.data_mut() {
                    *v += normal.sample(rng);
                }
            }
            t
        })
        .collect();
    Ok(ModelParams { cfg: cfg.clone(), tensors })
}

impl ModelParams {
    /// Builds from named tensors, checking names and shapes against `cfg`.
    pub fn from_named(cfg: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        if named.len() != layout.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, shape), (got_name, t)) in layout.into_iter().zip(named) {
            if name != got_name || t.shape() != shape {
                return Err(Error::config(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self { cfg, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.cfg
            .layout()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.tensors)
            .collect()
    }

    /// The theory-mode embedding is fixed at the identity.
    pub fn is_trainable(&self, slot: usize) -> bool {
        slot != self.cfg.slot_embed() || !self.cfg.is_theory_mode()
    }

    pub fn num_trainable(&self) -> usize {
        (0..self.tensors.len())
            .filter(|&s| self.is_trainable(s))
            .map(|s| self.tensors[s].len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Trainable entries in slot order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for (s, t) in self.tensors.iter().enumerate() {
            if self.is_trainable(s) {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_trainable(), "flat parameter length");
        let mut off = 0;
        for s in 0..self.tensors.len() {
            if self.is_trainable(s) {
                let t = self.tensors[s].data_mut();
                let n = t.len();
                t.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
    }
}
