//! Binary checkpoint format.
//!
//! ```text
//! "ICLUQ1\0"  version: u32  config hash: [u8; 32]  count: u64
//! count × { name_len: u64, name: utf-8, rank: u64, dims: rank × u64, data: f64 LE }
//! ```
//!
//! Tensors: `config/model`, `param/<slot>`, `opt/m/<slot>`, `opt/v/<slot>`,
//! `opt/t`, `state/step`, `state/rng` (the run seed as two 32-bit halves).

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::trainer::{AdamState, Checkpoint};
use crate::transformer::{ModelConfig, ModelParams, PosMode};

pub const MAGIC: &[u8; 7] = b"ICLUQ1\0";
pub const VERSION: u32 = 1;

const POS_MODES: [PosMode; 4] = [PosMode::None, PosMode::Builtin, PosMode::Segment, PosMode::FullRange];

fn encode_model(cfg: &ModelConfig) -> Tensor {
    let pos = POS_MODES.iter().position(|&m| m == cfg.pos_mode).expect("known mode") as f64;
    let v = vec![
        cfg.layers as f64,
        cfg.heads as f64,
        cfg.d_in as f64,
        cfg.d_model as f64,
        cfg.d_key as f64,
        cfg.d_hidden as f64,
        cfg.window as f64,
        pos,
        cfg.pos_scale,
        cfg.init_std,
    ];
    Tensor::new(vec![v.len()], v).expect("shape matches")
}

fn decode_model(t: &Tensor) -> Result<ModelConfig> {
    let v = t.data();
    if v.len() != 10 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("config/model has {} entries, expected 10", v.len()),
        });
    }
    let u = |i: usize| v[i] as usize;
    let pos = POS_MODES.get(u(7)).copied().ok_or_else(|| Error::Format {
        offset: 0,
        msg: format!("unknown positional mode {}", v[7]),
    })?;
    Ok(ModelConfig {
        layers: u(0),
        heads: u(1),
        d_in: u(2),
        d_model: u(3),
        d_key: u(4),
        d_hidden: u(5),
        window: u(6),
        pos_mode: pos,
        pos_scale: v[8],
        init_std: v[9],
    })
}

fn scalar_vec(v: Vec<f64>) -> Tensor {
    Tensor::new(vec![v.len()], v).expect("shape matches")
}

/// Header plus named tensors, exactly as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub config_hash: [u8; 32],
    pub tensors: Vec<(String, Tensor)>,
}

impl RawCheckpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Names and shapes, in file order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
    }
}

pub fn to_raw(ckpt: &Checkpoint) -> RawCheckpoint {
    let mut tensors = vec![("config/model".to_string(), encode_model(ckpt.params.config()))];
    let named = ckpt.params.named();
    for (name, t) in &named {
        tensors.push((format!("param/{name}"), (*t).clone()));
    }
    for ((name, _), m) in named.iter().zip(&ckpt.opt.m) {
        tensors.push((format!("opt/m/{name}"), m.clone()));
    }
    for ((name, _), v) in named.iter().zip(&ckpt.opt.v) {
        tensors.push((format!("opt/v/{name}"), v.clone()));
    }
    tensors.push(("opt/t".into(), scalar_vec(vec![ckpt.opt.t as f64])));
    tensors.push(("state/step".into(), scalar_vec(vec![ckpt.step as f64])));
    tensors.push((
        "state/rng".into(),
        scalar_vec(vec![(ckpt.seed >> 32) as f64, (ckpt.seed & 0xFFFF_FFFF) as f64]),
    ));
    RawCheckpoint {
        config_hash: ckpt.config_hash,
        tensors,
    }
}

fn missing(name: &str) -> Error {
    Error::Format {
        offset: 0,
        msg: format!("missing tensor '{name}'"),
    }
}

pub fn from_raw(raw: &RawCheckpoint) -> Result<Checkpoint> {
    let need = |name: &str| raw.get(name).ok_or_else(|| missing(name));
    let cfg = decode_model(need("config/model")?)?;
    let layout = cfg.layout();
    let mut params = Vec::with_capacity(layout.len());
    let mut m = Vec::with_capacity(layout.len());
    let mut v = Vec::with_capacity(layout.len());
    for (name, _) in &layout {
        params.push((name.clone(), need(&format!("param/{name}"))?.clone()));
        m.push(need(&format!("opt/m/{name}"))?.clone());
        v.push(need(&format!("opt/v/{name}"))?.clone());
    }
    let params = ModelParams::from_named(cfg, params)?;
    for (s, (mt, vt)) in m.iter().zip(&v).enumerate() {
        if mt.shape() != params.get(s).shape() || vt.shape() != params.get(s).shape() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("optimizer moment shape mismatch for '{}'", layout[s].0),
            });
        }
    }
    let first = |name: &str| -> Result<f64> {
        need(name)?.data().first().copied().ok_or_else(|| missing(name))
    };
    let rng = need("state/rng")?.data();
    if rng.len() != 2 {
        return Err(missing("state/rng"));
    }
    Ok(Checkpoint {
        params,
        opt: AdamState {
            m,
            v,
            t: first("opt/t")? as u64,
        },
        step: first("state/step")? as u64,
        seed: ((rng[0] as u64) << 32) | rng[1] as u64,
        config_hash: raw.config_hash,
    })
}

pub fn encode(raw: &RawCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&raw.config_hash);
    out.extend_from_slice(&(raw.tensors.len() as u64).to_le_bytes());
    for (name, t) in &raw.tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// A length field, sanity-checked against the bytes left.
    fn len(&mut self, what: &str, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > left) {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("{what} = {n} exceeds the remaining {left} bytes"),
            });
        }
        Ok(n as usize)
    }
}

pub fn decode(buf: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let at = r.pos;
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format {
            offset: at as u64,
            msg: format!("unsupported version {version}"),
        });
    }
    let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
    let count = r.len("tensor count", 8)?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.len("name length", 1)?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                msg: "tensor name is not utf-8".into(),
            })?
            .to_string();
        let rank = r.len("rank", 8)?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.buf.len() - r.pos))
            .ok_or_else(|| r.err(format!("data of '{name}' runs past the end of the file")))?;
        let data = r
            .take(n * 8, "tensor data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after the last tensor"));
    }
    Ok(RawCheckpoint { config_hash, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(&to_raw(ckpt)))?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<RawCheckpoint> {
    decode(&std::fs::read(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_raw(&load_raw(path)?)
}
