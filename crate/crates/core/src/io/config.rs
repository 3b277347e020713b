//! Run configuration: one TOML file with a section per module, plus
//! `section.key=value` overrides from the command line.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs"
//!
//! [prior]          # d = 8, tau_shape = 20, tau_rate = 20, w_bar = [1; d]
//! [covariates]     # kind = "isotropic", scale = 1
//! [model]          # see ModelConfig; d_in follows prior.d unless set
//! [train]          # see TrainConfig
//! [experiment]     # see ExperimentConfig
//! ```
//!
//! Every key is optional. Unknown keys and type mismatches are rejected with
//! the offending line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::montecarlo::TaskSource;
use crate::rng::SeedStream;
use crate::taskgen::{build_pool, CovariateConfig, PriorConfig};
use crate::trainer::{TrainConfig, TrainSetup};
use crate::transformer::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PriorSection {
    d: usize,
    tau_shape: f64,
    tau_rate: f64,
    w_bar: Option<Vec<f64>>,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            d: 8,
            tau_shape: 20.0,
            tau_rate: 20.0,
            w_bar: None,
        }
    }
}

/// Covariate law by name: `isotropic` (scale), `diagonal` (lambda),
/// `decreasing`, `shrinking`, `meta_uniform` (lo, hi) or `rotated`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CovariateSection {
    kind: String,
    scale: Option<f64>,
    lambda: Option<Vec<f64>>,
    lo: Option<f64>,
    hi: Option<f64>,
}

impl Default for CovariateSection {
    fn default() -> Self {
        Self {
            kind: "isotropic".into(),
            scale: None,
            lambda: None,
            lo: None,
            hi: None,
        }
    }
}

impl CovariateSection {
    fn resolve(&self, d: usize) -> Result<CovariateConfig> {
        let unused = |name: &str, set: bool| {
            if set {
                Err(Error::config(format!("covariates.{name} is not used by kind '{}'", self.kind)))
            } else {
                Ok(())
            }
        };
        let cov = match self.kind.as_str() {
            "isotropic" => {
                unused("lambda", self.lambda.is_some())?;
                unused("lo", self.lo.is_some() || self.hi.is_some())?;
                CovariateConfig::Isotropic {
                    scale: self.scale.unwrap_or(1.0),
                }
            }
            "diagonal" => {
                unused("scale", self.scale.is_some())?;
                CovariateConfig::FixedDiagonal {
                    lambda: self
                        .lambda
                        .clone()
                        .ok_or_else(|| Error::config("covariates.kind = 'diagonal' needs covariates.lambda"))?,
                }
            }
            "decreasing" | "shrinking" | "rotated" => {
                unused("scale", self.scale.is_some())?;
                unused("lambda", self.lambda.is_some())?;
                match self.kind.as_str() {
                    "decreasing" => CovariateConfig::decreasing(d),
                    "shrinking" => CovariateConfig::shrinking(d),
                    _ => CovariateConfig::RotatedDecreasing,
                }
            }
            "meta_uniform" => {
                unused("scale", self.scale.is_some())?;
                CovariateConfig::MetaUniform {
                    lo: self.lo.unwrap_or(0.0),
                    hi: self.hi.unwrap_or(2.0),
                }
            }
            other => return Err(Error::config(format!("unknown covariates.kind '{other}'"))),
        };
        cov.validate(d)?;
        Ok(cov)
    }
}

/// Knobs of the evaluation suites and studies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Sequences per Monte-Carlo evaluation.
    pub n_eval: usize,
    /// Evaluation sequence length.
    pub eval_len: usize,
    /// Checkpoints evaluated by the suites, in order.
    pub checkpoints: Vec<PathBuf>,
    /// Curve labels for `checkpoints`; defaults to the file stems.
    pub labels: Vec<String>,
    /// Truncation study: comparison position, windows and sample size.
    pub t_eval: usize,
    pub windows: Vec<usize>,
    pub n_mc: usize,
    /// Gap study grid: the product of these three lists.
    pub gap_ns: Vec<usize>,
    pub gap_seq_lens: Vec<usize>,
    pub gap_windows: Vec<usize>,
    pub trials: usize,
    pub n_pop: usize,
    /// Sequences per group-classification estimate in the flipped suite.
    pub flipped_eval: usize,
    /// Certificate: input bound, trials and prompt length.
    pub b_h: f64,
    pub certify_trials: usize,
    pub certify_len: usize,
    /// Prompt length of the finite-difference check.
    pub gradcheck_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_eval: 2000,
            eval_len: 100,
            checkpoints: Vec::new(),
            labels: Vec::new(),
            t_eval: 200,
            windows: vec![5, 10, 20, 40, 80],
            n_mc: 20_000,
            gap_ns: vec![8, 16, 32, 64, 128],
            gap_seq_lens: vec![20],
            gap_windows: vec![20],
            trials: 1,
            n_pop: 2000,
            flipped_eval: 500,
            b_h: 3.0,
            certify_trials: 1000,
            certify_len: 20,
            gradcheck_len: 6,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    seed: u64,
    out_dir: Option<PathBuf>,
    prior: PriorSection,
    covariates: CovariateSection,
    model: toml::Table,
    train: TrainConfig,
    experiment: ExperimentConfig,
}

/// A fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip)]
    pub out_dir: PathBuf,
    pub prior: PriorConfig,
    pub covariates: CovariateConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config("", &[]).expect("defaults are valid")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    Error::Config {
        msg: e.message().to_string(),
        line: e.span().map(|s| line_of(text, s.start)),
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies one `section.key=value` override.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override '{spec}' has an empty key")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override '{spec}': '{k}' is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Parses config text and applies overrides; empty text yields all defaults.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    // Deserializing the text itself first keeps line numbers in errors.
    let _: RawConfig = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    let mut table: toml::Table = text.parse().map_err(|e| toml_error(text, e))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let raw: RawConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
    resolve(raw)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

fn resolve(raw: RawConfig) -> Result<RunConfig> {
    let p = raw.prior;
    let prior = PriorConfig {
        d: p.d,
        tau_shape: p.tau_shape,
        tau_rate: p.tau_rate,
        w_bar: p.w_bar.unwrap_or_else(|| vec![1.0; p.d]),
    };
    prior.validate()?;
    let covariates = raw.covariates.resolve(prior.d)?;

    let mut model_table = raw.model;
    if !model_table.contains_key("d_in") {
        model_table.insert("d_in".into(), toml::Value::Integer(prior.d as i64));
    }
    let model: ModelConfig = model_table
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(format!("[model] {}", e.message())))?;
    model.validate()?;
    if model.d_in != prior.d {
        return Err(Error::config(format!(
            "model.d_in = {} does not match prior.d = {}",
            model.d_in, prior.d
        )));
    }
    raw.train.validate()?;
    let e = &raw.experiment;
    if e.n_eval == 0 || e.eval_len == 0 || e.n_mc == 0 || e.n_pop == 0 || e.trials == 0 || e.flipped_eval == 0 {
        return Err(Error::config("experiment sample sizes and lengths must be at least 1"));
    }
    if !(e.b_h > 0.0) {
        return Err(Error::config("experiment.b_h must be > 0"));
    }
    if !e.labels.is_empty() && e.labels.len() != e.checkpoints.len() {
        return Err(Error::config("experiment.labels must match experiment.checkpoints in length"));
    }
    Ok(RunConfig {
        seed: raw.seed,
        out_dir: raw.out_dir.unwrap_or_else(|| PathBuf::from("runs")),
        prior,
        covariates,
        model,
        train: raw.train,
        experiment: raw.experiment,
    })
}

impl RunConfig {
    /// SHA-256 of the canonical (sorted-key) JSON form. The output directory
    /// does not take part.
    pub fn hash(&self) -> [u8; 32] {
        let value = serde_json::to_value(self).expect("config serializes");
        Sha256::digest(value.to_string().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    /// Training tasks: a frozen pool of `train.pool_size` draws, or fresh
    /// prior draws when the pool size is 0.
    pub fn task_source(&self) -> Result<TaskSource> {
        Ok(match self.train.pool_size {
            0 => TaskSource::Prior(self.prior.clone()),
            n => TaskSource::Pool(build_pool(&self.prior, n, &SeedStream::new(self.seed))?),
        })
    }

    pub fn train_setup(&self) -> Result<TrainSetup> {
        Ok(TrainSetup {
            model: self.model.clone(),
            train: self.train.clone(),
            tasks: self.task_source()?,
            covariates: self.covariates.clone(),
            seed: self.seed,
            config_hash: self.hash(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = parse_config("", &[]).unwrap();
        assert_eq!(c.prior, PriorConfig::in_distribution(8));
        assert_eq!(c.train.batch, 64);
        assert_eq!(c.model.d_in, 8);
        assert_eq!(c.covariates, CovariateConfig::Isotropic { scale: 1.0 });
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_config("seed = 1\n[train]\nbatch = 4\nbatchsize = 3\n", &[]).unwrap_err();
        match err {
            Error::Config { line, msg } => {
                assert_eq!(line, Some(4), "{msg}");
                assert!(msg.contains("batchsize"), "{msg}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn overrides_and_hash() {
        let a = parse_config("[prior]\nd = 4\n", &[]).unwrap();
        let b = parse_config("", &["prior.d=4".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.model.d_in, 4);
        let c = parse_config("", &["prior.d=4".into(), "train.lr=0.01".into()]).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert!(parse_config("", &["prior.tau_shape=0.5".into()]).is_err());
        assert!(parse_config("", &["nonsense".into()]).is_err());
    }
}
