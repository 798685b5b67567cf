//! Config files: flat `key = value` text resolved into a full run
//! description with every default materialized.
//!
//! Keys follow the hyperparameter-table naming (`num-layers`,
//! `hidden-size`, `learning-rate`, ...) plus artifact keys for the norm
//! strategy, task, and precision. Unknown keys are rejected with the
//! nearest valid key suggested.

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::kv;
use crate::model::{Arch, ModelConfig};
use crate::norms::{NormKind, NormStrategy, DEFAULT_LN_EPS};
use crate::train::{DecayStyle, TrainConfig};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const KNOWN_KEYS: &[&str] = &[
    "arch",
    "num-layers",
    "hidden-size",
    "num-attention-heads",
    "seq-length",
    "vocab-size",
    "ffn-ratio",
    "tie-lm-head",
    "norm-strategy",
    "alpha-override",
    "beta",
    "ln-eps",
    "steps",
    "batch-size",
    "learning-rate",
    "min-learning-rate",
    "lr-decay-style",
    "lr-warmup-fraction",
    "weight-decay",
    "grad-clip",
    "seed",
    "log-every",
    "checkpoint-every",
    "task",
    "data-path",
    "copy-vocab",
    "mask-rate",
    "precision",
    "num-parameters",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!(
                "unknown precision `{other}`; valid: f32, f64"
            ))),
        }
    }
}

/// A complete, validated run description.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskKind,
    pub data_path: Option<PathBuf>,
    pub copy_vocab: usize,
    pub mask_rate: f64,
    pub precision: Precision,
    /// Optional published parameter count to compare against.
    pub param_reference: Option<f64>,
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn nearest_key(key: &str) -> &'static str {
    KNOWN_KEYS
        .iter()
        .min_by_key(|k| edit_distance(key, k))
        .copied()
        .unwrap_or("arch")
}

/// Parses a number like `52M`, `815.5M`, or a plain integer.
fn parse_param_reference(s: &str) -> Result<f64> {
    let (num, scale) = match s.strip_suffix(['M', 'm']) {
        Some(rest) => (rest, 1e6),
        None => (s, 1.0),
    };
    num.trim()
        .parse::<f64>()
        .map(|v| v * scale)
        .map_err(|e| Error::config(format!("num-parameters: {e}")))
}

pub fn read_config_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let pairs = kv::parse_kv(&text)?;
    for (k, _) in &pairs {
        if !KNOWN_KEYS.contains(&k.as_str()) && !k.starts_with("state.") {
            return Err(Error::config(format!(
                "unknown config key `{k}` (nearest valid key: `{}`)",
                nearest_key(k)
            )));
        }
    }
    Ok(pairs)
}

/// Materializes a [`RunSpec`] from parsed pairs, filling defaults for
/// absent keys.
pub fn resolve(pairs: &[(String, String)]) -> Result<RunSpec> {
    fn lookup<V: FromStr>(pairs: &[(String, String)], key: &str, default: V) -> Result<V>
    where
        V::Err: fmt::Display,
    {
        match kv::get(pairs, key) {
            Some(raw) => raw
                .parse::<V>()
                .map_err(|e| Error::config(format!("{key}: {e}"))),
            None => Ok(default),
        }
    }

    let arch: Arch = lookup(pairs, "arch", Arch::Gpt)?;
    let num_layers: usize = lookup(pairs, "num-layers", 2)?;
    let kind: NormKind = lookup(pairs, "norm-strategy", NormKind::PostLn)?;
    let alpha_override: Option<f64> = match kv::get(pairs, "alpha-override") {
        Some(raw) => Some(
            raw.parse::<f64>()
                .map_err(|e| Error::config(format!("alpha-override: {e}")))?,
        ),
        None => None,
    };
    let beta: Option<f64> = match kv::get(pairs, "beta") {
        Some(raw) => Some(
            raw.parse::<f64>()
                .map_err(|e| Error::config(format!("beta: {e}")))?,
        ),
        None => None,
    };
    let arch_role = match arch {
        Arch::Bert => crate::norms::ArchRole::EncoderOnly,
        Arch::Gpt => crate::norms::ArchRole::DecoderOnly,
    };
    let norm = NormStrategy::with_overrides(kind, arch_role, num_layers.max(1), None, alpha_override, beta)?;

    let model = ModelConfig {
        arch,
        num_layers,
        hidden_size: lookup(pairs, "hidden-size", 32)?,
        num_heads: lookup(pairs, "num-attention-heads", 2)?,
        seq_length: lookup(pairs, "seq-length", 64)?,
        vocab_size: lookup(pairs, "vocab-size", crate::data::VOCAB_SIZE)?,
        ffn_ratio: lookup(pairs, "ffn-ratio", 4)?,
        tie_lm_head: lookup(pairs, "tie-lm-head", matches!(arch, Arch::Bert))?,
        norm,
        ln_eps: lookup(pairs, "ln-eps", DEFAULT_LN_EPS)?,
    };
    model.validate()?;

    let grad_clip = match kv::get(pairs, "grad-clip") {
        None => None,
        Some("none") => None,
        Some(raw) => Some(
            raw.parse::<f64>()
                .map_err(|e| Error::config(format!("grad-clip: {e}")))?,
        ),
    };
    let train = TrainConfig {
        steps: lookup(pairs, "steps", 100)?,
        batch_size: lookup(pairs, "batch-size", 8)?,
        lr: lookup(pairs, "learning-rate", 1e-3)?,
        min_lr: lookup(pairs, "min-learning-rate", 0.0)?,
        decay_style: lookup(pairs, "lr-decay-style", DecayStyle::Cosine)?,
        warmup_fraction: lookup(pairs, "lr-warmup-fraction", 0.01)?,
        weight_decay: lookup(pairs, "weight-decay", 0.0)?,
        grad_clip,
        seed: lookup(pairs, "seed", 0)?,
        log_every: lookup(pairs, "log-every", 10)?,
        checkpoint_every: lookup(pairs, "checkpoint-every", 0)?,
        ..TrainConfig::default()
    };
    train.validate()?;

    let task: TaskKind = lookup(pairs, "task", TaskKind::Copy)?;
    let data_path = kv::get(pairs, "data-path").map(PathBuf::from);
    let param_reference = match kv::get(pairs, "num-parameters") {
        Some(raw) => Some(parse_param_reference(raw)?),
        None => None,
    };

    Ok(RunSpec {
        model,
        train,
        task,
        data_path,
        copy_vocab: lookup(pairs, "copy-vocab", 16)?,
        mask_rate: lookup(pairs, "mask-rate", 0.15)?,
        precision: lookup(pairs, "precision", Precision::F64)?,
        param_reference,
    })
}

impl RunSpec {
    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self> {
        resolve(&read_config_file(path)?)
    }

    /// Extra constraints that only matter when the spec actually drives
    /// training or evaluation (as opposed to parameter counting).
    pub fn validate_for_training(&self) -> Result<()> {
        if self.model.vocab_size < crate::data::VOCAB_SIZE {
            return Err(Error::config(format!(
                "training needs vocab-size >= {} (the byte vocabulary), got {}",
                crate::data::VOCAB_SIZE,
                self.model.vocab_size
            )));
        }
        match (self.task, self.model.arch) {
            (TaskKind::Mlm, Arch::Bert) | (TaskKind::Copy, Arch::Gpt) | (TaskKind::CharLm, Arch::Gpt) => {}
            (task, arch) => {
                return Err(Error::config(format!(
                    "task `{task}` does not fit arch `{arch}`: mlm needs bert, copy/char-lm need gpt"
                )));
            }
        }
        if matches!(self.task, TaskKind::CharLm | TaskKind::Mlm) && self.data_path.is_none() {
            return Err(Error::config(format!(
                "task `{}` requires data-path",
                self.task
            )));
        }
        if self.task == TaskKind::Copy {
            if self.model.seq_length % 2 != 0 || self.model.seq_length < 4 {
                return Err(Error::config(
                    "the copy task needs an even seq-length >= 4",
                ));
            }
            if !(2..=256).contains(&self.copy_vocab) {
                return Err(Error::config("copy-vocab must lie in [2, 256]"));
            }
        }
        Ok(())
    }

    /// Batch source matching the task description.
    pub fn source_spec(&self) -> Result<crate::data::SourceSpec> {
        Ok(match self.task {
            TaskKind::Copy => crate::data::SourceSpec::Copy {
                v_effective: self.copy_vocab,
            },
            TaskKind::CharLm | TaskKind::Mlm => crate::data::SourceSpec::Corpus {
                path: self
                    .data_path
                    .clone()
                    .ok_or_else(|| Error::config("data-path is required for corpus tasks"))?,
                task: self.task,
                mask_rate: self.mask_rate,
            },
        })
    }

    /// Every key materialized, in a stable order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut pairs = self.model.to_kv();
        let t = &self.train;
        pairs.extend([
            ("steps".to_string(), t.steps.to_string()),
            ("batch-size".to_string(), t.batch_size.to_string()),
            ("learning-rate".to_string(), format!("{}", t.lr)),
            ("min-learning-rate".to_string(), format!("{}", t.min_lr)),
            ("lr-decay-style".to_string(), t.decay_style.to_string()),
            ("lr-warmup-fraction".to_string(), format!("{}", t.warmup_fraction)),
            ("weight-decay".to_string(), format!("{}", t.weight_decay)),
            (
                "grad-clip".to_string(),
                t.grad_clip.map_or("none".to_string(), |c| format!("{c}")),
            ),
            ("seed".to_string(), t.seed.to_string()),
            ("log-every".to_string(), t.log_every.to_string()),
            ("checkpoint-every".to_string(), t.checkpoint_every.to_string()),
            ("task".to_string(), self.task.to_string()),
            ("copy-vocab".to_string(), self.copy_vocab.to_string()),
            ("mask-rate".to_string(), format!("{}", self.mask_rate)),
            ("precision".to_string(), self.precision.to_string()),
        ]);
        if let Some(p) = &self.data_path {
            pairs.push(("data-path".to_string(), p.display().to_string()));
        }
        pairs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_materialize_into_a_valid_spec() {
        let spec = resolve(&[]).unwrap();
        assert_eq!(spec.model.arch, Arch::Gpt);
        assert_eq!(spec.model.norm.kind, NormKind::PostLn);
        assert_eq!(spec.model.norm.alpha, 1.0);
        assert_eq!(spec.precision, Precision::F64);
        spec.validate_for_training().unwrap();
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        std::fs::write(&p, "hidden-sise = 64\n").unwrap();
        let err = read_config_file(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("hidden-sise"), "{msg}");
        assert!(msg.contains("hidden-size"), "{msg}");
    }

    #[test]
    fn nan_learning_rate_is_a_config_error() {
        let pairs = vec![("learning-rate".to_string(), "NaN".to_string())];
        let err = resolve(&pairs).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn strategy_alpha_resolves_from_depth() {
        let pairs = vec![
            ("arch".to_string(), "bert".to_string()),
            ("task".to_string(), "mlm".to_string()),
            ("num-layers".to_string(), "8".to_string()),
            ("norm-strategy".to_string(), "upscale".to_string()),
        ];
        let spec = resolve(&pairs).unwrap();
        assert_eq!(spec.model.norm.alpha, 2.0); // (2*8)^(1/4)
        assert!(spec.model.tie_lm_head, "bert defaults to a tied head");
    }

    #[test]
    fn round_trip_through_kv_is_stable() {
        let pairs = vec![
            ("arch".to_string(), "gpt".to_string()),
            ("num-layers".to_string(), "4".to_string()),
            ("norm-strategy".to_string(), "foundation".to_string()),
            ("learning-rate".to_string(), "0.0003".to_string()),
        ];
        let spec = resolve(&pairs).unwrap();
        let spec2 = resolve(&spec.to_kv()).unwrap();
        assert_eq!(spec.model, spec2.model);
        assert_eq!(spec.train, spec2.train);
        assert_eq!(spec.model.norm.alpha, crate::norms::FOUNDATION_ALPHA);
    }

    #[test]
    fn param_reference_accepts_m_suffix() {
        assert_eq!(parse_param_reference("52M").unwrap(), 52e6);
        assert_eq!(parse_param_reference("815.5M").unwrap(), 815.5e6);
        assert_eq!(parse_param_reference("12345").unwrap(), 12345.0);
        assert!(parse_param_reference("fifty").is_err());
    }

    #[test]
    fn task_arch_pairing_is_enforced() {
        let pairs = vec![
            ("arch".to_string(), "bert".to_string()),
            ("task".to_string(), "copy".to_string()),
        ];
        let spec = resolve(&pairs).unwrap();
        assert!(spec.validate_for_training().is_err());
    }
}
