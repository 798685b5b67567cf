//! Toy-scale transformer assembly: a BERT-style bidirectional encoder with an
//! MLM head and a GPT-style causal decoder with an LM head, both built from
//! graph ops and wired through a configurable residual-normalization
//! strategy. Also the closed-form parameter and training-FLOP counters.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::norms::{residual_combine, NormKind, NormStrategy};
use crate::params::{ParamRole, ParamStore};
use crate::tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

/// Weight initialization: Normal(0, INIT_STD); biases zero; LN gain 1, shift 0.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Bert,
    Gpt,
}

impl Arch {
    pub fn config_name(self) -> &'static str {
        match self {
            Arch::Bert => "bert",
            Arch::Gpt => "gpt",
        }
    }

    pub fn causal(self) -> bool {
        matches!(self, Arch::Gpt)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.config_name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bert" => Ok(Arch::Bert),
            "gpt" => Ok(Arch::Gpt),
            other => Err(Error::config(format!(
                "unknown arch `{other}`; valid: bert, gpt"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub seq_length: usize,
    pub vocab_size: usize,
    pub ffn_ratio: usize,
    pub tie_lm_head: bool,
    pub norm: NormStrategy,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::config("num-layers must be >= 1"));
        }
        if self.hidden_size < 1 || self.num_heads < 1 {
            return Err(Error::config("hidden-size and num-attention-heads must be >= 1"));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden-size {} is not divisible by num-attention-heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.seq_length < 1 || self.vocab_size < 1 {
            return Err(Error::config("seq-length and vocab-size must be >= 1"));
        }
        if self.ffn_ratio < 1 {
            return Err(Error::config("ffn-ratio must be >= 1"));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::config("ln-eps must be >= 0"));
        }
        let role_ok = match self.arch {
            Arch::Bert => matches!(self.norm.arch_role, crate::norms::ArchRole::EncoderOnly),
            Arch::Gpt => matches!(self.norm.arch_role, crate::norms::ArchRole::DecoderOnly),
        };
        if !role_ok {
            return Err(Error::config(format!(
                "arch {} does not match the strategy arch role {:?}",
                self.arch, self.norm.arch_role
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    fn arch_role(arch: Arch) -> crate::norms::ArchRole {
        match arch {
            Arch::Bert => crate::norms::ArchRole::EncoderOnly,
            Arch::Gpt => crate::norms::ArchRole::DecoderOnly,
        }
    }

    /// Fully materialized key=value form; `alpha-override` carries the
    /// resolved alpha so a reload rebuilds the strategy bit-exactly.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("arch".into(), self.arch.to_string()),
            ("num-layers".into(), self.num_layers.to_string()),
            ("hidden-size".into(), self.hidden_size.to_string()),
            ("num-attention-heads".into(), self.num_heads.to_string()),
            ("seq-length".into(), self.seq_length.to_string()),
            ("vocab-size".into(), self.vocab_size.to_string()),
            ("ffn-ratio".into(), self.ffn_ratio.to_string()),
            ("tie-lm-head".into(), self.tie_lm_head.to_string()),
            ("norm-strategy".into(), self.norm.kind.to_string()),
            ("alpha-override".into(), format!("{}", self.norm.alpha)),
            ("beta".into(), format!("{}", self.norm.beta)),
            ("ln-eps".into(), format!("{}", self.ln_eps)),
        ]
    }

    /// Rebuilds a config from the pairs written by [`ModelConfig::to_kv`].
    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        fn req<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
            crate::kv::get(pairs, key)
                .ok_or_else(|| Error::config(format!("missing model config key `{key}`")))
        }
        fn num<V: FromStr>(pairs: &[(String, String)], key: &str) -> Result<V>
        where
            V::Err: fmt::Display,
        {
            req(pairs, key)?
                .parse::<V>()
                .map_err(|e| Error::config(format!("{key}: {e}")))
        }
        let arch: Arch = req(pairs, "arch")?.parse()?;
        let num_layers: usize = num(pairs, "num-layers")?;
        let kind: NormKind = req(pairs, "norm-strategy")?.parse()?;
        let alpha: f64 = num(pairs, "alpha-override")?;
        let beta: f64 = num(pairs, "beta")?;
        let norm = NormStrategy::with_overrides(
            kind,
            Self::arch_role(arch),
            num_layers,
            None,
            Some(alpha),
            Some(beta),
        )?;
        let cfg = ModelConfig {
            arch,
            num_layers,
            hidden_size: num(pairs, "hidden-size")?,
            num_heads: num(pairs, "num-attention-heads")?,
            seq_length: num(pairs, "seq-length")?,
            vocab_size: num(pairs, "vocab-size")?,
            ffn_ratio: num(pairs, "ffn-ratio")?,
            tie_lm_head: num(pairs, "tie-lm-head")?,
            norm,
            ln_eps: num(pairs, "ln-eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Closed-form parameter count for a config:
/// token and position embeddings, per block the four attention projections
/// with bias, the two FFN matrices with bias, and two LN pairs, then the
/// final LN and the LM head (full matrix plus bias when untied, bias only
/// when the head reuses the token embedding).
pub fn count_params(config: &ModelConfig) -> Result<u64> {
    config.validate()?;
    let h = config.hidden_size as u64;
    let v = config.vocab_size as u64;
    let s = config.seq_length as u64;
    let n = config.num_layers as u64;
    let r = config.ffn_ratio as u64;
    let attn = 4 * (h * h + h);
    let ffn = h * (r * h) + r * h + (r * h) * h + h;
    let ln = 2 * 2 * h;
    let per_layer = attn + ffn + ln;
    let head = if config.tie_lm_head { v } else { v * h + v };
    Ok(v * h + s * h + n * per_layer + 2 * h + head)
}

/// Standard training-compute approximation: 6 * parameters * tokens.
pub fn estimate_flops(config: &ModelConfig, total_tokens: u64) -> Result<f64> {
    Ok(6.0 * count_params(config)? as f64 * total_tokens as f64)
}

/// Number of parameter tensors per block; must match `layer_specs`.
const LAYER_STRIDE: usize = 16;

/// Per-layer parameter tensor names, shapes, and roles, in binding order.
fn layer_specs(cfg: &ModelConfig, i: usize) -> Vec<(String, Vec<usize>, ParamRole)> {
    let h = cfg.hidden_size;
    let f = cfg.ffn_ratio * h;
    vec![
        (format!("block{i}.attn.wq"), vec![h, h], ParamRole::AttnQuery),
        (format!("block{i}.attn.bq"), vec![h], ParamRole::Bias),
        (format!("block{i}.attn.wk"), vec![h, h], ParamRole::AttnKey),
        (format!("block{i}.attn.bk"), vec![h], ParamRole::AttnKeyBias),
        (format!("block{i}.attn.wv"), vec![h, h], ParamRole::AttnValue),
        (format!("block{i}.attn.bv"), vec![h], ParamRole::Bias),
        (format!("block{i}.attn.wo"), vec![h, h], ParamRole::AttnOutput),
        (format!("block{i}.attn.bo"), vec![h], ParamRole::Bias),
        (format!("block{i}.ln1.gamma"), vec![h], ParamRole::LnGamma),
        (format!("block{i}.ln1.beta"), vec![h], ParamRole::LnBeta),
        (format!("block{i}.ffn.w1"), vec![h, f], ParamRole::FfnIn),
        (format!("block{i}.ffn.b1"), vec![f], ParamRole::Bias),
        (format!("block{i}.ffn.w2"), vec![f, h], ParamRole::FfnOut),
        (format!("block{i}.ffn.b2"), vec![h], ParamRole::Bias),
        (format!("block{i}.ln2.gamma"), vec![h], ParamRole::LnGamma),
        (format!("block{i}.ln2.beta"), vec![h], ParamRole::LnBeta),
    ]
}

/// Result of one forward pass: the logits node, the residual-stream output
/// of every block (for diagnostics), and the leaf bound to each parameter
/// in store order (for gradient extraction).
#[derive(Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    pub block_outputs: Vec<Var>,
    pub bound: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f64> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub seed: u64,
}

impl<T: Real> Model<T> {
    /// Deterministic build: same (config, seed) gives bitwise identical
    /// parameters. Beta scaling is applied here, once.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden_size;
        let v = config.vocab_size;

        let init = |shape: Vec<usize>, role: ParamRole, rng: &mut ChaCha8Rng| -> Tensor<T> {
            match role {
                ParamRole::Bias | ParamRole::AttnKeyBias | ParamRole::LnBeta => Tensor::zeros(shape),
                ParamRole::LnGamma => Tensor::full(shape, T::one()),
                _ => Tensor::randn(shape, INIT_STD, rng),
            }
        };

        params.insert(
            "tok_emb",
            None,
            ParamRole::TokenEmbedding,
            init(vec![v, h], ParamRole::TokenEmbedding, &mut rng),
        );
        params.insert(
            "pos_emb",
            None,
            ParamRole::PositionEmbedding,
            init(vec![config.seq_length, h], ParamRole::PositionEmbedding, &mut rng),
        );
        for i in 0..config.num_layers {
            for (name, shape, role) in layer_specs(&config, i) {
                params.insert(name, Some(i), role, init(shape, role, &mut rng));
            }
        }
        params.insert(
            "final_ln.gamma",
            None,
            ParamRole::LnGamma,
            init(vec![h], ParamRole::LnGamma, &mut rng),
        );
        params.insert(
            "final_ln.beta",
            None,
            ParamRole::LnBeta,
            init(vec![h], ParamRole::LnBeta, &mut rng),
        );
        if !config.tie_lm_head {
            params.insert(
                "head.w",
                None,
                ParamRole::HeadWeight,
                init(vec![h, v], ParamRole::HeadWeight, &mut rng),
            );
        }
        params.insert(
            "head.b",
            None,
            ParamRole::Bias,
            init(vec![v], ParamRole::Bias, &mut rng),
        );

        crate::norms::apply_beta_scaling(&mut params, &config.norm)?;
        Ok(Model { config, params, seed })
    }

    /// Re-draws every parameter at O(1) scale, deterministically. Gradient
    /// checking needs this: at the tiny training-time init scale the
    /// query/key gradients are quadratically small and central differences
    /// drown in rounding noise, so correctness is probed at a generic
    /// well-conditioned point instead.
    pub fn randomize_for_probe(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E3779B97F4A7C15);
        for entry in self.params.entries_mut() {
            let shape = entry.tensor.shape().to_vec();
            let t: Tensor<T> = match entry.role {
                ParamRole::LnGamma => {
                    let mut t = Tensor::randn(shape, 0.2, &mut rng);
                    t.data_mut().iter_mut().for_each(|v| *v = *v + T::one());
                    t
                }
                ParamRole::LnBeta | ParamRole::Bias | ParamRole::AttnKeyBias => {
                    Tensor::randn(shape, 0.2, &mut rng)
                }
                ParamRole::TokenEmbedding | ParamRole::PositionEmbedding => {
                    Tensor::randn(shape, 1.0, &mut rng)
                }
                _ => Tensor::randn(shape, 0.4, &mut rng),
            };
            entry.tensor = t.requires_grad(true);
        }
    }

    fn var(&self, bound: &[Var], name: &str) -> Var {
        let idx = self
            .params
            .entries()
            .iter()
            .position(|e| e.name == name)
            .unwrap_or_else(|| panic!("parameter {name} missing"));
        bound[idx]
    }

    /// Store index of block `i`'s first parameter. Layout: tok_emb, pos_emb,
    /// then LAYER_STRIDE entries per block in `layer_specs` order.
    fn layer_base(i: usize) -> usize {
        2 + i * LAYER_STRIDE
    }

    /// Forward pass over `batch` rows of `seq` token ids each
    /// (`ids.len() == batch * seq`). Attention is causal for GPT,
    /// bidirectional for BERT. Returns logits of shape `[batch*seq, vocab]`.
    pub fn forward(&self, g: &mut Graph<T>, ids: &[u32], batch: usize) -> Result<ForwardTrace> {
        let bound = self.params.bind(g);
        self.forward_bound(g, bound, ids, batch)
    }

    /// Forward pass over externally created parameter leaves (`bound` must
    /// parallel the store). Gradient checking uses this to probe the exact
    /// training path with perturbed parameter values.
    pub fn forward_bound(
        &self,
        g: &mut Graph<T>,
        bound: Vec<Var>,
        ids: &[u32],
        batch: usize,
    ) -> Result<ForwardTrace> {
        if bound.len() != self.params.len() {
            return Err(Error::contract(
                "bound leaf count does not match the parameter store",
            ));
        }
        if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
            return Err(Error::contract(format!(
                "token id count {} is not divisible into {batch} rows",
                ids.len()
            )));
        }
        let seq = ids.len() / batch;
        if seq > self.config.seq_length {
            return Err(Error::config(format!(
                "sequence length {seq} exceeds the configured maximum {}",
                self.config.seq_length
            )));
        }
        let causal = self.config.arch.causal();
        let heads = self.config.num_heads;
        let eps = T::from_f64(self.config.ln_eps);
        let scale = T::from_f64(1.0 / (self.config.head_dim() as f64).sqrt());

        let tok_emb = self.var(&bound, "tok_emb");
        let pos_emb = self.var(&bound, "pos_emb");

        let tok = g.gather(tok_emb, ids)?;
        let pos_ids: Vec<u32> = (0..batch)
            .flat_map(|_| (0..seq as u32).collect::<Vec<_>>())
            .collect();
        let pos = g.gather(pos_emb, &pos_ids)?;
        let mut x = g.add(tok, pos)?;

        let mut block_outputs = Vec::with_capacity(self.config.num_layers);
        for i in 0..self.config.num_layers {
            let lb = Self::layer_base(i);
            debug_assert_eq!(self.params.entries()[lb].name, format!("block{i}.attn.wq"));
            let [wq, bq, wk, bk, wv, bv, wo, bo, ln1g, ln1b, w1, b1, w2, b2, ln2g, ln2b] =
                bound[lb..lb + LAYER_STRIDE]
                    .try_into()
                    .expect("layer parameter stride");

            let attention = |g: &mut Graph<T>, input: Var| -> Result<Var> {
                let q = g.matmul(input, wq)?;
                let q = g.add_bias(q, bq)?;
                let k = g.matmul(input, wk)?;
                let k = g.add_bias(k, bk)?;
                let v = g.matmul(input, wv)?;
                let v = g.add_bias(v, bv)?;
                let qh = g.split_heads(q, batch, seq, heads)?;
                let kh = g.split_heads(k, batch, seq, heads)?;
                let vh = g.split_heads(v, batch, seq, heads)?;
                let scores = g.attn_scores(qh, kh, scale, causal)?;
                let probs = g.softmax(scores, causal)?;
                let mixed = g.attn_mix(probs, vh, causal)?;
                let merged = g.merge_heads(mixed, batch, seq, heads)?;
                let out = g.matmul(merged, wo)?;
                g.add_bias(out, bo)
            };
            let ffn = |g: &mut Graph<T>, input: Var| -> Result<Var> {
                let a = g.matmul(input, w1)?;
                let a = g.add_bias(a, b1)?;
                let a = g.gelu(a)?;
                let b = g.matmul(a, w2)?;
                g.add_bias(b, b2)
            };

            if self.config.norm.post_style() {
                let attn_out = attention(g, x)?;
                x = residual_combine(g, x, attn_out, &self.config.norm, ln1g, ln1b, eps)?;
                let ffn_out = ffn(g, x)?;
                x = residual_combine(g, x, ffn_out, &self.config.norm, ln2g, ln2b, eps)?;
            } else {
                let normed = g.layer_norm(x, ln1g, ln1b, eps)?;
                let attn_out = attention(g, normed)?;
                x = g.add(x, attn_out)?;
                let normed = g.layer_norm(x, ln2g, ln2b, eps)?;
                let ffn_out = ffn(g, normed)?;
                x = g.add(x, ffn_out)?;
            }
            block_outputs.push(x);
        }

        let fg = self.var(&bound, "final_ln.gamma");
        let fb = self.var(&bound, "final_ln.beta");
        let x = g.layer_norm(x, fg, fb, eps)?;

        let head_b = self.var(&bound, "head.b");
        let logits = if self.config.tie_lm_head {
            g.matmul_trans_b(x, tok_emb)?
        } else {
            let head_w = self.var(&bound, "head.w");
            g.matmul(x, head_w)?
        };
        let logits = g.add_bias(logits, head_b)?;

        Ok(ForwardTrace {
            logits,
            block_outputs,
            bound,
        })
    }

    /// Forward plus mean cross-entropy against `targets`
    /// (`crate::data::IGNORE_INDEX` marks positions excluded from the loss).
    pub fn forward_loss(
        &self,
        g: &mut Graph<T>,
        ids: &[u32],
        targets: &[i64],
        batch: usize,
    ) -> Result<(ForwardTrace, Var)> {
        let trace = self.forward(g, ids, batch)?;
        let loss = g.cross_entropy(trace.logits, targets, crate::data::IGNORE_INDEX)?;
        Ok((trace, loss))
    }
}
