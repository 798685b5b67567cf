//! Independent scalar re-implementation of the micro-model forward pass.
//!
//! Everything here is straight-line loops over `Vec<f64>` with no use of the
//! graph engine, so agreement with `Model::forward` checks the whole op
//! stack (embeddings, attention, GELU FFN, residual normalization, LN, tied
//! and untied heads) against a second, independently written path.

use depthlab::data::{Batch, IGNORE_INDEX};
use depthlab::gradcheck::check_model_gradients;
use depthlab::model::{Arch, Model, ModelConfig};
use depthlab::norms::{NormKind, NormStrategy, ArchRole, DEFAULT_LN_EPS};
use depthlab::{Graph, Tensor};
#[allow(unused_imports)]
use depthlab::Var;

fn get<'m>(model: &'m Model<f64>, name: &str) -> &'m Tensor<f64> {
    &model
        .params
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .tensor
}

fn matvec(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows);
    let mut out = b.data().to_vec();
    assert_eq!(out.len(), cols);
    for (h, &xv) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xv * w.data()[h * cols + j];
        }
    }
    out
}

fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let h = x.len() as f64;
    let mean = x.iter().sum::<f64>() / h;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| g * (v - mean) * inv + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Hand-executed forward for a single-head, single-sequence micro model.
fn scalar_forward(model: &Model<f64>, ids: &[u32]) -> Vec<f64> {
    let cfg = &model.config;
    assert_eq!(cfg.num_heads, 1, "oracle is single-head");
    let h = cfg.hidden_size;
    let s = ids.len();
    let causal = matches!(cfg.arch, Arch::Gpt);
    let alpha = cfg.norm.alpha;
    let post_style = cfg.norm.kind != NormKind::PreLn;
    let eps = cfg.ln_eps;

    let tok = get(model, "tok_emb");
    let pos = get(model, "pos_emb");
    let mut x: Vec<Vec<f64>> = (0..s)
        .map(|t| {
            let id = ids[t] as usize;
            (0..h)
                .map(|j| tok.data()[id * h + j] + pos.data()[t * h + j])
                .collect()
        })
        .collect();

    for layer in 0..cfg.num_layers {
        let p = |suffix: &str| get(model, &format!("block{layer}.{suffix}"));
        let ln1g = p("ln1.gamma").data().to_vec();
        let ln1b = p("ln1.beta").data().to_vec();
        let ln2g = p("ln2.gamma").data().to_vec();
        let ln2b = p("ln2.beta").data().to_vec();

        let attn_input: Vec<Vec<f64>> = if post_style {
            x.clone()
        } else {
            x.iter().map(|row| layer_norm_row(row, &ln1g, &ln1b, eps)).collect()
        };
        let q: Vec<Vec<f64>> = attn_input
            .iter()
            .map(|r| matvec(r, p("attn.wq"), p("attn.bq")))
            .collect();
        let k: Vec<Vec<f64>> = attn_input
            .iter()
            .map(|r| matvec(r, p("attn.wk"), p("attn.bk")))
            .collect();
        let v: Vec<Vec<f64>> = attn_input
            .iter()
            .map(|r| matvec(r, p("attn.wv"), p("attn.bv")))
            .collect();
        let scale = 1.0 / (h as f64).sqrt();
        let mut attn_out: Vec<Vec<f64>> = Vec::with_capacity(s);
        for i in 0..s {
            let jmax = if causal { i + 1 } else { s };
            let scores: Vec<f64> = (0..jmax)
                .map(|j| scale * q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let mut mixed = vec![0.0; h];
            for (j, e) in exps.iter().enumerate() {
                let w = e / denom;
                for (m, vv) in mixed.iter_mut().zip(&v[j]) {
                    *m += w * vv;
                }
            }
            attn_out.push(matvec(&mixed, p("attn.wo"), p("attn.bo")));
        }

        let after_attn: Vec<Vec<f64>> = if post_style {
            (0..s)
                .map(|t| {
                    let combined: Vec<f64> = x[t]
                        .iter()
                        .zip(&attn_out[t])
                        .map(|(xv, av)| alpha * xv + av)
                        .collect();
                    layer_norm_row(&combined, &ln1g, &ln1b, eps)
                })
                .collect()
        } else {
            (0..s)
                .map(|t| x[t].iter().zip(&attn_out[t]).map(|(a, b)| a + b).collect())
                .collect()
        };

        let ffn_input: Vec<Vec<f64>> = if post_style {
            after_attn.clone()
        } else {
            after_attn
                .iter()
                .map(|row| layer_norm_row(row, &ln2g, &ln2b, eps))
                .collect()
        };
        let ffn_out: Vec<Vec<f64>> = ffn_input
            .iter()
            .map(|r| {
                let inner: Vec<f64> = matvec(r, p("ffn.w1"), p("ffn.b1"))
                    .into_iter()
                    .map(gelu)
                    .collect();
                matvec(&inner, p("ffn.w2"), p("ffn.b2"))
            })
            .collect();

        x = if post_style {
            (0..s)
                .map(|t| {
                    let combined: Vec<f64> = after_attn[t]
                        .iter()
                        .zip(&ffn_out[t])
                        .map(|(xv, fv)| alpha * xv + fv)
                        .collect();
                    layer_norm_row(&combined, &ln2g, &ln2b, eps)
                })
                .collect()
        } else {
            (0..s)
                .map(|t| after_attn[t].iter().zip(&ffn_out[t]).map(|(a, b)| a + b).collect())
                .collect()
        };
    }

    let fg = get(model, "final_ln.gamma").data().to_vec();
    let fb = get(model, "final_ln.beta").data().to_vec();
    let head_b = get(model, "head.b").data();
    let vsize = cfg.vocab_size;
    let mut logits = Vec::with_capacity(s * vsize);
    for t in 0..s {
        let w = layer_norm_row(&x[t], &fg, &fb, eps);
        if cfg.tie_lm_head {
            let tokd = get(model, "tok_emb").data();
            for c in 0..vsize {
                let dot: f64 = w.iter().enumerate().map(|(j, wv)| wv * tokd[c * h + j]).sum();
                logits.push(dot + head_b[c]);
            }
        } else {
            let row = matvec(&w, get(model, "head.w"), get(model, "head.b"));
            logits.extend(row);
        }
    }
    logits
}

fn micro_config(arch: Arch, kind: NormKind, tie: bool) -> ModelConfig {
    let role = match arch {
        Arch::Bert => ArchRole::EncoderOnly,
        Arch::Gpt => ArchRole::DecoderOnly,
    };
    ModelConfig {
        arch,
        num_layers: 1,
        hidden_size: 4,
        num_heads: 1,
        seq_length: 4,
        vocab_size: 8,
        ffn_ratio: 4,
        tie_lm_head: tie,
        norm: NormStrategy::new(kind, role, 1, None).unwrap(),
        ln_eps: DEFAULT_LN_EPS,
    }
}

#[test]
fn gpt_micro_model_matches_hand_trace() {
    for kind in [NormKind::UpscaleLn, NormKind::FoundationLn, NormKind::PreLn] {
        let cfg = micro_config(Arch::Gpt, kind, false);
        let model = Model::<f64>::build(cfg, 11).unwrap();
        let ids = [3u32, 0, 5, 1];
        let mut g = Graph::new();
        let trace = model.forward(&mut g, &ids, 1).unwrap();
        let got = g.value(trace.logits);
        let want = scalar_forward(&model, &ids);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{kind}: {a} vs {b}");
        }
    }
}

#[test]
fn bert_micro_model_matches_hand_trace() {
    for (kind, tie) in [(NormKind::PostLn, true), (NormKind::UpscaleLn, true), (NormKind::PreLn, false)] {
        let cfg = micro_config(Arch::Bert, kind, tie);
        let model = Model::<f64>::build(cfg, 13).unwrap();
        let ids = [7u32, 2, 2, 4];
        let mut g = Graph::new();
        let trace = model.forward(&mut g, &ids, 1).unwrap();
        let got = g.value(trace.logits);
        let want = scalar_forward(&model, &ids);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{kind}: {a} vs {b}");
        }
    }
}

/// Two-layer micro model (N=2, H=8, V=16, S=8): loss gradients agree with
/// central differences below 1e-4 for every strategy and both architectures.
#[test]
fn micro_model_gradients_match_finite_differences_for_every_strategy() {
    for arch in [Arch::Gpt, Arch::Bert] {
        for kind in NormKind::ALL {
            let role = match arch {
                Arch::Bert => ArchRole::EncoderOnly,
                Arch::Gpt => ArchRole::DecoderOnly,
            };
            let cfg = ModelConfig {
                arch,
                num_layers: 2,
                hidden_size: 8,
                num_heads: 2,
                seq_length: 8,
                vocab_size: 16,
                ffn_ratio: 4,
                tie_lm_head: matches!(arch, Arch::Bert),
                norm: NormStrategy::new(kind, role, 2, None).unwrap(),
                ln_eps: DEFAULT_LN_EPS,
            };
            let mut model = Model::<f64>::build(cfg, 21).unwrap();
            model.randomize_for_probe(21);
            let batch = Batch {
                batch: 2,
                seq: 8,
                input_ids: vec![1, 5, 9, 13, 2, 6, 10, 14, 3, 7, 11, 15, 0, 4, 8, 12],
                targets: vec![5, 9, 13, 2, 6, 10, 14, IGNORE_INDEX, 7, 11, 15, 0, 4, 8, 12, IGNORE_INDEX],
            };
            let report = check_model_gradients(&model, &batch, 1e-5).unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "{arch:?}/{kind}: max rel err {}",
                report.max_rel_error
            );
            assert!(
                report.max_inert_grad < 1e-12,
                "{arch:?}/{kind}: key-bias grad {}",
                report.max_inert_grad
            );
        }
    }
}
