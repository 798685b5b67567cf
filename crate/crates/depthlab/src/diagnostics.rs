//! Stability measurement: per-layer activation/gradient statistics, the
//! one-step model-update magnitude, and the depth-by-strategy sweep harness.

use crate::data::SourceSpec;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::norms::{NormKind, NormStrategy};
use crate::tensor::{l2_diff, l2_norm, rms, Real};
use crate::train::{train_loop, RunSink, TrainConfig};
use rayon::prelude::*;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// One block's measurements at one step. `flagged` marks records from a
/// forward pass that produced non-finite values.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub step: usize,
    pub layer: usize,
    /// RMS of the block's residual-stream output.
    pub activation_norm: f64,
    /// L2 over all parameter gradients in the block.
    pub grad_norm: f64,
    /// L2 over all parameter values in the block.
    pub param_norm: f64,
    pub flagged: bool,
}

/// One forward + backward on `batch`, no parameter update. Exactly one
/// record per layer; the model is left byte-identical.
pub fn collect_layer_stats<T: Real>(
    model: &Model<T>,
    batch: &crate::data::Batch,
    step: usize,
) -> Result<Vec<LayerStats>> {
    let n = model.config.num_layers;
    let param_norm_of = |layer: usize| -> f64 {
        model
            .params
            .entries()
            .iter()
            .filter(|e| e.layer == Some(layer))
            .map(|e| {
                let x = e.tensor.l2_norm();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    };

    let mut graph = Graph::new();
    let run = (|| -> Result<Vec<LayerStats>> {
        let (trace, loss) =
            model.forward_loss(&mut graph, &batch.input_ids, &batch.targets, batch.batch)?;
        let activation: Vec<f64> = trace
            .block_outputs
            .iter()
            .map(|v| rms(graph.value(*v)))
            .collect();
        graph.backward_and_release(loss)?;
        let mut grad_sq = vec![0.0f64; n];
        for (entry, var) in model.params.entries().iter().zip(&trace.bound) {
            if let (Some(layer), Some(g)) = (entry.layer, graph.grad(*var)) {
                grad_sq[layer] += g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
            }
        }
        Ok((0..n)
            .map(|i| LayerStats {
                step,
                layer: i,
                activation_norm: activation[i],
                grad_norm: grad_sq[i].sqrt(),
                param_norm: param_norm_of(i),
                flagged: false,
            })
            .collect())
    })();

    match run {
        Ok(stats) => Ok(stats),
        // A non-finite forward is data, not a crash: emit flagged records.
        Err(Error::NonFinite { .. }) => Ok((0..n)
            .map(|i| LayerStats {
                step,
                layer: i,
                activation_norm: f64::NAN,
                grad_norm: f64::NAN,
                param_norm: param_norm_of(i),
                flagged: true,
            })
            .collect()),
        Err(e) => Err(e),
    }
}

/// Max-over-layers / min-over-layers of per-block gradient norms; >= 1 for
/// finite positive inputs.
pub fn gradient_spread(stats: &[LayerStats]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for s in stats {
        if s.grad_norm.is_nan() {
            return f64::NAN;
        }
        max = max.max(s.grad_norm);
        min = min.min(s.grad_norm);
    }
    max / min
}

/// Relative output change after one optimizer step at `lr_probe`:
/// `||F_after - F_before||_2 / ||F_before||_2` over the batch logits.
/// Runs on a copy; the model is untouched.
pub fn update_magnitude<T: Real>(
    model: &Model<T>,
    batch: &crate::data::Batch,
    lr_probe: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut probe = model.clone();
    let mut graph = Graph::new();
    let (trace, loss) =
        probe.forward_loss(&mut graph, &batch.input_ids, &batch.targets, batch.batch)?;
    let before = graph.value(trace.logits).to_vec();
    probe.params.zero_grads();
    graph.backward_and_release(loss)?;
    probe.params.accumulate_grads(&graph, &trace.bound)?;
    let mut opt = crate::train::OptimizerState::new(&probe.params);
    crate::train::adam_step(&mut probe.params, &mut opt, lr_probe, cfg)?;

    let mut graph_after = Graph::new();
    let trace_after = probe.forward(&mut graph_after, &batch.input_ids, batch.batch)?;
    let after = graph_after.value(trace_after.logits);
    Ok(l2_diff(after, &before) / l2_norm(&before))
}

/// One sweep cell's outcome. `note` carries the divergence or failure
/// reason; it is logged, not part of the CSV schema.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub strategy: NormKind,
    pub depth: usize,
    pub seed: u64,
    pub steps_done: usize,
    pub diverged: bool,
    pub final_loss: f64,
    pub initial_loss: f64,
    pub grad_spread_step1: f64,
    pub update_magnitude: f64,
    pub note: String,
}

/// Sweep description: a model/train template whose depth, strategy, and
/// seed are replaced per cell.
pub struct SweepSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub source: SourceSpec,
    pub strategies: Vec<NormKind>,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
}

fn run_cell<T: Real>(spec: &SweepSpec, kind: NormKind, depth: usize, seed: u64) -> Result<SweepResult> {
    let mut cfg = spec.model.clone();
    cfg.num_layers = depth;
    cfg.norm = NormStrategy::new(kind, spec.model.norm.arch_role, depth, None)?;
    let mut tcfg = spec.train.clone();
    tcfg.steps = spec.steps;
    tcfg.seed = seed;
    tcfg.checkpoint_every = 0;

    let mut model = Model::<T>::build(cfg.clone(), seed)?;
    let source = spec
        .source
        .build(tcfg.batch_size, cfg.seq_length, seed)?;
    let first = source.batch_at(0)?;
    let update_mag = update_magnitude(&model, &first, tcfg.lr, &tcfg)?;
    let stats = collect_layer_stats(&model, &first, 0)?;
    let spread = gradient_spread(&stats);

    let outcome = train_loop(&mut model, source.as_ref(), &tcfg, &mut RunSink::null(), None)?;
    let (diverged, note) = match &outcome.status {
        crate::train::RunStatus::Completed => (false, String::new()),
        crate::train::RunStatus::Diverged { step, reason } => {
            (true, format!("diverged at step {step}: {reason}"))
        }
    };
    Ok(SweepResult {
        strategy: kind,
        depth,
        seed,
        steps_done: outcome.steps_done,
        diverged,
        final_loss: outcome.final_loss,
        initial_loss: outcome.initial_loss,
        grad_spread_step1: spread,
        update_magnitude: update_mag,
        note,
    })
}

/// Runs the full strategy x depth x seed product. Every cell yields a row;
/// panics and per-cell errors are recorded as diverged-with-reason, never
/// aborting the sweep. Cells run in parallel on the current rayon pool.
/// Results are ordered by (strategy, depth, seed).
pub fn run_depth_sweep<T: Real>(spec: &SweepSpec) -> Result<Vec<SweepResult>> {
    if spec.depths.is_empty() || spec.seeds.is_empty() || spec.strategies.is_empty() {
        return Err(Error::config("sweep needs at least one strategy, depth, and seed"));
    }
    let mut cells: Vec<(NormKind, usize, u64)> = Vec::new();
    let mut strategies = spec.strategies.clone();
    strategies.sort();
    strategies.dedup();
    let mut depths = spec.depths.clone();
    depths.sort_unstable();
    depths.dedup();
    let mut seeds = spec.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    for &s in &strategies {
        for &d in &depths {
            for &seed in &seeds {
                cells.push((s, d, seed));
            }
        }
    }
    let results: Vec<SweepResult> = cells
        .par_iter()
        .map(|&(kind, depth, seed)| {
            let attempt = catch_unwind(AssertUnwindSafe(|| run_cell::<T>(spec, kind, depth, seed)));
            let failed = |note: String| SweepResult {
                strategy: kind,
                depth,
                seed,
                steps_done: 0,
                diverged: true,
                final_loss: f64::NAN,
                initial_loss: f64::NAN,
                grad_spread_step1: f64::NAN,
                update_magnitude: f64::NAN,
                note,
            };
            match attempt {
                Ok(Ok(r)) => r,
                Ok(Err(e)) => failed(format!("cell error: {e}")),
                Err(_) => failed("cell panicked".to_string()),
            }
        })
        .collect();
    Ok(results)
}

/// `strategy,depth,seed,steps_done,diverged,final_loss,initial_loss,grad_spread_step1,update_magnitude`
pub fn write_sweep_csv(results: &[SweepResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(
        "strategy,depth,seed,steps_done,diverged,final_loss,initial_loss,grad_spread_step1,update_magnitude\n",
    );
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.depth,
            r.seed,
            r.steps_done,
            r.diverged,
            r.final_loss,
            r.initial_loss,
            r.grad_spread_step1,
            r.update_magnitude
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `step,layer,activation_norm,grad_norm,param_norm`
pub fn write_layer_stats_csv(stats: &[LayerStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "step,layer,activation_norm,grad_norm,param_norm").map_err(|e| Error::io(path, e))?;
    for s in stats {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.step, s.layer, s.activation_norm, s.grad_norm, s.param_norm
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_copy_task, CopyTaskSource, IGNORE_INDEX};
    use crate::model::Arch;
    use crate::norms::ArchRole;

    fn gpt(n: usize, kind: NormKind) -> ModelConfig {
        ModelConfig {
            arch: Arch::Gpt,
            num_layers: n,
            hidden_size: 16,
            num_heads: 2,
            seq_length: 16,
            vocab_size: crate::data::VOCAB_SIZE,
            ffn_ratio: 4,
            tie_lm_head: false,
            norm: NormStrategy::new(kind, ArchRole::DecoderOnly, n, None).unwrap(),
            ln_eps: crate::norms::DEFAULT_LN_EPS,
        }
    }

    #[test]
    fn one_record_per_layer_and_model_untouched() {
        let model = Model::<f64>::build(gpt(3, NormKind::FoundationLn), 1).unwrap();
        let before: Vec<Vec<f64>> = model
            .params
            .entries()
            .iter()
            .map(|e| e.tensor.data().to_vec())
            .collect();
        let batch = make_copy_task(5, 4, 16, 16).unwrap();
        let stats = collect_layer_stats(&model, &batch, 0).unwrap();
        assert_eq!(stats.len(), 3);
        for s in &stats {
            assert!(!s.flagged);
            assert!(s.activation_norm > 0.0);
            assert!(s.grad_norm > 0.0);
            assert!(s.param_norm > 0.0);
        }
        let after: Vec<Vec<f64>> = model
            .params
            .entries()
            .iter()
            .map(|e| e.tensor.data().to_vec())
            .collect();
        assert_eq!(before, after);
        assert!(gradient_spread(&stats) >= 1.0);
    }

    #[test]
    fn single_layer_model_yields_single_record() {
        let model = Model::<f64>::build(gpt(1, NormKind::PostLn), 0).unwrap();
        let batch = make_copy_task(0, 2, 16, 16).unwrap();
        assert_eq!(collect_layer_stats(&model, &batch, 0).unwrap().len(), 1);
    }

    #[test]
    fn all_ignored_batch_propagates_undefined_mean() {
        let model = Model::<f64>::build(gpt(1, NormKind::PostLn), 0).unwrap();
        let mut batch = make_copy_task(0, 2, 16, 16).unwrap();
        batch.targets = vec![IGNORE_INDEX; batch.targets.len()];
        let err = collect_layer_stats(&model, &batch, 0).unwrap_err();
        assert!(matches!(err, Error::UndefinedMean));
    }

    #[test]
    fn zero_probe_rate_gives_exactly_zero_update() {
        let model = Model::<f64>::build(gpt(2, NormKind::UpscaleLn), 3).unwrap();
        let batch = make_copy_task(1, 2, 16, 16).unwrap();
        let cfg = TrainConfig::default();
        let m = update_magnitude(&model, &batch, 0.0, &cfg).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn update_magnitude_is_deterministic_and_positive() {
        let model = Model::<f64>::build(gpt(2, NormKind::PostLn), 3).unwrap();
        let batch = make_copy_task(1, 2, 16, 16).unwrap();
        let cfg = TrainConfig::default();
        let a = update_magnitude(&model, &batch, 1e-3, &cfg).unwrap();
        let b = update_magnitude(&model, &batch, 1e-3, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn sweep_emits_one_row_per_cell_in_order() {
        let spec = SweepSpec {
            model: gpt(1, NormKind::PostLn),
            train: TrainConfig {
                batch_size: 2,
                lr: 1e-3,
                log_every: 100,
                ..TrainConfig::default()
            },
            source: SourceSpec::Copy { v_effective: 16 },
            strategies: vec![NormKind::FoundationLn, NormKind::PostLn],
            depths: vec![2, 1],
            seeds: vec![1, 2],
            steps: 3,
        };
        let rows = run_depth_sweep::<f64>(&spec).unwrap();
        assert_eq!(rows.len(), 8);
        // Ordered by (strategy, depth, seed) with depths/seeds sorted.
        assert_eq!(rows[0].strategy, NormKind::PostLn);
        assert_eq!(rows[0].depth, 1);
        assert_eq!(rows[0].seed, 1);
        assert_eq!(rows[7].strategy, NormKind::FoundationLn);
        assert_eq!(rows[7].depth, 2);
        assert_eq!(rows[7].seed, 2);
        for r in &rows {
            assert!(!r.diverged, "{:?}", r.note);
            assert_eq!(r.steps_done, 3);
            assert!(r.update_magnitude.is_finite());
        }
        let _ = CopyTaskSource {
            seed: 0,
            batch: 1,
            seq: 8,
            v_effective: 4,
        };
    }

    #[test]
    fn sweep_csv_has_fixed_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sweep.csv");
        let rows = vec![SweepResult {
            strategy: NormKind::UpscaleLn,
            depth: 4,
            seed: 7,
            steps_done: 10,
            diverged: false,
            final_loss: 1.5,
            initial_loss: 5.5,
            grad_spread_step1: 2.25,
            update_magnitude: 0.125,
            note: String::new(),
        }];
        write_sweep_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "strategy,depth,seed,steps_done,diverged,final_loss,initial_loss,grad_spread_step1,update_magnitude"
        );
        assert_eq!(lines.next().unwrap(), "upscale,4,7,10,false,1.5,5.5,2.25,0.125");
    }
}
