//! Command-line interface: train, sweep, gradcheck, count-params, eval,
//! diagnose. Exit codes: 0 success, 2 config/validation, 3 divergence,
//! 4 I/O or file format.

use clap::{Parser, Subcommand};
use depthlab::checkpoint::read_checkpoint;
use depthlab::config::{Precision, RunSpec};
use depthlab::data::{BatchSource, CorpusSource, TaskKind};
use depthlab::diagnostics::{
    collect_layer_stats, run_depth_sweep, write_layer_stats_csv, write_sweep_csv, SweepSpec,
};
use depthlab::error::{Error, Result};
use depthlab::gradcheck::check_model_gradients;
use depthlab::kv;
use depthlab::model::{count_params, Model};
use depthlab::norms::{NormKind, NormStrategy};
use depthlab::tensor::Real;
use depthlab::train::{
    load_run_state, perplexity, train_loop, CheckpointMeta, ResumeState, RunSink, RunStatus,
};
use depthlab::Graph;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "depthlab", version, about = "Depth-stability experiments for transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for manifest, metrics, and checkpoints.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the depth x strategy x seed sweep and tabulate stability.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated depths, e.g. 8,32,64.
        #[arg(long)]
        depths: String,
        /// Comma-separated strategies from {postln, preln, deepnorm, upscale, foundation}.
        #[arg(long)]
        strategies: String,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: String,
        /// Steps per cell; defaults to the config's steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Parallel cells; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Verify analytic gradients of a micro model against central
    /// differences for all five strategies.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the closed-form parameter count of a config.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mean per-token loss and perplexity of a checkpoint over a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Per-layer activation/gradient statistics of a checkpoint on a corpus.
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, resume, out } => cmd_train(&config, resume.as_deref(), &out),
        Command::Sweep {
            config,
            depths,
            strategies,
            seeds,
            steps,
            jobs,
            out,
        } => cmd_sweep(&config, &depths, &strategies, &seeds, steps, jobs, &out),
        Command::Gradcheck { config } => cmd_gradcheck(&config),
        Command::CountParams { config } => cmd_count_params(&config),
        Command::Eval {
            ckpt,
            data,
            batch_size,
        } => cmd_eval(&ckpt, &data, batch_size),
        Command::Diagnose { ckpt, data, out } => cmd_diagnose(&ckpt, &data, &out),
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(dir: &Path, spec: &RunSpec, resumed_from: Option<&Path>) -> Result<String> {
    let mut pairs = spec.to_kv();
    let mut manifest = pairs.clone();
    manifest.push(("artifact-version".to_string(), env!("CARGO_PKG_VERSION").to_string()));
    manifest.push(("start-time-unix".to_string(), unix_now().to_string()));
    manifest.push(("out-dir".to_string(), dir.display().to_string()));
    if let Some(p) = resumed_from {
        manifest.push(("resumed-from".to_string(), p.display().to_string()));
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, kv::format_kv(&manifest)).map_err(|e| Error::io(&path, e))?;
    // The checkpoint config block is the reproducible subset: no timestamps.
    pairs.push(("artifact-version".to_string(), env!("CARGO_PKG_VERSION").to_string()));
    Ok(kv::format_kv(&pairs))
}

fn ensure_file_exists(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::config(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_train(config: &Path, resume: Option<&Path>, out: &Path) -> Result<i32> {
    let spec = RunSpec::from_config_file(config)?;
    spec.validate_for_training()?;
    if let Some(p) = &spec.data_path {
        ensure_file_exists(p, "data file")?;
    }
    match spec.precision {
        Precision::F64 => train_typed::<f64>(&spec, resume, out),
        Precision::F32 => train_typed::<f32>(&spec, resume, out),
    }
}

fn train_typed<T: Real>(spec: &RunSpec, resume: Option<&Path>, out: &Path) -> Result<i32> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_block = write_manifest(out, spec, resume)?;

    let mut model;
    let resume_state: Option<ResumeState<T>> = match resume {
        Some(ckpt_path) => {
            let (block, records) = read_checkpoint(ckpt_path)?;
            let pairs = kv::parse_kv(&block)?;
            let ckpt_model = depthlab::ModelConfig::from_kv(&pairs)?;
            if ckpt_model != spec.model {
                return Err(Error::config(format!(
                    "checkpoint {} was built for a different model config",
                    ckpt_path.display()
                )));
            }
            let meta = CheckpointMeta::from_kv(&pairs)?;
            model = Model::<T>::build(spec.model.clone(), spec.train.seed)?;
            let (_opt, resume_state) = load_run_state(&mut model, &records, &meta)?;
            println!("resumed from {} at step {}", ckpt_path.display(), meta.next_step);
            Some(resume_state)
        }
        None => {
            model = Model::<T>::build(spec.model.clone(), spec.train.seed)?;
            None
        }
    };

    let source = spec.source_spec()?.build(
        spec.train.batch_size,
        spec.model.seq_length,
        spec.train.seed,
    )?;
    let mut sink = RunSink::into_dir(out, config_block)?;
    let outcome = train_loop(&mut model, source.as_ref(), &spec.train, &mut sink, resume_state)?;
    match outcome.status {
        RunStatus::Completed => {
            println!(
                "completed {} steps: loss {} -> {} (ppl {})",
                outcome.steps_done,
                outcome.initial_loss,
                outcome.final_loss,
                perplexity(outcome.final_loss)
            );
            Ok(0)
        }
        RunStatus::Diverged { step, reason } => {
            eprintln!("diverged at step {step}: {reason}");
            Ok(3)
        }
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = raw
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| Error::config(format!("bad {what} entry `{s}`: {e}")))
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::config(format!("{what} list is empty")));
    }
    Ok(items)
}

fn parse_strategies(raw: &str) -> Result<Vec<NormKind>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<NormKind>())
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::config("strategy list is empty"))
            } else {
                Ok(v)
            }
        })
}

fn cmd_sweep(
    config: &Path,
    depths: &str,
    strategies: &str,
    seeds: &str,
    steps: Option<usize>,
    jobs: Option<usize>,
    out: &Path,
) -> Result<i32> {
    let spec = RunSpec::from_config_file(config)?;
    spec.validate_for_training()?;
    if let Some(p) = &spec.data_path {
        ensure_file_exists(p, "data file")?;
    }
    let sweep = SweepSpec {
        model: spec.model.clone(),
        train: spec.train.clone(),
        source: spec.source_spec()?,
        strategies: parse_strategies(strategies)?,
        depths: parse_list(depths, "depth")?,
        seeds: parse_list(seeds, "seed")?,
        steps: steps.unwrap_or(spec.train.steps),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let results = match jobs {
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::config(format!("cannot build a {j}-thread pool: {e}")))?;
            match spec.precision {
                Precision::F64 => pool.install(|| run_depth_sweep::<f64>(&sweep)),
                Precision::F32 => pool.install(|| run_depth_sweep::<f32>(&sweep)),
            }?
        }
        None => match spec.precision {
            Precision::F64 => run_depth_sweep::<f64>(&sweep)?,
            Precision::F32 => run_depth_sweep::<f32>(&sweep)?,
        },
    };

    let csv_path = out.join("sweep.csv");
    write_sweep_csv(&results, &csv_path)?;
    for r in &results {
        println!(
            "{} depth {} seed {}: {} (loss {} -> {}, spread {}, update {})",
            r.strategy,
            r.depth,
            r.seed,
            if r.diverged { "DIVERGED" } else { "ok" },
            r.initial_loss,
            r.final_loss,
            r.grad_spread_step1,
            r.update_magnitude,
        );
        if !r.note.is_empty() {
            eprintln!("  note: {}", r.note);
        }
    }
    println!("{} rows -> {}", results.len(), csv_path.display());
    Ok(0)
}

/// Upper bound on gradcheck model size; central differences cost two
/// forwards per coordinate.
const GRADCHECK_PARAM_BOUND: u64 = 50_000;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn cmd_gradcheck(config: &Path) -> Result<i32> {
    let spec = RunSpec::from_config_file(config)?;
    let base_count = count_params(&spec.model)?;
    if base_count > GRADCHECK_PARAM_BOUND {
        return Err(Error::config(format!(
            "gradcheck refuses models above {GRADCHECK_PARAM_BOUND} parameters; this config has {base_count}"
        )));
    }
    // Gradient checking is a double-precision statement regardless of the
    // config's training precision, and it probes a synthetic batch drawn
    // inside the configured vocabulary rather than a real task.
    let batch = gradcheck_batch(&spec);

    let mut all_ok = true;
    for kind in NormKind::ALL {
        let mut cfg = spec.model.clone();
        cfg.norm = NormStrategy::new(kind, cfg.norm.arch_role, cfg.num_layers, None)?;
        let mut model = Model::<f64>::build(cfg, spec.train.seed)?;
        // Probe at an O(1)-scale parameter point; at the 0.02 training init
        // the query/key gradients are too small for central differences.
        model.randomize_for_probe(spec.train.seed);
        let report = check_model_gradients(&model, &batch, 1e-5)?;
        let ok = report.passes(GRADCHECK_TOLERANCE);
        all_ok &= ok;
        println!(
            "{}: max relative error {:.2e} (threshold {:.1e}), inert key-bias gradient {:.1e} {}",
            kind,
            report.max_rel_error,
            GRADCHECK_TOLERANCE,
            report.max_inert_grad,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(if all_ok { 0 } else { 1 })
}

/// Two rows of uniform-random in-vocab ids with next-token targets; the
/// final position carries no prediction.
fn gradcheck_batch(spec: &RunSpec) -> depthlab::data::Batch {
    use rand::{Rng, SeedableRng};
    let (b, s, v) = (2usize, spec.model.seq_length, spec.model.vocab_size);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.train.seed ^ 0xD1A6);
    let input_ids: Vec<u32> = (0..b * s).map(|_| rng.gen_range(0..v as u32)).collect();
    let targets: Vec<i64> = (0..b * s)
        .map(|i| {
            if (i + 1) % s == 0 {
                depthlab::data::IGNORE_INDEX
            } else {
                input_ids[i + 1] as i64
            }
        })
        .collect();
    depthlab::data::Batch {
        batch: b,
        seq: s,
        input_ids,
        targets,
    }
}

fn human_millions(count: u64) -> String {
    format!("{:.1}M", count as f64 / 1e6)
}

fn with_thousands(count: u64) -> String {
    let digits = count.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn cmd_count_params(config: &Path) -> Result<i32> {
    let spec = RunSpec::from_config_file(config)?;
    let count = count_params(&spec.model)?;
    println!("{} (~{})", with_thousands(count), human_millions(count));
    if let Some(reference) = spec.param_reference {
        let rel = (count as f64 - reference).abs() / reference;
        println!(
            "reference {}: relative difference {:.2}% (documented tolerance 1%){}",
            human_millions(reference as u64),
            rel * 100.0,
            if rel <= 0.01 { "" } else { " EXCEEDED" }
        );
    }
    Ok(0)
}

/// Model plus task description reconstructed from a checkpoint.
fn load_model_for_eval<T: Real>(
    pairs: &[(String, String)],
    records: &[depthlab::checkpoint::TensorRecord],
) -> Result<(Model<T>, TaskKind, f64, usize)> {
    let model_cfg = depthlab::ModelConfig::from_kv(pairs)?;
    let task: TaskKind = kv::get(pairs, "task").unwrap_or("char-lm").parse()?;
    let mask_rate: f64 = kv::get(pairs, "mask-rate")
        .unwrap_or("0.15")
        .parse()
        .map_err(|e| Error::config(format!("mask-rate: {e}")))?;
    let seed: u64 = kv::get(pairs, "seed")
        .unwrap_or("0")
        .parse()
        .map_err(|e| Error::config(format!("seed: {e}")))?;
    let mut model = Model::<T>::build(model_cfg, seed)?;
    let find = |name: &str| -> Result<&depthlab::checkpoint::TensorRecord> {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::config(format!("checkpoint lacks tensor `{name}`")))
    };
    for entry in model.params.entries_mut() {
        let rec = find(&entry.name)?;
        entry.tensor = rec.to_tensor::<T>()?.requires_grad(true);
    }
    Ok((model, task, mask_rate, seed as usize))
}

fn eval_corpus<T: Real>(
    model: &Model<T>,
    data: &Path,
    task: TaskKind,
    mask_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(f64, u64)> {
    let eval_task = if model.config.arch.causal() {
        TaskKind::CharLm
    } else {
        task
    };
    let source = CorpusSource::open(
        data,
        model.config.seq_length,
        batch_size,
        seed,
        eval_task,
        mask_rate,
    )?;
    if source.num_full_batches() == 0 {
        return Err(Error::data(
            "corpus holds fewer windows than one batch; lower --batch-size",
        ));
    }
    let mut total = 0.0f64;
    let mut counted = 0u64;
    for batch in source.iter_epoch() {
        let batch = batch?;
        let mut g = Graph::new();
        let (_, loss) = model.forward_loss(&mut g, &batch.input_ids, &batch.targets, batch.batch)?;
        let c = batch.counted_positions() as u64;
        total += g.scalar(loss)?.as_f64() * c as f64;
        counted += c;
    }
    Ok((total / counted as f64, counted))
}

fn cmd_eval(ckpt: &Path, data: &Path, batch_size: usize) -> Result<i32> {
    let (block, records) = read_checkpoint(ckpt)?;
    let pairs = kv::parse_kv(&block)?;
    let precision: Precision = kv::get(&pairs, "precision").unwrap_or("f64").parse()?;
    let (loss, counted) = match precision {
        Precision::F64 => {
            let (model, task, mask_rate, seed) = load_model_for_eval::<f64>(&pairs, &records)?;
            eval_corpus(&model, data, task, mask_rate, batch_size, seed as u64)?
        }
        Precision::F32 => {
            let (model, task, mask_rate, seed) = load_model_for_eval::<f32>(&pairs, &records)?;
            eval_corpus(&model, data, task, mask_rate, batch_size, seed as u64)?
        }
    };
    println!("tokens {counted}");
    println!("loss {loss:.6}");
    println!("ppl {:.6}", perplexity(loss));
    Ok(0)
}

fn cmd_diagnose(ckpt: &Path, data: &Path, out: &Path) -> Result<i32> {
    let (block, records) = read_checkpoint(ckpt)?;
    let pairs = kv::parse_kv(&block)?;
    // Diagnostics are reported in f64 regardless of stored precision.
    let (model, task, mask_rate, seed) = load_model_for_eval::<f64>(&pairs, &records)?;
    let eval_task = if model.config.arch.causal() {
        TaskKind::CharLm
    } else {
        task
    };
    let source = CorpusSource::open(data, model.config.seq_length, 8, seed as u64, eval_task, mask_rate)?;
    let batch = source.batch_at(0)?;
    let stats = collect_layer_stats(&model, &batch, 0)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("layer_stats.csv");
    write_layer_stats_csv(&stats, &path)?;
    let flagged = stats.iter().filter(|s| s.flagged).count();
    println!("{} layers -> {}", stats.len(), path.display());
    if flagged > 0 {
        eprintln!("warning: {flagged} layers flagged non-finite");
    }
    Ok(0)
}
