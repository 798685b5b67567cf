//! Byte-level vocabulary, synthetic tasks, and corpus batching.
//!
//! The vocabulary is fixed: bytes 0-255 map to token ids 0-255, followed by
//! PAD=256, MASK=257, BOS=258, EOS=259. Targets use -1 for positions that
//! carry no prediction.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub const VOCAB_SIZE: usize = 260;
pub const PAD: u32 = 256;
pub const MASK: u32 = 257;
pub const BOS: u32 = 258;
pub const EOS: u32 = 259;
/// Sentinel in target buffers for positions excluded from loss and gradient.
pub const IGNORE_INDEX: i64 = -1;

/// Identity byte mapping.
pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]; special tokens have no byte form.
pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::IndexOutOfRange {
                op: "detokenize",
                index: id as usize,
                bound: 256,
            })
        })
        .collect()
}

/// One training batch: `batch * seq` input ids and same-shape targets with
/// [`IGNORE_INDEX`] at non-predicted positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub input_ids: Vec<u32>,
    pub targets: Vec<i64>,
}

impl Batch {
    pub fn validate(&self) -> Result<()> {
        if self.input_ids.len() != self.batch * self.seq
            || self.targets.len() != self.input_ids.len()
        {
            return Err(Error::contract("batch buffers disagree with batch * seq"));
        }
        for &t in &self.targets {
            if t != IGNORE_INDEX && !(0..VOCAB_SIZE as i64).contains(&t) {
                return Err(Error::IndexOutOfRange {
                    op: "batch targets",
                    index: t.max(0) as usize,
                    bound: VOCAB_SIZE,
                });
            }
        }
        Ok(())
    }

    /// Number of positions that contribute to the loss.
    pub fn counted_positions(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_INDEX).count()
    }
}

/// Stable derived seed per (stream seed, step) pair.
fn mix_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 over the combined value
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Causal-LM copy task. Each row is
/// `BOS, p_1..p_m, p_1..p_m, EOS` with `m = seq/2 - 1` random payload tokens
/// below `v_effective`; targets are the next-token shift. Everything from
/// the repeat onward is predictable, so the achievable loss floor is about
/// half of `ln(v_effective)` — see [`copy_task_loss_floor`].
pub fn make_copy_task(seed: u64, batch: usize, seq: usize, v_effective: usize) -> Result<Batch> {
    if seq % 2 != 0 {
        return Err(Error::config(format!(
            "copy task needs an even seq-length, got {seq}"
        )));
    }
    if seq < 4 {
        return Err(Error::config("copy task needs seq-length >= 4"));
    }
    if v_effective < 2 || v_effective > 256 {
        return Err(Error::config(format!(
            "copy task payload vocabulary must be in [2, 256], got {v_effective}"
        )));
    }
    if batch == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let m = seq / 2 - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input_ids = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let payload: Vec<u32> = (0..m).map(|_| rng.gen_range(0..v_effective as u32)).collect();
        let row_start = input_ids.len();
        input_ids.push(BOS);
        input_ids.extend_from_slice(&payload);
        input_ids.extend_from_slice(&payload);
        input_ids.push(EOS);
        let row = &input_ids[row_start..];
        for t in 0..seq {
            if t + 1 < seq {
                targets.push(row[t + 1] as i64);
            } else {
                targets.push(IGNORE_INDEX);
            }
        }
    }
    let b = Batch {
        batch,
        seq,
        input_ids,
        targets,
    };
    b.validate()?;
    Ok(b)
}

/// Analytic loss floor of the copy task: the first `m` predictions are
/// unpredictable (ln v each), the remaining `m + 1` counted positions are
/// deterministic given the prefix.
pub fn copy_task_loss_floor(seq: usize, v_effective: usize) -> f64 {
    let m = (seq / 2 - 1) as f64;
    m * (v_effective as f64).ln() / (2.0 * m + 1.0)
}

/// BERT-style masking: each non-PAD position is selected independently with
/// `mask_rate`; of the selected, 80% become MASK, 10% a random byte token,
/// 10% stay unchanged. Targets hold the original id at selected positions
/// and [`IGNORE_INDEX`] elsewhere.
pub fn mask_for_mlm(token_ids: &[u32], seed: u64, mask_rate: f64) -> Result<(Vec<u32>, Vec<i64>)> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::config(format!(
            "mask-rate must lie strictly between 0 and 1, got {mask_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = token_ids.to_vec();
    let mut targets = vec![IGNORE_INDEX; token_ids.len()];
    for (i, &id) in token_ids.iter().enumerate() {
        // Draw per position unconditionally so the stream stays aligned
        // regardless of PAD placement.
        let select: f64 = rng.gen();
        let action: f64 = rng.gen();
        let random_id: u32 = rng.gen_range(0..256);
        if id == PAD || select >= mask_rate {
            continue;
        }
        targets[i] = id as i64;
        if action < 0.8 {
            masked[i] = MASK;
        } else if action < 0.9 {
            masked[i] = random_id;
        } // else leave unchanged
    }
    Ok((masked, targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Synthetic copy task (causal).
    Copy,
    /// Next-byte prediction over a corpus (causal).
    CharLm,
    /// Masked-byte prediction over a corpus (bidirectional).
    Mlm,
}

impl TaskKind {
    pub fn config_name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::CharLm => "char-lm",
            TaskKind::Mlm => "mlm",
        }
    }

    pub fn causal(self) -> bool {
        !matches!(self, TaskKind::Mlm)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.config_name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "char-lm" => Ok(TaskKind::CharLm),
            "mlm" => Ok(TaskKind::Mlm),
            other => Err(Error::config(format!(
                "unknown task `{other}`; valid: copy, char-lm, mlm"
            ))),
        }
    }
}

/// Deterministic batch provider: the batch at a step is a pure function of
/// (source, step), which is what makes checkpoint resume bitwise exact.
pub trait BatchSource: Send + Sync {
    fn batch_at(&self, step: usize) -> Result<Batch>;
}

/// Recipe for building a [`BatchSource`] once batch/seq/seed are known;
/// sweeps use this to give every cell its own deterministic stream.
#[derive(Debug, Clone)]
pub enum SourceSpec {
    Copy {
        v_effective: usize,
    },
    Corpus {
        path: std::path::PathBuf,
        task: TaskKind,
        mask_rate: f64,
    },
}

impl SourceSpec {
    pub fn build(&self, batch: usize, seq: usize, seed: u64) -> Result<Box<dyn BatchSource>> {
        match self {
            SourceSpec::Copy { v_effective } => Ok(Box::new(CopyTaskSource {
                seed,
                batch,
                seq,
                v_effective: *v_effective,
            })),
            SourceSpec::Corpus {
                path,
                task,
                mask_rate,
            } => Ok(Box::new(CorpusSource::open(
                path, seq, batch, seed, *task, *mask_rate,
            )?)),
        }
    }
}

/// Copy-task source; every step draws a fresh deterministic batch.
pub struct CopyTaskSource {
    pub seed: u64,
    pub batch: usize,
    pub seq: usize,
    pub v_effective: usize,
}

impl BatchSource for CopyTaskSource {
    fn batch_at(&self, step: usize) -> Result<Batch> {
        make_copy_task(mix_seed(self.seed, step as u64), self.batch, self.seq, self.v_effective)
    }
}

/// Non-overlapping fixed-length windows over a byte corpus, visited in a
/// seed-shuffled order that cycles forever.
pub struct CorpusSource {
    bytes: Vec<u8>,
    order: Vec<usize>,
    pub seq: usize,
    pub batch: usize,
    pub seed: u64,
    pub task: TaskKind,
    pub mask_rate: f64,
}

impl CorpusSource {
    pub fn open(
        path: impl AsRef<Path>,
        seq: usize,
        batch: usize,
        seed: u64,
        task: TaskKind,
        mask_rate: f64,
    ) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes, seq, batch, seed, task, mask_rate)
    }

    pub fn from_bytes(
        bytes: Vec<u8>,
        seq: usize,
        batch: usize,
        seed: u64,
        task: TaskKind,
        mask_rate: f64,
    ) -> Result<Self> {
        if seq < 2 || batch == 0 {
            return Err(Error::config("corpus streaming needs seq-length >= 2 and batch >= 1"));
        }
        if bytes.is_empty() {
            return Err(Error::data("corpus file is empty"));
        }
        let windows = bytes.len() / seq;
        if windows == 0 {
            return Err(Error::data(format!(
                "corpus has {} bytes, shorter than one {seq}-byte window",
                bytes.len()
            )));
        }
        let mut order: Vec<usize> = (0..windows).collect();
        // Fisher-Yates with the stream seed; fixed for the life of the run.
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0FFEE));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        Ok(CorpusSource {
            bytes,
            order,
            seq,
            batch,
            seed,
            task,
            mask_rate,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.order.len()
    }

    /// Full batches per pass over the corpus (remainder windows are dropped).
    pub fn num_full_batches(&self) -> usize {
        self.order.len() / self.batch
    }

    fn window(&self, w: usize) -> &[u8] {
        &self.bytes[w * self.seq..(w + 1) * self.seq]
    }

    /// One pass over the corpus in shuffled order.
    pub fn iter_epoch(&self) -> impl Iterator<Item = Result<Batch>> + '_ {
        (0..self.num_full_batches()).map(move |i| self.batch_at(i))
    }
}

impl BatchSource for CorpusSource {
    fn batch_at(&self, step: usize) -> Result<Batch> {
        if self.num_full_batches() == 0 {
            return Err(Error::data("corpus holds fewer windows than one batch"));
        }
        let mut input_ids = Vec::with_capacity(self.batch * self.seq);
        let mut targets = Vec::with_capacity(self.batch * self.seq);
        for j in 0..self.batch {
            let w = self.order[(step * self.batch + j) % self.order.len()];
            let ids = tokenize(self.window(w));
            match self.task {
                TaskKind::CharLm | TaskKind::Copy => {
                    for t in 0..self.seq {
                        targets.push(if t + 1 < self.seq {
                            ids[t + 1] as i64
                        } else {
                            IGNORE_INDEX
                        });
                    }
                    input_ids.extend_from_slice(&ids);
                }
                TaskKind::Mlm => {
                    // Windows reappear across epochs with fresh masks.
                    let mask_seed = mix_seed(self.seed, (step * self.batch + j) as u64);
                    let (masked, tg) = mask_for_mlm(&ids, mask_seed, self.mask_rate)?;
                    input_ids.extend_from_slice(&masked);
                    targets.extend_from_slice(&tg);
                }
            }
        }
        let b = Batch {
            batch: self.batch,
            seq: self.seq,
            input_ids,
            targets,
        };
        b.validate()?;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_is_the_identity_byte_map() {
        assert_eq!(tokenize(b""), Vec::<u32>::new());
        assert_eq!(tokenize(&[0x41, 0x42]), vec![65, 66]);
    }

    #[test]
    fn detokenize_round_trips_random_blob() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let blob: Vec<u8> = (0..1024).map(|_| rng.gen()).collect();
        assert_eq!(detokenize(&tokenize(&blob)).unwrap(), blob);
    }

    #[test]
    fn detokenize_rejects_special_tokens() {
        assert!(matches!(
            detokenize(&[65, MASK]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn copy_task_is_deterministic_and_repeats_payload() {
        let a = make_copy_task(42, 3, 16, 16).unwrap();
        let b = make_copy_task(42, 3, 16, 16).unwrap();
        assert_eq!(a, b);
        let m = 16 / 2 - 1;
        for row in 0..3 {
            let r = &a.input_ids[row * 16..(row + 1) * 16];
            assert_eq!(r[0], BOS);
            assert_eq!(r[1..1 + m], r[1 + m..1 + 2 * m], "second half repeats payload");
            assert_eq!(r[15], EOS);
            // next-token targets
            for t in 0..15 {
                assert_eq!(a.targets[row * 16 + t], r[t + 1] as i64);
            }
            assert_eq!(a.targets[row * 16 + 15], IGNORE_INDEX);
        }
    }

    #[test]
    fn copy_task_rejects_odd_seq() {
        assert!(matches!(
            make_copy_task(0, 1, 15, 16),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn copy_floor_matches_cheating_oracle() {
        // Oracle that reads the inputs: exact prediction wherever the next
        // token is determined by the prefix, uniform over v_eff elsewhere.
        let (seq, v) = (16usize, 16usize);
        let b = make_copy_task(7, 8, seq, v).unwrap();
        let m = seq / 2 - 1;
        let mut total = 0.0;
        let mut counted = 0usize;
        for row in 0..b.batch {
            for t in 0..seq {
                let target = b.targets[row * seq + t];
                if target == IGNORE_INDEX {
                    continue;
                }
                counted += 1;
                if t < m {
                    total += (v as f64).ln(); // unpredictable payload draw
                } // else: copy or EOS, fully determined -> 0 contribution
            }
        }
        let oracle = total / counted as f64;
        let floor = copy_task_loss_floor(seq, v);
        assert!((oracle - floor).abs() < 1e-12, "{oracle} vs {floor}");
        assert!((floor - 0.5 * (v as f64).ln()).abs() < 0.1 * (v as f64).ln());
    }

    #[test]
    fn mlm_mask_fractions_are_statistical() {
        let ids: Vec<u32> = (0..100_000).map(|i| (i % 256) as u32).collect();
        let (masked, targets) = mask_for_mlm(&ids, 3, 0.15).unwrap();
        let selected: Vec<usize> = (0..ids.len())
            .filter(|&i| targets[i] != IGNORE_INDEX)
            .collect();
        let frac = selected.len() as f64 / ids.len() as f64;
        assert!((frac - 0.15).abs() < 0.01, "selected fraction {frac}");
        let mask_count = selected.iter().filter(|&&i| masked[i] == MASK).count();
        let mask_frac = mask_count as f64 / selected.len() as f64;
        assert!((mask_frac - 0.80).abs() < 0.02, "MASK fraction {mask_frac}");
        // Targets at selected positions hold the original id.
        for &i in selected.iter().take(100) {
            assert_eq!(targets[i], ids[i] as i64);
        }
    }

    #[test]
    fn mlm_mask_is_seed_deterministic_and_validates_rate() {
        let ids: Vec<u32> = (0..512).map(|i| (i % 256) as u32).collect();
        assert_eq!(
            mask_for_mlm(&ids, 9, 0.15).unwrap(),
            mask_for_mlm(&ids, 9, 0.15).unwrap()
        );
        assert!(mask_for_mlm(&ids, 9, 0.0).is_err());
        assert!(mask_for_mlm(&ids, 9, 1.0).is_err());
    }

    #[test]
    fn corpus_batching_arithmetic() {
        // 10 KiB file, S=128, B=4 -> 80 windows -> 20 full batches.
        let bytes = vec![7u8; 10 * 1024];
        let src = CorpusSource::from_bytes(bytes, 128, 4, 1, TaskKind::CharLm, 0.15).unwrap();
        assert_eq!(src.num_windows(), 80);
        assert_eq!(src.num_full_batches(), 20);
        assert_eq!(src.iter_epoch().count(), 20);
    }

    #[test]
    fn corpus_stream_is_deterministic_per_seed() {
        let bytes: Vec<u8> = (0..4096).map(|i| (i % 251) as u8).collect();
        let a = CorpusSource::from_bytes(bytes.clone(), 64, 2, 5, TaskKind::CharLm, 0.15).unwrap();
        let b = CorpusSource::from_bytes(bytes, 64, 2, 5, TaskKind::CharLm, 0.15).unwrap();
        for step in 0..10 {
            assert_eq!(a.batch_at(step).unwrap(), b.batch_at(step).unwrap());
        }
    }

    #[test]
    fn corpus_rejects_empty_and_short_files() {
        assert!(matches!(
            CorpusSource::from_bytes(vec![], 64, 1, 0, TaskKind::CharLm, 0.15),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            CorpusSource::from_bytes(vec![1, 2, 3], 64, 1, 0, TaskKind::CharLm, 0.15),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn mlm_batches_only_predict_selected_positions() {
        let bytes: Vec<u8> = (0..2048).map(|i| (i * 31 % 256) as u8).collect();
        let src = CorpusSource::from_bytes(bytes, 64, 2, 5, TaskKind::Mlm, 0.15).unwrap();
        let b = src.batch_at(0).unwrap();
        assert!(b.counted_positions() > 0);
        assert!(b.counted_positions() < b.input_ids.len() / 2);
        b.validate().unwrap();
    }
}
