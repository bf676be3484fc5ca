//! The copy problem: read `C` symbols, wait out a blank lag ended by a
//! delimiter, then reproduce the symbols.
//!
//! Step layout for one sequence (`T = 2C + max(S, 1)`):
//!
//! ```text
//! | C data symbols | S-1 blanks | delimiter | C blanks (answer window) |
//! ```
//!
//! Inputs are one-hot over `K + 2` channels: `K` data symbols, then blank,
//! then delimiter. The loss mask covers exactly the answer window.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, DizzyError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyTaskConfig {
    pub num_symbols: usize,
    pub copy_length: usize,
    pub lag: usize,
    pub batch_size: usize,
}

impl Default for CopyTaskConfig {
    fn default() -> Self {
        CopyTaskConfig {
            num_symbols: 10,
            copy_length: 10,
            lag: 90,
            batch_size: 100,
        }
    }
}

impl CopyTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_symbols < 2 {
            return Err(DizzyError::InvalidConfig("copy task needs at least 2 symbols".into()));
        }
        if self.copy_length < 1 {
            return Err(DizzyError::InvalidConfig("copy length must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(DizzyError::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Total number of steps per sequence.
    pub fn seq_len(&self) -> usize {
        2 * self.copy_length + self.lag.max(1)
    }

    /// Width of each one-hot input vector.
    pub fn input_dim(&self) -> usize {
        self.num_symbols + 2
    }

    pub fn blank_channel(&self) -> usize {
        self.num_symbols
    }

    pub fn delimiter_channel(&self) -> usize {
        self.num_symbols + 1
    }

    /// Index of the delimiter step.
    pub fn delimiter_step(&self) -> usize {
        self.seq_len() - self.copy_length - 1
    }
}

/// A batch of copy-problem sequences.
///
/// `targets` holds a class index for every step, but only entries where
/// `mask` is nonzero carry meaning; the rest are zero and never scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// `batch_size × seq_len × input_dim`, row-major.
    pub inputs: Vec<f64>,
    /// `batch_size × seq_len`.
    pub targets: Vec<usize>,
    /// `batch_size × seq_len`.
    pub mask: Vec<f64>,
}

impl CopyBatch {
    pub fn new(
        batch_size: usize,
        seq_len: usize,
        input_dim: usize,
        num_classes: usize,
        inputs: Vec<f64>,
        targets: Vec<usize>,
        mask: Vec<f64>,
    ) -> Result<Self> {
        check_len("batch inputs", batch_size * seq_len * input_dim, inputs.len())?;
        check_len("batch targets", batch_size * seq_len, targets.len())?;
        check_len("batch mask", batch_size * seq_len, mask.len())?;
        if batch_size == 0 || seq_len == 0 {
            return Err(DizzyError::InvalidConfig("batch must hold at least one step of one sequence".into()));
        }
        Ok(CopyBatch {
            batch_size,
            seq_len,
            input_dim,
            num_classes,
            inputs,
            targets,
            mask,
        })
    }

    pub fn input(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.seq_len + t) * self.input_dim;
        &self.inputs[start..start + self.input_dim]
    }

    pub fn targets_of(&self, b: usize) -> &[usize] {
        &self.targets[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn mask_of(&self, b: usize) -> &[f64] {
        &self.mask[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Copy of sequence `b` as a batch of one.
    pub fn sequence(&self, b: usize) -> CopyBatch {
        let span = self.seq_len * self.input_dim;
        CopyBatch {
            batch_size: 1,
            seq_len: self.seq_len,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            inputs: self.inputs[b * span..(b + 1) * span].to_vec(),
            targets: self.targets_of(b).to_vec(),
            mask: self.mask_of(b).to_vec(),
        }
    }
}

/// Samples a batch; data symbols are i.i.d. uniform over the `K` classes.
pub fn generate_copy_batch<R: Rng + ?Sized>(cfg: &CopyTaskConfig, rng: &mut R) -> Result<CopyBatch> {
    cfg.validate()?;
    let (t_len, dim, c) = (cfg.seq_len(), cfg.input_dim(), cfg.copy_length);
    let answer_start = t_len - c;
    let mut inputs = vec![0.0; cfg.batch_size * t_len * dim];
    let mut targets = vec![0; cfg.batch_size * t_len];
    let mut mask = vec![0.0; cfg.batch_size * t_len];
    for b in 0..cfg.batch_size {
        let symbols: Vec<usize> = (0..c).map(|_| rng.gen_range(0..cfg.num_symbols)).collect();
        for t in 0..t_len {
            let channel = if t < c {
                symbols[t]
            } else if t == cfg.delimiter_step() {
                cfg.delimiter_channel()
            } else {
                cfg.blank_channel()
            };
            inputs[(b * t_len + t) * dim + channel] = 1.0;
            if t >= answer_start {
                targets[b * t_len + t] = symbols[t - answer_start];
                mask[b * t_len + t] = 1.0;
            }
        }
    }
    CopyBatch::new(cfg.batch_size, t_len, dim, cfg.num_symbols, inputs, targets, mask)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Fraction of masked positions whose argmax prediction equals the target.
///
/// `logits[b][t]` holds the class scores for sequence `b` at step `t`.
pub fn score_accuracy(logits: &[Vec<Vec<f64>>], batch: &CopyBatch) -> Result<f64> {
    check_len("logit sequences", batch.batch_size, logits.len())?;
    let mut scored = 0usize;
    let mut correct = 0usize;
    for (b, seq) in logits.iter().enumerate() {
        check_len("logit steps", batch.seq_len, seq.len())?;
        let targets = batch.targets_of(b);
        for (t, &m) in batch.mask_of(b).iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            check_len("class scores", batch.num_classes, seq[t].len())?;
            scored += 1;
            if argmax(&seq[t]) == targets[t] {
                correct += 1;
            }
        }
    }
    if scored == 0 {
        return Err(DizzyError::DegenerateMask);
    }
    Ok(correct as f64 / scored as f64)
}
