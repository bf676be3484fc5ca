//! Experiment harness: configuration, the epoch loop, metrics output and
//! the gradient-check / norm-trace diagnostics.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::copy_task::{generate_copy_batch, score_accuracy, CopyBatch, CopyTaskConfig};
use crate::error::{DizzyError, Result};
use crate::model::{CellKind, ModelParams, ModelShape};
use crate::params::Parameters;
use crate::training::{check_model_gradients, forward_backward, predict, Execution, NormTrace, Optimizer, OptimizerKind};

/// Relative error above which a gradient check fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step used by the gradient check.
pub const GRADCHECK_EPS: f64 = 1e-5;

/// One experiment, readable from a flat JSON object. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cell: CellKind,
    pub hidden_size: usize,
    pub rotations: usize,
    /// Singular-value penalty; only used by `dizzy_svd`.
    pub sv_lambda: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub num_symbols: usize,
    pub copy_length: usize,
    pub lag: usize,
    pub test_size: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub overwrite: bool,
    /// Write wall-clock seconds to the metrics; zero when disabled so that
    /// repeated runs produce identical files.
    pub record_time: bool,
    pub parallel: bool,
    /// Stop after the first epoch whose test accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Also write the first training batch as `batch.json`.
    pub dump_batch: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = CopyTaskConfig::default();
        ExperimentConfig {
            cell: CellKind::DizzyOrtho,
            hidden_size: 128,
            rotations: 10,
            sv_lambda: 0.0,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Sgd,
            epochs: 100,
            batches_per_epoch: 10,
            batch_size: task.batch_size,
            num_symbols: task.num_symbols,
            copy_length: task.copy_length,
            lag: task.lag,
            test_size: 1000,
            seed: 0,
            output: PathBuf::from("runs/default"),
            overwrite: false,
            record_time: true,
            parallel: true,
            target_accuracy: None,
            dump_batch: false,
        }
    }
}

enum Stream {
    Init = 0,
    Train = 1,
    Test = 2,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task(self.batch_size).validate()?;
        let bad = |msg: String| Err(DizzyError::InvalidConfig(msg));
        if self.hidden_size < 2 {
            return bad(format!("hidden_size must be at least 2, got {}", self.hidden_size));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !self.sv_lambda.is_finite() || self.sv_lambda < 0.0 {
            return bad(format!("sv_lambda must be finite and >= 0, got {}", self.sv_lambda));
        }
        if self.batches_per_epoch == 0 || self.test_size == 0 {
            return bad("batches_per_epoch and test_size must be positive".into());
        }
        Ok(())
    }

    pub fn task(&self, batch_size: usize) -> CopyTaskConfig {
        CopyTaskConfig {
            num_symbols: self.num_symbols,
            copy_length: self.copy_length,
            lag: self.lag,
            batch_size,
        }
    }

    pub fn shape(&self) -> ModelShape {
        let task = self.task(self.batch_size);
        ModelShape {
            hidden_size: self.hidden_size,
            input_size: task.input_dim(),
            num_classes: task.num_symbols,
            rotations: self.rotations,
        }
    }

    fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    /// Independent random stream per purpose, all derived from `seed`.
    fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng
    }

    pub fn init_model(&self) -> Result<ModelParams> {
        self.validate()?;
        let lambda = (self.cell == CellKind::DizzySvd).then_some(self.sv_lambda);
        ModelParams::init(self.cell, self.shape(), lambda, &mut self.rng(Stream::Init))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub reg_loss: f64,
    pub test_acc: f64,
    pub grad_ratio: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: [&str; 6] = ["epoch", "train_loss", "reg_loss", "test_acc", "grad_ratio", "seconds"];

pub fn evaluate(model: &ModelParams, batch: &CopyBatch) -> Result<f64> {
    score_accuracy(&predict(batch, model)?, batch)
}

/// Trains from a fresh initialization, calling `on_epoch` after every
/// epoch. Returns the final parameters and all metrics rows.
pub fn train<F>(cfg: &ExperimentConfig, mut on_epoch: F) -> Result<(ModelParams, Vec<MetricsRow>)>
where
    F: FnMut(&MetricsRow),
{
    let mut model = cfg.init_model()?;
    let mut optimizer = Optimizer::new(cfg.optimizer, model.num_params());
    let mut train_rng = cfg.rng(Stream::Train);
    let mut test_rng = cfg.rng(Stream::Test);
    let exec = cfg.execution();
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut data_loss, mut reg_loss, mut grad_ratio) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.batches_per_epoch {
            let batch = generate_copy_batch(&cfg.task(cfg.batch_size), &mut train_rng)?;
            let (report, grads, trace) = forward_backward(&batch, &model, exec)?;
            optimizer.step(&mut model, &grads, cfg.learning_rate)?;
            data_loss += report.data_loss;
            reg_loss += report.reg_loss;
            grad_ratio = trace.ratio();
        }
        let test = generate_copy_batch(&cfg.task(cfg.test_size), &mut test_rng)?;
        let test_acc = evaluate(&model, &test)?;
        let per_batch = cfg.batches_per_epoch as f64;
        let row = MetricsRow {
            epoch,
            train_loss: data_loss / per_batch,
            reg_loss: reg_loss / per_batch,
            test_acc,
            grad_ratio,
            seconds: if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_epoch(&row);
        rows.push(row);
        if cfg.target_accuracy.is_some_and(|target| test_acc >= target) {
            break;
        }
    }
    Ok((model, rows))
}

fn create_output(cfg: &ExperimentConfig, name: &str) -> Result<File> {
    fs::create_dir_all(&cfg.output)?;
    let path = cfg.output.join(name);
    let mut options = OpenOptions::new();
    options.write(true);
    if cfg.overwrite {
        options.create(true).truncate(true);
    } else {
        options.create_new(true);
    }
    options.open(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            DizzyError::InvalidConfig(format!("{} already exists (set overwrite to replace it)", path.display()))
        } else {
            e.into()
        }
    })
}

/// Runs [`train`] and writes `metrics.csv` (one row per epoch, flushed as
/// it goes) and `params.json` under `cfg.output`.
pub fn run_experiment<F>(cfg: &ExperimentConfig, mut on_epoch: F) -> Result<Vec<MetricsRow>>
where
    F: FnMut(&MetricsRow),
{
    cfg.validate()?;
    let mut metrics = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(create_output(cfg, "metrics.csv")?);
    metrics.write_record(METRICS_HEADER)?;
    metrics.flush()?;
    let params_file = create_output(cfg, "params.json")?;
    if cfg.dump_batch {
        let batch = generate_copy_batch(&cfg.task(cfg.batch_size), &mut cfg.rng(Stream::Train))?;
        serde_json::to_writer(create_output(cfg, "batch.json")?, &batch)?;
    }

    let mut write_error = None;
    let (model, rows) = train(cfg, |row| {
        let written = metrics.serialize(row).and_then(|_| metrics.flush().map_err(csv::Error::from));
        if let Err(e) = written {
            write_error.get_or_insert(e);
        }
        on_epoch(row);
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    let mut params_file = std::io::BufWriter::new(params_file);
    serde_json::to_writer_pretty(&mut params_file, &model)?;
    params_file.flush()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    /// `(group, max absolute error, max relative error)`.
    pub groups: Vec<(String, f64, f64)>,
    pub num_params: usize,
    /// Coordinates left out because a probe crossed an activation kink.
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.2).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= GRADCHECK_TOLERANCE
    }
}

/// Finite-difference check of the configured model on one training batch.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    let model = cfg.init_model()?;
    let batch = generate_copy_batch(&cfg.task(cfg.batch_size), &mut cfg.rng(Stream::Train))?;
    let (report, groups) = check_model_gradients(&batch, &model, GRADCHECK_EPS)?;
    Ok(GradcheckReport {
        groups,
        num_params: report.numeric.len(),
        skipped: report.skipped.len(),
    })
}

/// Per-step gradient norms of the freshly initialized model on one batch.
pub fn run_norm_trace(cfg: &ExperimentConfig) -> Result<NormTrace> {
    let model = cfg.init_model()?;
    let batch = generate_copy_batch(&cfg.task(cfg.batch_size), &mut cfg.rng(Stream::Train))?;
    Ok(forward_backward(&batch, &model, cfg.execution())?.2)
}

/// Writes a trace as `t,hidden,carried,input` to `normtrace.csv`.
pub fn write_norm_trace(cfg: &ExperimentConfig, trace: &NormTrace) -> Result<PathBuf> {
    let mut out = csv::Writer::from_writer(create_output(cfg, "normtrace.csv")?);
    out.write_record(["t", "hidden", "carried", "input"])?;
    for t in 0..trace.hidden.len() {
        out.serialize((t, trace.hidden[t], trace.carried[t], trace.input[t]))?;
    }
    out.flush()?;
    Ok(cfg.output.join("normtrace.csv"))
}
