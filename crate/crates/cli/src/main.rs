use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dizzy_rnn::experiment::{run_experiment, run_gradcheck, run_norm_trace, write_norm_trace, ExperimentConfig};
use dizzy_rnn::model::CellKind;
use dizzy_rnn::training::OptimizerKind;
use dizzy_rnn::DizzyError;

#[derive(Parser)]
#[command(name = "dizzy", version, about = "Train and diagnose rotation-parameterized RNNs on the copy problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv and params.json.
    Train(Overrides),
    /// Compare analytic gradients against finite differences.
    Gradcheck(Overrides),
    /// Write per-step gradient norms of a fresh model to normtrace.csv.
    Normtrace(Overrides),
}

/// Every config key can be given as a flag of the same name; flags win
/// over the config file.
#[derive(Args)]
#[command(rename_all = "snake_case", allow_negative_numbers = true)]
struct Overrides {
    /// JSON config file with flat keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cell: Option<CellKind>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    rotations: Option<usize>,
    #[arg(long)]
    sv_lambda: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    num_symbols: Option<usize>,
    #[arg(long)]
    copy_length: Option<usize>,
    #[arg(long)]
    lag: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    overwrite: Option<bool>,
    #[arg(long)]
    record_time: Option<bool>,
    #[arg(long)]
    parallel: Option<bool>,
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long)]
    dump_batch: Option<bool>,
}

impl Overrides {
    fn resolve(self) -> Result<ExperimentConfig, DizzyError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        apply!(
            cell, hidden_size, rotations, sv_lambda, learning_rate, optimizer, epochs, batches_per_epoch, batch_size, num_symbols,
            copy_length, lag, test_size, seed, output, overwrite, record_time, parallel, dump_batch
        );
        if self.target_accuracy.is_some() {
            cfg.target_accuracy = self.target_accuracy;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

fn fail(err: DizzyError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_numeric() { EXIT_NUMERIC } else { EXIT_CONFIG })
}

fn run(command: Command) -> Result<ExitCode, DizzyError> {
    match command {
        Command::Train(o) => {
            let cfg = o.resolve()?;
            let rows = run_experiment(&cfg, |row| {
                eprintln!(
                    "epoch {:>4}  loss {:.5}  reg {:.5}  acc {:.4}  ratio {:.3e}  {:.1}s",
                    row.epoch, row.train_loss, row.reg_loss, row.test_acc, row.grad_ratio, row.seconds
                );
            })?;
            let best = rows.iter().map(|r| r.test_acc).fold(f64::NAN, f64::max);
            println!("{} epochs, best test accuracy {best:.4}, output in {}", rows.len(), cfg.output.display());
        }
        Command::Gradcheck(o) => {
            let report = run_gradcheck(&o.resolve()?)?;
            for (group, abs, rel) in &report.groups {
                println!("{group:<20} max_abs {abs:.3e}  max_rel {rel:.3e}");
            }
            println!(
                "{} parameters, {} skipped at activation kinks, worst relative error {:.3e}",
                report.num_params,
                report.skipped,
                report.max_rel_error()
            );
            if !report.passed() {
                println!("FAILED");
                return Ok(ExitCode::from(EXIT_GRADCHECK));
            }
            println!("ok");
        }
        Command::Normtrace(o) => {
            let cfg = o.resolve()?;
            let trace = run_norm_trace(&cfg)?;
            let path = write_norm_trace(&cfg, &trace)?;
            println!("max/min ratio {:.12e}, written to {}", trace.ratio(), path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    run(cli.command).unwrap_or_else(fail)
}
