//! Subcommands of the `fednca` binary.

pub mod bench;
pub mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use fednca::baseline::{random_blob, simulate_baseline_costs, CostRow};
use fednca::checkpoint::save_checkpoint;
use fednca::config::ExperimentConfig;
use fednca::he::{self, HeParams};
use fednca::nca::{flatten, TwoStageModel};
use fednca::netsim::MIB;
use fednca::protocol::{run_experiment_with, save_round_reports, AggregationMode, PhaseTimings};
use fednca::Error;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "fednca", version, about = "Federated NCA segmentation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a federated experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time encryption and decryption at NCA and baseline sizes.
    BenchHe {
        #[arg(long)]
        config: PathBuf,
        /// Also write bench_he.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Payload sizes and round-trip errors of every codec.
    BenchCompression {
        #[arg(long)]
        config: PathBuf,
        /// Also write bench_compression.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize round-report or ledger CSVs.
    Report {
        csv: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out).map(|_| ()),
        Command::BenchHe { config, out } => cmd_bench_he(&config, out.as_deref()).map(|_| ()),
        Command::BenchCompression { config, out } => cmd_bench_compression(&config, out.as_deref()).map(|_| ()),
        Command::Report { csv, json } => {
            let text = cmd_report(&csv, json)?;
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub mode: AggregationMode,
    pub rounds: usize,
    pub clients: usize,
    pub param_count: usize,
    pub final_dice: Option<f64>,
    pub final_dice_per_class: Vec<f64>,
    pub up_mib: f64,
    pub down_mib: f64,
    pub total_mib: f64,
    pub mib_per_round: f64,
    pub virtual_seconds: f64,
    /// Measured on this machine; varies between runs.
    pub wall_clock_seconds: f64,
    pub phase_seconds: PhaseTimings,
}

pub const ROUND_REPORTS_FILE: &str = "round_reports.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const CHECKPOINT_FILE: &str = "model.fnca";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes round reports, ledger, checkpoint and a JSON summary into `out`.
pub fn cmd_train(config_path: &Path, out: &Path) -> Result<TrainSummary, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let started = Instant::now();
    let mode = config.protocol.mode;
    let clients = config.protocol.clients;
    let output = run_experiment_with(config, |r| {
        println!(
            "round {:>3}: loss {:.4}  dice {:.4}  up {:.4} MiB  down {:.4} MiB",
            r.round,
            r.mean_train_loss(),
            r.test_dice,
            r.total_up_bytes() as f64 / MIB,
            r.total_down_bytes() as f64 / MIB
        );
    })?;
    let wall = started.elapsed().as_secs_f64();

    save_round_reports(&out.join(ROUND_REPORTS_FILE), &output.reports)?;
    output.ledger.save_csv(&out.join(LEDGER_FILE))?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &output.final_model)?;

    let up: u64 = output.reports.iter().map(|r| r.total_up_bytes()).sum();
    let down: u64 = output.reports.iter().map(|r| r.total_down_bytes()).sum();
    let mut phases = PhaseTimings::default();
    for r in &output.reports {
        let t = r.timings;
        phases.broadcast_s += t.broadcast_s;
        phases.client_s += t.client_s;
        phases.upload_s += t.upload_s;
        phases.aggregate_s += t.aggregate_s;
        phases.evaluate_s += t.evaluate_s;
    }
    let rounds = output.reports.len();
    let last = output.reports.last();
    let summary = TrainSummary {
        mode,
        rounds,
        clients,
        param_count: output.final_model.param_count(),
        final_dice: last.map(|r| r.test_dice),
        final_dice_per_class: last.map(|r| r.test_dice_per_class.clone()).unwrap_or_default(),
        up_mib: up as f64 / MIB,
        down_mib: down as f64 / MIB,
        total_mib: (up + down) as f64 / MIB,
        mib_per_round: if rounds == 0 { 0.0 } else { (up + down) as f64 / MIB / rounds as f64 },
        virtual_seconds: output.reports.iter().map(|r| r.virtual_seconds).sum(),
        wall_clock_seconds: wall,
        phase_seconds: phases,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    println!(
        "done: {rounds} rounds, final dice {}, {:.4} MiB total, outputs in {}",
        summary.final_dice.map_or("-".into(), |d| format!("{d:.4}")),
        summary.total_mib,
        out.display()
    );
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct HeBenchRow {
    pub model: String,
    pub params: usize,
    pub ciphertexts: usize,
    pub expected_ciphertexts: usize,
    pub bytes: u64,
    pub encrypt_ms: f64,
    pub decrypt_ms: f64,
    pub count_ratio_vs_nca: f64,
    pub param_ratio_vs_nca: f64,
    pub time_ratio_vs_nca: f64,
    pub max_abs_error: f64,
}

/// Median-of-`bench.repeats` timings of streamed chunk encryption and
/// decryption, for the NCA and every configured baseline.
pub fn cmd_bench_he(config_path: &Path, out: Option<&Path>) -> Result<Vec<HeBenchRow>, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let params = HeParams::new(&config.he).map_err(|e| CliError::Config(format!("he: {e}")))?;
    let keys = he::keygen(&params, config.seed)?;
    let repeats = config.bench.repeats;

    let nca = flatten(&TwoStageModel::<f32>::init(config.model.clone(), config.seed));
    let mut targets: Vec<(String, usize)> = vec![("nca".into(), nca.len())];
    targets.extend(config.baselines.iter().map(|b| (b.name.clone(), b.params)));

    let mut rows: Vec<HeBenchRow> = Vec::new();
    println!(
        "{:<12} {:>12} {:>10} {:>14} {:>12} {:>12} {:>10}",
        "model", "params", "cts", "bytes", "enc ms", "dec ms", "time x"
    );
    for (i, (name, len)) in targets.iter().enumerate() {
        let values = if i == 0 { nca.clone() } else { random_blob(*len, config.seed.wrapping_add(i as u64)) };
        let t = bench::he_timing(&values, &params, &keys, repeats, config.seed)?;
        drop(values);
        let (nca_cts, nca_len, nca_s) =
            rows.first().map_or((t.ciphertexts, *len, t.total_s), |r| (r.ciphertexts, r.params, (r.encrypt_ms + r.decrypt_ms) / 1e3));
        let row = HeBenchRow {
            model: name.clone(),
            params: *len,
            ciphertexts: t.ciphertexts,
            expected_ciphertexts: he::chunk_count(*len, &params),
            bytes: t.bytes,
            encrypt_ms: t.encrypt_s * 1e3,
            decrypt_ms: t.decrypt_s * 1e3,
            count_ratio_vs_nca: t.ciphertexts as f64 / nca_cts as f64,
            param_ratio_vs_nca: *len as f64 / nca_len as f64,
            time_ratio_vs_nca: t.total_s / nca_s,
            max_abs_error: t.max_abs_error,
        };
        println!(
            "{:<12} {:>12} {:>10} {:>14} {:>12.3} {:>12.3} {:>10.1}",
            row.model, row.params, row.ciphertexts, row.bytes, row.encrypt_ms, row.decrypt_ms, row.time_ratio_vs_nca
        );
        rows.push(row);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join("bench_he.json"), &rows)?;
    }
    Ok(rows)
}

pub fn cmd_bench_compression(config_path: &Path, out: Option<&Path>) -> Result<Vec<CostRow>, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let rows = simulate_baseline_costs(
        &config.baselines,
        &config.bench.codecs,
        config.compression.k_percent,
        &config.model,
        config.seed,
    )?;
    println!(
        "{:<12} {:<8} {:>12} {:>14} {:>12} {:>12} {:>12}",
        "model", "codec", "params", "bytes", "MiB", "x nca", "max err"
    );
    for r in &rows {
        println!(
            "{:<12} {:<8} {:>12} {:>14} {:>12.4} {:>12.2} {:>12.3e}",
            r.model,
            r.codec.name(),
            r.params,
            r.bytes,
            r.mib,
            r.ratio_vs_nca,
            r.max_abs_error
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join("bench_compression.json"), &rows)?;
    }
    Ok(rows)
}

pub fn cmd_report(paths: &[PathBuf], json: bool) -> Result<String, CliError> {
    if paths.is_empty() {
        return Err(CliError::Config("report needs at least one CSV file".into()));
    }
    let report = report::summarize(paths).map_err(CliError::Runtime)?;
    if json {
        serde_json::to_string_pretty(&report).map(|s| s + "\n").map_err(|e| CliError::Runtime(e.to_string()))
    } else {
        Ok(report::render_text(&report))
    }
}
