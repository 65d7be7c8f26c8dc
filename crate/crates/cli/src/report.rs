//! Summaries of round-report and ledger CSVs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fednca::netsim::{LEDGER_SCHEMA, MIB};
use fednca::protocol::ROUND_REPORT_SCHEMA;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvKind {
    RoundReport,
    Ledger,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileSummary {
    pub path: PathBuf,
    pub kind: CsvKind,
    pub rounds: usize,
    /// Only round reports carry Dice.
    pub final_dice: Option<f64>,
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub total_mib: f64,
    pub mib_per_round: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ratio {
    pub path: PathBuf,
    /// This file's total MiB over the first file's.
    pub total_mib_vs_first: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub files: Vec<FileSummary>,
    pub ratios: Vec<Ratio>,
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize, String> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| format!("{}: missing column `{name}`", path.display()))
}

fn parse<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path, line: usize) -> Result<T, String> {
    rec.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("{}: bad value in row {line}", path.display()))
}

pub fn summarize_file(path: &Path) -> Result<FileSummary, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let (schema, body) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let kind = match schema.trim_end() {
        s if s == ROUND_REPORT_SCHEMA => CsvKind::RoundReport,
        s if s == LEDGER_SCHEMA => CsvKind::Ledger,
        s if s.starts_with("# schema:") => return Err(format!("{}: unsupported schema `{s}`", path.display())),
        _ => return Err(format!("{}: no schema line", path.display())),
    };
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let headers = reader.headers().map_err(|e| format!("{}: {e}", path.display()))?.clone();
    let mut up = 0u64;
    let mut down = 0u64;
    let mut rounds = BTreeSet::new();
    let mut final_dice = None;
    match kind {
        CsvKind::RoundReport => {
            let (r, u, d, dice) = (
                column(&headers, "round", path)?,
                column(&headers, "up_bytes", path)?,
                column(&headers, "down_bytes", path)?,
                column(&headers, "test_dice", path)?,
            );
            for (line, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
                rounds.insert(parse::<u32>(&rec, r, path, line)?);
                up += parse::<u64>(&rec, u, path, line)?;
                down += parse::<u64>(&rec, d, path, line)?;
                final_dice = Some(parse::<f64>(&rec, dice, path, line)?);
            }
        }
        CsvKind::Ledger => {
            let (r, dir, b) = (column(&headers, "round", path)?, column(&headers, "direction", path)?, column(&headers, "bytes", path)?);
            for (line, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
                rounds.insert(parse::<u32>(&rec, r, path, line)?);
                let bytes = parse::<u64>(&rec, b, path, line)?;
                match rec.get(dir) {
                    Some("up") => up += bytes,
                    Some("down") => down += bytes,
                    _ => return Err(format!("{}: bad direction in row {line}", path.display())),
                }
            }
        }
    }
    let total_mib = (up + down) as f64 / MIB;
    Ok(FileSummary {
        path: path.to_path_buf(),
        kind,
        rounds: rounds.len(),
        final_dice,
        up_bytes: up,
        down_bytes: down,
        total_mib,
        mib_per_round: if rounds.is_empty() { 0.0 } else { total_mib / rounds.len() as f64 },
    })
}

pub fn summarize(paths: &[PathBuf]) -> Result<Report, String> {
    if paths.is_empty() {
        return Err("report needs at least one CSV file".into());
    }
    let files = paths.iter().map(|p| summarize_file(p)).collect::<Result<Vec<_>, _>>()?;
    let first = files[0].total_mib;
    let ratios = files
        .iter()
        .skip(1)
        .map(|f| Ratio { path: f.path.clone(), total_mib_vs_first: f.total_mib / first })
        .collect();
    Ok(Report { files, ratios })
}

pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<40} {:>12} {:>7} {:>10} {:>12} {:>12}\n",
        "file", "kind", "rounds", "dice", "total MiB", "MiB/round"
    ));
    for f in &report.files {
        let dice = f.final_dice.map_or("-".to_string(), |d| format!("{d:.4}"));
        let kind = match f.kind {
            CsvKind::RoundReport => "round_report",
            CsvKind::Ledger => "ledger",
        };
        out.push_str(&format!(
            "{:<40} {:>12} {:>7} {:>10} {:>12.4} {:>12.4}\n",
            f.path.display(),
            kind,
            f.rounds,
            dice,
            f.total_mib,
            f.mib_per_round
        ));
    }
    for r in &report.ratios {
        out.push_str(&format!("{} / first: {:.4}x total MiB\n", r.path.display(), r.total_mib_vs_first));
    }
    out
}
