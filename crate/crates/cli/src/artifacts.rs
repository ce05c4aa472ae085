//! Everything a run leaves on disk — report.json, metrics.csv,
//! contribution.log, summary.txt — plus the compare and inspect renderings.
//! All output is locale-independent and stable-ordered so identical runs
//! produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use fedobd_core::{ContributionLogEntry, Phase, RoundRecord, RunOutput, RunReport};

use crate::CliError;

const BYTES_PER_MB: f64 = 1_000_000.0;
const SECS_PER_HOUR: f64 = 3600.0;

pub fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

/// Write the full artifact set for one run into `dir`.
pub fn write_run(dir: &Path, output: &RunOutput) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))?;

    let mut report_json = serde_json::to_string_pretty(&output.report)
        .map_err(|e| CliError::runtime(format!("encoding report: {e}")))?;
    report_json.push('\n');
    write_file(&dir.join("report.json"), &report_json)?;

    write_file(&dir.join("metrics.csv"), &metrics_csv(&output.report))?;

    let mut log = String::new();
    for entry in &output.contributions {
        let line = serde_json::to_string(entry)
            .map_err(|e| CliError::runtime(format!("encoding contribution entry: {e}")))?;
        log.push_str(&line);
        log.push('\n');
    }
    write_file(&dir.join(&output.report.contribution_log), &log)?;

    write_file(&dir.join("summary.txt"), &summary_text(&output.report))
}

pub fn phase_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Init => "init",
        Phase::Stage1 => "stage1",
        Phase::Stage2 => "stage2",
    }
}

fn round_totals(record: &RoundRecord) -> (u64, u64) {
    (
        record.upload_bytes.values().sum(),
        record.download_bytes.values().sum(),
    )
}

/// Per-round table: totals across clients plus the global-model metrics.
pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from("round,phase,upload_bytes,download_bytes,loss,accuracy,macro_f1\n");
    for record in &report.rounds {
        let (up, down) = round_totals(record);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            record.round,
            phase_name(record.phase),
            up,
            down,
            record.metrics.loss,
            record.metrics.accuracy,
            record.metrics.macro_f1,
        );
    }
    out
}

pub fn summary_text(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "algorithm: {}", report.algorithm);
    let _ = writeln!(out, "clients: {}", report.n_clients);
    let _ = writeln!(out, "lambda: {}", report.lambda);
    match report.quant_weight {
        Some(w) => {
            let _ = writeln!(out, "quantization weight: {w}");
        }
        None => {
            let _ = writeln!(out, "quantization: off");
        }
    }
    let training_rounds = report.rounds.len().saturating_sub(1);
    let _ = writeln!(out, "rounds: {training_rounds} (plus the initial distribution)");
    let _ = writeln!(
        out,
        "total upload: {} bytes ({:.2} MB)",
        report.total_upload_bytes,
        report.total_upload_bytes as f64 / BYTES_PER_MB
    );
    let _ = writeln!(
        out,
        "total download: {} bytes ({:.2} MB)",
        report.total_download_bytes,
        report.total_download_bytes as f64 / BYTES_PER_MB
    );
    let _ = writeln!(
        out,
        "total transferred: {} bytes ({:.2} MB)",
        report.total_bytes,
        report.total_bytes as f64 / BYTES_PER_MB
    );
    if let Some(secs) = report.wall_clock_secs {
        let _ = writeln!(
            out,
            "estimated transfer time at the configured bandwidth: {:.2} hours ({secs:.1} s)",
            secs / SECS_PER_HOUR
        );
    }
    let _ = writeln!(out, "final loss: {:.4}", report.final_metrics.loss);
    let _ = writeln!(out, "final accuracy: {:.4}", report.final_metrics.accuracy);
    let _ = writeln!(out, "final macro-F1: {:.4}", report.final_metrics.macro_f1);
    let _ = writeln!(out, "contribution log: {}", report.contribution_log);
    out
}

/// Comparison rows in variant order; the first row is the baseline that
/// reductions are measured against.
fn comparison_rows(rows: &[(String, RunReport)]) -> Vec<[String; 6]> {
    let baseline = rows[0].1.total_bytes as f64;
    rows.iter()
        .map(|(name, report)| {
            let reduction = if baseline > 0.0 {
                (baseline - report.total_bytes as f64) / baseline * 100.0
            } else {
                0.0
            };
            [
                name.clone(),
                report.algorithm.to_string(),
                report.total_bytes.to_string(),
                format!("{:.2}", report.total_bytes as f64 / BYTES_PER_MB),
                format!("{reduction:.2}"),
                format!("{:.4}", report.final_metrics.accuracy),
            ]
        })
        .collect()
}

const COMPARISON_HEADER: [&str; 6] =
    ["variant", "algorithm", "total_bytes", "total_mb", "reduction_pct", "final_accuracy"];

pub fn comparison_csv(rows: &[(String, RunReport)]) -> String {
    let mut out = COMPARISON_HEADER.join(",");
    out.push('\n');
    for row in comparison_rows(rows) {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn comparison_text(rows: &[(String, RunReport)]) -> String {
    let data = comparison_rows(rows);
    let mut widths: Vec<usize> = COMPARISON_HEADER.iter().map(|h| h.len()).collect();
    for row in &data {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let render = |cells: &[String], widths: &[usize], out: &mut String| {
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{cell:<w$}");
        }
        // Trailing alignment spaces would make the file contents depend on
        // the last column's width; strip them.
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    let header: Vec<String> = COMPARISON_HEADER.iter().map(|s| s.to_string()).collect();
    render(&header, &widths, &mut out);
    for row in &data {
        render(row, &widths, &mut out);
    }
    out
}

/// Cumulative importance of every block that was ever retained: the sum of
/// its score over the entries that kept it, with how often it was kept.
pub fn cumulative_importance(
    entries: &[ContributionLogEntry],
) -> Vec<(String, f64, u32)> {
    let mut cumulative: BTreeMap<String, (f64, u32)> = BTreeMap::new();
    for entry in entries {
        for id in &entry.retained {
            if let Some(score) = entry.scores.iter().find(|s| &s.block_id == id) {
                let slot = cumulative.entry(id.to_string()).or_insert((0.0, 0));
                slot.0 += score.mbd;
                slot.1 += 1;
            }
        }
    }
    let mut rows: Vec<(String, f64, u32)> =
        cumulative.into_iter().map(|(id, (mbd, n))| (id, mbd, n)).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows
}

pub fn inspect_text(
    report: &RunReport,
    entries: &[ContributionLogEntry],
    top: usize,
) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} run, seed {}, {} clients, lambda {}",
        report.algorithm, report.seed, report.n_clients, report.lambda
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>5}  {:<6}  {:>12}  {:>14}  {:>8}  {:>8}  {:>8}",
        "round", "phase", "upload_bytes", "download_bytes", "loss", "acc", "f1"
    );
    for record in &report.rounds {
        let (up, down) = round_totals(record);
        let _ = writeln!(
            out,
            "{:>5}  {:<6}  {:>12}  {:>14}  {:>8.4}  {:>8.4}  {:>8.4}",
            record.round,
            phase_name(record.phase),
            up,
            down,
            record.metrics.loss,
            record.metrics.accuracy,
            record.metrics.macro_f1,
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "totals: {} bytes up, {} bytes down, {} overall",
        report.total_upload_bytes, report.total_download_bytes, report.total_bytes
    );

    let _ = writeln!(out);
    if entries.is_empty() {
        let _ = writeln!(out, "no dropout decisions recorded");
    } else {
        let rows = cumulative_importance(entries);
        let shown = rows.len().min(top);
        let _ = writeln!(out, "top {shown} retained blocks by cumulative importance:");
        let _ = writeln!(out, "{:>4}  {:<24}  {:>15}  {:>8}", "rank", "block", "cumulative_mbd", "kept");
        for (rank, (id, mbd, kept)) in rows.iter().take(top).enumerate() {
            let _ = writeln!(out, "{:>4}  {:<24}  {:>15.6}  {:>8}", rank + 1, id, mbd, kept);
        }
    }
    out
}
