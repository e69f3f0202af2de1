use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::commands::{write, LAYERS_FILE, TELEMETRY_FILE};
use crate::error::{Error, Result};
use crate::pruner::{parse_telemetry, TelemetryRow};

/// Files written by [`cmd_report`].
pub const REPORT_FILES: [&str; 4] = ["pi.csv", "churn.csv", "pmu.csv", "report.md"];

/// What [`cmd_report`] found in the run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub groups: usize,
    pub rows: usize,
    /// First step at which widths were frozen.
    pub freeze_step: Option<usize>,
}

fn pi_csv(groups: usize, rows: &[TelemetryRow]) -> String {
    let mut s = String::from("step");
    for g in 0..groups {
        write!(s, ",pi_{g}").unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(s, "{}", r.step).unwrap();
        for p in &r.pi {
            write!(s, ",{p}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn churn_csv(rows: &[TelemetryRow]) -> String {
    let mut s = String::from("step,churn_pct,frozen\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.step, r.churn_pct, r.frozen as u8).unwrap();
    }
    s
}

fn pmu_csv(rows: &[TelemetryRow]) -> String {
    let mut s = String::from("step,pmu_precise,pmu_imprecise\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.step, r.pmu_precise, r.pmu_imprecise).unwrap();
    }
    s
}

fn markdown(rows: &[TelemetryRow], layers: Option<&str>) -> String {
    let mut s = String::from("# Pruning report\n\n");
    match (rows.first(), rows.last()) {
        (Some(first), Some(last)) => {
            s += "| metric | first interval | last interval |\n|---|---|---|\n";
            for (name, a, b) in [
                ("peak memory (B)", first.pmu_precise, last.pmu_precise),
                (
                    "per-operator peak (B)",
                    first.pmu_imprecise,
                    last.pmu_imprecise,
                ),
                ("model size (B)", first.size_bytes, last.size_bytes),
                ("MACs", first.macs, last.macs),
            ] {
                writeln!(s, "| {name} | {a} | {b} |").unwrap();
            }
            let freeze = rows.iter().find(|r| r.frozen).map(|r| r.step);
            writeln!(
                s,
                "\nintervals: {}; widths frozen at step {}",
                rows.len(),
                freeze.map_or("-".into(), |v| v.to_string())
            )
            .unwrap();
        }
        _ => s += "No pruning intervals were recorded.\n",
    }
    if let Some(text) = layers {
        s += "\n## Layers\n\n| layer | kind | channels | params | MACs | working set (B) |\n|---|---|---|---|---|---|\n";
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                continue;
            }
            writeln!(
                s,
                "| {} | {} | {} → {} | {} → {} | {} → {} | {} → {} |",
                f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8], f[9], f[10]
            )
            .unwrap();
        }
    }
    s
}

/// Turns a run directory's telemetry into tidy CSV series (widths, mask
/// churn, precise and per-operator PMU) and a markdown summary including the
/// per-layer before/after table. A missing or empty telemetry file yields
/// header-only tables.
pub fn cmd_report(run_dir: &Path, out_dir: &Path) -> Result<ReportSummary> {
    let tpath = run_dir.join(TELEMETRY_FILE);
    let text = match fs::read_to_string(&tpath) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(&tpath, e)),
    };
    let (groups, rows) = parse_telemetry(&text)?;
    let lpath = run_dir.join(LAYERS_FILE);
    let layers = fs::read_to_string(&lpath).ok();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join("pi.csv"), &pi_csv(groups, &rows))?;
    write(&out_dir.join("churn.csv"), &churn_csv(&rows))?;
    write(&out_dir.join("pmu.csv"), &pmu_csv(&rows))?;
    write(
        &out_dir.join("report.md"),
        &markdown(&rows, layers.as_deref()),
    )?;
    Ok(ReportSummary {
        groups,
        rows: rows.len(),
        freeze_step: rows.iter().find(|r| r.frozen).map(|r| r.step),
    })
}
