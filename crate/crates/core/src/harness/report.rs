//! Raw statistics files and report rendering.
//!
//! A report is a pure function of the raw statistics file, so re-rendering
//! from `raw_stats.json` reproduces every output byte for byte.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{invariance_section, run_experiment, InvarianceResult, ReplicationStats};
use super::verify::{verify_all, Suite, Verdict, VerificationReport};
use crate::error::{Error, Result};

pub const RAW_STATS_VERSION: u32 = 1;

/// Everything a report is computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawStats {
    pub version: u32,
    pub config: ExperimentConfig,
    pub suite: Suite,
    pub replication: ReplicationStats,
    pub invariance: Vec<InvarianceResult>,
}

impl RawStats {
    /// Runs whatever the selected suite needs.
    pub fn collect(config: &ExperimentConfig, suite: Suite) -> Result<Self> {
        config.validate()?;
        let replication =
            if suite.needs_replications() { run_experiment(config)? } else { ReplicationStats::default() };
        let invariance = if suite.needs_invariance() { invariance_section(config)? } else { Vec::new() };
        Ok(RawStats { version: RAW_STATS_VERSION, config: config.clone(), suite, replication, invariance })
    }

    pub fn report(&self) -> Result<VerificationReport> {
        verify_all(&self.config, self.suite, &self.replication, &self.invariance)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw: RawStats = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if raw.version != RAW_STATS_VERSION {
            return Err(Error::Config(format!("raw statistics version {} is not supported", raw.version)));
        }
        Ok(raw)
    }
}

pub fn render_json(report: &VerificationReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4e}")
    } else {
        format!("{x}")
    }
}

/// Fixed-width claim table with a summary line.
pub fn render_text(report: &VerificationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "verification report: {}", report.name);
    let _ = writeln!(
        s,
        "seed {}, replications {}, bootstrap {}, suite {}",
        report.seed,
        report.replications,
        report.bootstrap,
        report.suite.name()
    );
    let _ = writeln!(
        s,
        "tolerance: {} standard errors, exact floor {}",
        report.tolerance.se_multiplier,
        num(report.tolerance.exact_floor)
    );
    let _ = writeln!(s);
    let _ =
        writeln!(s, "{:<10} {:<32} {:<28} {:>6} {:>6}  worst check", "verdict", "claim", "method", "checks", "failed");
    for c in &report.claims {
        let worst = c.worst.as_ref().map_or(String::new(), |w| {
            format!(
                "{}: estimate {} reference {} se {} allowed {}",
                w.label,
                num(w.estimate),
                num(w.reference),
                num(w.se),
                num(w.allowed)
            )
        });
        let _ = writeln!(
            s,
            "{:<10} {:<32} {:<28} {:>6} {:>6}  {}",
            c.verdict.name(),
            c.claim,
            c.method.as_deref().unwrap_or("-"),
            c.checks,
            c.failed,
            worst
        );
        if !c.note.is_empty() && c.verdict != Verdict::Skipped {
            let _ = writeln!(s, "{:<10} {}", "", c.note);
        }
    }
    let count = |v: Verdict| report.claims.iter().filter(|c| c.verdict == v).count();
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "summary: {} pass, {} fail, {} degenerate, {} not applicable, {} skipped",
        count(Verdict::Pass),
        count(Verdict::Fail),
        count(Verdict::Degenerate),
        count(Verdict::NotApplicable),
        count(Verdict::Skipped)
    );
    let _ = writeln!(s, "result: {}", if report.passed() { "PASS" } else { "FAIL" });
    s
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json`, `report.txt` and the plot-data CSVs into `dir`.
pub fn write_report_files(report: &VerificationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join("report.json");
    std::fs::write(&json, render_json(report)?)?;
    let text = dir.join("report.txt");
    std::fs::write(&text, render_text(report))?;
    let directions = dir.join("directions.csv");
    write_csv(&report.directions, &directions)?;
    let components = dir.join("components.csv");
    write_csv(&report.components, &components)?;
    let fits = dir.join("fits.csv");
    write_csv(&report.fits, &fits)?;
    Ok(vec![json, text, directions, components, fits])
}
