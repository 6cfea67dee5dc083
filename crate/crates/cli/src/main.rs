//! `dmpes` command line: validate models, draw panels, match them and run
//! the verification suites.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use dmpes::conditional::{validate_conditional, ConditionalModelFile};
use dmpes::harness::{
    render_json, render_text, write_report_files, ExperimentConfig, RawStats, Suite, VerificationReport,
};
use dmpes::matching::{estimate_metric, run_match, MatchResult};
use dmpes::model::{validate_dmpes, ModelFile, ValidationReport};
use dmpes::sampler::{read_panel_csv, substream, write_panel_csv, Sample};
use dmpes::{Error, Result};

/// Stream key of the random matcher in `dmpes match`.
const MATCH_STREAM: u64 = 0x6d61_7463;

#[derive(Parser)]
#[command(name = "dmpes", version, about = "Affinely invariant matching under DMPES covariate models")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "DMPES_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    All,
    Invariance,
    Thm31,
    Epbr,
    Variance,
    Conditional,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::All => Suite::All,
            SuiteArg::Invariance => Suite::Invariance,
            SuiteArg::Thm31 => Suite::Thm31,
            SuiteArg::Epbr => Suite::Epbr,
            SuiteArg::Variance => Suite::Variance,
            SuiteArg::Conditional => Suite::Conditional,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file (or the model of an experiment config) against the DMPES conditions.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Draw one treated/control panel from an experiment config.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        replication: u64,
    },
    /// Match a panel with one of the config's matchers and print a balance table.
    Match {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        panel: PathBuf,
        /// Pair CSV, sorted by increasing distance.
        #[arg(long)]
        out: PathBuf,
        /// Index into the config's matcher list.
        #[arg(long, default_value_t = 0)]
        matcher: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run a verification suite and write the report files.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Re-render the report files from a saved `raw_stats.json`.
    Report {
        /// Directory holding `raw_stats.json`; the report files are rewritten there.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

enum Failure {
    /// The run completed but some verdict is a failure.
    Verdict,
    Config(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Config(Error::Io(e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = cli.workers;
    let outcome =
        dmpes::harness::with_workers(workers, move || run(cli.command)).map_err(Failure::Config).and_then(|r| r);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verdict) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Validate { config, format } => validate(&config, format),
        Command::Sample { config, out, seed, replication } => sample(&config, out.as_deref(), seed, replication),
        Command::Match { config, panel, out, matcher, seed, format } => {
            match_panel(&config, &panel, &out, matcher, seed, format)
        }
        Command::Verify { config, out, suite, seed, format } => verify(&config, &out, suite.into(), seed, format),
        Command::Report { out, format } => report(&out, format),
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn validate(path: &Path, format: Format) -> std::result::Result<(), Failure> {
    let value = read_json(path)?;
    // An experiment config carries its model under "model".
    let model = value.get("model").cloned().unwrap_or(value);
    let report: ValidationReport = if model.get("special").is_some() {
        let file: ConditionalModelFile = serde_json::from_value(model).map_err(Error::from)?;
        validate_conditional(&file.to_model::<f64>()?)?
    } else {
        let file: ModelFile = serde_json::from_value(model).map_err(Error::from)?;
        validate_dmpes(&file.to_model::<f64>()?)?
    };
    let mut out = io::stdout().lock();
    match format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report).map_err(Error::from)?)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            for c in &report.proportionality {
                w.serialize(c).map_err(Error::from)?;
            }
            w.flush()?;
        }
        Format::Text => {
            for c in &report.proportionality {
                writeln!(
                    out,
                    "covariance {} = {:.6} x covariance {} (relative residual {:.3e})",
                    c.component, c.ratio, c.reference, c.relative_residual
                )?;
            }
            for c in &report.cosines {
                writeln!(out, "discriminants {:?} and {:?}: cosine {:.6}", c.first, c.second, c.cosine)?;
            }
            writeln!(out, "largest center separation: {:.6}", report.center_spread)?;
        }
    }
    if report.is_valid() {
        if format == Format::Text {
            writeln!(out, "model is DMPES")?;
        }
        return Ok(());
    }
    let detail: Vec<String> = report.violations.iter().map(|v| format!("{}: {}", v.condition, v.detail)).collect();
    Err(Error::NotDmpes(detail.join("; ")).into())
}

fn sample(path: &Path, out: Option<&Path>, seed: Option<u64>, replication: u64) -> std::result::Result<(), Failure> {
    let config = load_config(path, seed)?;
    let pop = config.population()?;
    let rule = config.allocation_rule(&pop)?;
    let panel = pop.draw(config.sizes.n_treated, config.sizes.n_control, &rule, config.seed, replication)?;
    match out {
        Some(p) => write_panel_csv(&panel, BufWriter::new(File::create(p)?))?,
        None => write_panel_csv(&panel, io::stdout().lock())?,
    }
    Ok(())
}

/// Mean-gap balance of one design, in pooled standard deviations.
#[derive(Serialize)]
struct BalanceRow {
    design: &'static str,
    n_treated: usize,
    n_control: usize,
    /// Gap along the full-panel discriminant.
    bias_along_z: f64,
    /// Largest gap along any direction uncorrelated with the discriminant.
    max_orthogonal_bias: f64,
}

fn balance_table(panel: &Sample<f64>, result: &MatchResult<f64>) -> Result<Vec<BalanceRow>> {
    let metric = estimate_metric(panel)?;
    let mean = |rows: &DMatrix<f64>, idx: &[usize]| -> DVector<f64> {
        let mut m = DVector::zeros(rows.ncols());
        for &i in idx {
            m += rows.row(i).transpose();
        }
        m / idx.len().max(1) as f64
    };
    let all_t: Vec<usize> = (0..panel.n_treated()).collect();
    let all_c: Vec<usize> = (0..panel.n_control()).collect();
    let gap_all = &metric.whitener * (mean(&panel.treated, &all_t) - mean(&panel.control, &all_c));
    let z = if gap_all.norm() > 0.0 { gap_all.normalize() } else { DVector::zeros(gap_all.len()) };
    let row = |design, t: &[usize], c: &[usize]| {
        let gap = &metric.whitener * (mean(&panel.treated, t) - mean(&panel.control, c));
        let along = z.dot(&gap);
        BalanceRow {
            design,
            n_treated: t.len(),
            n_control: c.len(),
            bias_along_z: along,
            max_orthogonal_bias: (&gap - &z * along).norm(),
        }
    };
    Ok(vec![row("full", &all_t, &all_c), row("matched", &result.treated, &result.control)])
}

/// Pairs reordered by increasing distance (stable, so ties keep matching order).
fn sorted_by_distance(result: &MatchResult<f64>) -> MatchResult<f64> {
    if result.distances.len() != result.treated.len() {
        return result.clone();
    }
    let mut order: Vec<usize> = (0..result.treated.len()).collect();
    order.sort_by(|&a, &b| result.distances[a].total_cmp(&result.distances[b]));
    MatchResult {
        treated: order.iter().map(|&i| result.treated[i]).collect(),
        control: order.iter().map(|&i| result.control[i]).collect(),
        distances: order.iter().map(|&i| result.distances[i]).collect(),
        unmatched_treated: result.unmatched_treated.clone(),
        backfilled: result.backfilled.clone(),
    }
}

fn match_panel(
    config_path: &Path,
    panel_path: &Path,
    out: &Path,
    matcher: usize,
    seed: Option<u64>,
    format: Format,
) -> std::result::Result<(), Failure> {
    let config = load_config(config_path, seed)?;
    let chosen = config.matchers.get(matcher).ok_or_else(|| {
        Error::Config(format!("matcher index {matcher} out of range (config has {})", config.matchers.len()))
    })?;
    let panel = read_panel_csv(File::open(panel_path)?)?;
    let p = config.population()?.dimension();
    if panel.dimension() != p {
        return Err(Error::Dimension { expected: p, found: panel.dimension() }.into());
    }
    let spec = chosen.spec(&config.sizes);
    spec.check_sizes(panel.n_treated(), panel.n_control())?;
    let mut rng = substream(config.seed, &[MATCH_STREAM]);
    let result = sorted_by_distance(&run_match(&panel, &spec, None, &mut rng)?);
    dmpes::matching::write_match_csv(&result, BufWriter::new(File::create(out)?))?;

    let table = balance_table(&panel, &result)?;
    let mut stdout = io::stdout().lock();
    match format {
        Format::Json => writeln!(stdout, "{}", serde_json::to_string_pretty(&table).map_err(Error::from)?)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut stdout);
            for r in &table {
                w.serialize(r).map_err(Error::from)?;
            }
            w.flush()?;
        }
        Format::Text => {
            writeln!(stdout, "matcher: {}", chosen.label())?;
            writeln!(
                stdout,
                "{:<8} {:>9} {:>9} {:>14} {:>20}",
                "design", "treated", "control", "bias along Z", "max orthogonal bias"
            )?;
            for r in &table {
                writeln!(
                    stdout,
                    "{:<8} {:>9} {:>9} {:>14.6} {:>20.6}",
                    r.design, r.n_treated, r.n_control, r.bias_along_z, r.max_orthogonal_bias
                )?;
            }
            if !result.backfilled.is_empty() {
                writeln!(stdout, "backfilled treated rows: {:?}", result.backfilled)?;
            }
        }
    }
    Ok(())
}

fn claims_csv(report: &VerificationReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["claim", "method", "verdict", "checks", "failed"])?;
    for c in &report.claims {
        w.write_record([
            c.claim.clone(),
            c.method.clone().unwrap_or_default(),
            c.verdict.name().to_string(),
            c.checks.to_string(),
            c.failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn emit(raw: &RawStats, dir: &Path, format: Format) -> std::result::Result<(), Failure> {
    let report = raw.report()?;
    write_report_files(&report, dir)?;
    let mut stdout = io::stdout().lock();
    match format {
        Format::Json => stdout.write_all(render_json(&report)?.as_bytes())?,
        Format::Csv => claims_csv(&report, &mut stdout)?,
        Format::Text => stdout.write_all(render_text(&report).as_bytes())?,
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verdict)
    }
}

fn verify(
    path: &Path,
    out: &Path,
    suite: Suite,
    seed: Option<u64>,
    format: Format,
) -> std::result::Result<(), Failure> {
    let config = load_config(path, seed)?;
    let raw = RawStats::collect(&config, suite)?;
    std::fs::create_dir_all(out)?;
    raw.write(&out.join("raw_stats.json"))?;
    emit(&raw, out, format)
}

fn report(dir: &Path, format: Format) -> std::result::Result<(), Failure> {
    let raw = RawStats::read(&dir.join("raw_stats.json"))?;
    emit(&raw, dir, format)
}
