use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use bbscale::data::{ingest_csv, ChunkedDataset, Schema};
use bbscale::engines::{
    self, time_budgeted_run, write_trace_jsonl, EngineConfig, EngineRun, Method, StopRule, DP_TRUNCATION_EPS,
    MAX_FAILURE_FRACTION, SDBB_RETRY_CAP,
};
use bbscale::simlab::{run_experiment, ExperimentPlan, ExperimentResult};
use bbscale::summaries::{absolute_error_mean, relative_error_cil, relative_error_sd, SummaryRecord, QUANTILE_RULE};
use bbscale::VERSION;

use crate::config::{read_toml, RunConfig};

pub const DEFAULT_OUT: &str = "bbscale-out";

/// How a command ended when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    Partial,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn engine_label(cfg: &EngineConfig, taken: &mut HashSet<String>) -> String {
    let mut label = cfg.method.name().to_lowercase();
    if let Some(g) = cfg.gamma {
        label.push_str(&format!("_g{g}"));
    }
    if let Some(b) = cfg.b {
        label.push_str(&format!("_b{b}"));
    }
    if cfg.dp_alpha > 0.0 {
        label.push_str(&format!("_a{}", cfg.dp_alpha));
    }
    let mut unique = label.clone();
    let mut k = 2;
    while !taken.insert(unique.clone()) {
        unique = format!("{label}_{k}");
        k += 1;
    }
    unique
}

#[derive(Serialize)]
struct ManifestEntry {
    label: String,
    method: String,
    seed: u64,
    status: String,
    artifacts: Vec<String>,
}

#[derive(Serialize)]
struct Manifest {
    version: String,
    config_hash: String,
    runs: Vec<ManifestEntry>,
}

fn describe_functional(cfg: &RunConfig) -> String {
    let f = &cfg.functional;
    let mut rhs: Vec<String> = Vec::new();
    if f.intercept {
        rhs.push("1".into());
    }
    rhs.extend(f.predictors.iter().cloned());
    let mut s = format!("{} {} ~ {}", f.kind.name(), f.outcome, rhs.join(" + "));
    if let Some(g) = &f.group {
        s.push_str(&format!(" | {g} (clusters of {})", f.cluster_size));
    }
    s
}

fn design_flags(cfg: &RunConfig) -> Vec<(&'static str, String)> {
    let mut flags = vec![
        ("quantile rule", QUANTILE_RULE.to_string()),
        (
            "subset size",
            "b = round(n^gamma) clamped to [1, n], unless b is given".into(),
        ),
        (
            "partition remainder",
            "the n mod b units past the last full block are left out".into(),
        ),
        (
            "centering",
            "draws are stored minus the empirical value of the data they used".into(),
        ),
        (
            "scale",
            "the sqrt(n) factor of the centered process is recorded, not applied".into(),
        ),
        ("sdbb retry cap", format!("{SDBB_RETRY_CAP} attempts per draw")),
        (
            "failure abort",
            format!(
                "more than {:.0}% failed draws aborts the run",
                100.0 * MAX_FAILURE_FRACTION
            ),
        ),
        (
            "dp truncation",
            format!("stick-breaking truncated at residual mass {DP_TRUNCATION_EPS:e}"),
        ),
        (
            "mixed weight matrix",
            format!("{:?}", cfg.functional.mixed_weight_matrix).to_lowercase(),
        ),
    ];
    for e in &cfg.engines {
        match e.method {
            Method::Blbb | Method::Bldp => flags.push((
                "blbb summary",
                if e.pool_draws {
                    "pooled draws".into()
                } else {
                    "equal-weight average of per-subset summaries".into()
                },
            )),
            Method::Lossless => flags.push(("lossless batch", format!("{} draws per data pass", e.batch))),
            _ => {}
        }
        if matches!(e.method, Method::Bldp | Method::Sddp) {
            flags.push(("dp base measure", format!("{:?}", e.dp_base).to_lowercase()));
        }
    }
    let mut seen = HashSet::new();
    flags.retain(|(k, v)| seen.insert((*k, v.clone())));
    flags
}

fn run_section(label: &str, run: &EngineRun) -> String {
    let p = &run.summary.provenance;
    let mut s = String::new();
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    let _ = writeln!(s, "[{label}]");
    let _ = writeln!(s, "method: {}", run.method);
    let _ = writeln!(s, "n (units): {}", p.n);
    let _ = writeln!(
        s,
        "b: {}  gamma: {}  s: {}  r: {}  seed: {}",
        p.b,
        opt(p.gamma.map(|g| g.to_string())),
        opt(p.s.map(|v| v.to_string())),
        opt(p.r.map(|v| v.to_string())),
        opt(p.seed.map(|v| v.to_string())),
    );
    if let Some(a) = p.dp_alpha {
        let _ = writeln!(s, "dp alpha: {a}");
    }
    let _ = writeln!(
        s,
        "draws kept: {}  excluded: {}",
        run.summary.n_draws, run.summary.n_excluded
    );
    let _ = writeln!(s, "units completed: {}/{}", run.completed_units, run.planned_units);
    for sk in &run.skipped {
        let _ = writeln!(s, "skipped unit {}: {}", sk.unit, sk.reason);
    }
    for note in &run.summary.notes {
        let _ = writeln!(s, "note: {note}");
    }
    let _ = writeln!(s, "status: {}", if run.is_partial() { "partial" } else { "complete" });
    s
}

fn load_dataset(cfg: &RunConfig) -> Result<ChunkedDataset> {
    let schema = Schema::new(cfg.data.columns.clone())?;
    ingest_csv(&cfg.data.path, &schema, cfg.data.block_size)
        .with_context(|| format!("cannot ingest {}", cfg.data.path.display()))
}

pub fn cmd_run(config_path: &Path, cfg: &RunConfig) -> Result<Outcome> {
    let out = cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let ds = load_dataset(cfg)?;
    let hash = cfg.hash();
    log::info!("{} rows from {}", ds.n_rows(), cfg.data.path.display());

    let mut report = String::new();
    let _ = writeln!(report, "bbscale {VERSION} run report");
    let _ = writeln!(report, "config: {}", config_path.display());
    let _ = writeln!(report, "config hash: {hash}");
    let _ = writeln!(
        report,
        "data: {} ({} rows, block size {})",
        cfg.data.path.display(),
        ds.n_rows(),
        ds.block_size()
    );
    let _ = writeln!(report, "functional: {}", describe_functional(cfg));
    let _ = writeln!(report, "workers: {}", bbscale::exec::current_workers());

    let mut taken = HashSet::new();
    let mut manifest = Manifest {
        version: VERSION.into(),
        config_hash: hash.clone(),
        runs: Vec::new(),
    };
    let (mut ok, mut partial, mut failed) = (0, 0, 0);
    for e in &cfg.engines {
        let label = engine_label(e, &mut taken);
        let result = match e.time_budget {
            Some(t) => time_budgeted_run(&ds, &cfg.functional, e, StopRule::seconds(t), 1),
            None => engines::run(&ds, &cfg.functional, e),
        };
        let _ = writeln!(report);
        let mut entry = ManifestEntry {
            label: label.clone(),
            method: e.method.name().into(),
            seed: e.seed,
            status: String::new(),
            artifacts: Vec::new(),
        };
        match result {
            Ok(mut run) => {
                run.summary.provenance.config_hash = Some(hash.clone());
                let summary_name = format!("summary_{label}.json");
                write_json(&out.join(&summary_name), &run.summary)?;
                let draws_name = format!("draws_{label}.csv");
                let f = File::create(out.join(&draws_name))?;
                run.draws.write_csv(BufWriter::new(f))?;
                entry.artifacts = vec![summary_name, draws_name];
                if !run.trace.is_empty() {
                    let trace_name = format!("trace_{label}.jsonl");
                    write_trace_jsonl(&run.trace, BufWriter::new(File::create(out.join(&trace_name))?))?;
                    entry.artifacts.push(trace_name);
                }
                report.push_str(&run_section(&label, &run));
                if run.is_partial() || !run.skipped.is_empty() {
                    partial += 1;
                    entry.status = "partial".into();
                } else {
                    ok += 1;
                    entry.status = "complete".into();
                }
            }
            Err(err) => {
                log::error!("{label}: {err}");
                let _ = writeln!(report, "[{label}]\nstatus: failed: {err}");
                entry.status = format!("failed: {err}");
                failed += 1;
            }
        }
        manifest.runs.push(entry);
    }

    let _ = writeln!(report, "\ndesign decisions in effect:");
    for (k, v) in design_flags(cfg) {
        let _ = writeln!(report, "  {k}: {v}");
    }
    fs::write(out.join("report.txt"), &report)?;
    write_json(&out.join("manifest.json"), &manifest)?;
    print!("{report}");

    if ok + partial == 0 {
        bail!(
            "every configured engine failed (see {})",
            out.join("report.txt").display()
        );
    }
    Ok(if partial + failed > 0 {
        Outcome::Partial
    } else {
        Outcome::Complete
    })
}

fn print_table(res: &ExperimentResult) {
    println!(
        "{:<8} {:<7} {:>6}  {:<16} {:>9} {:>5}",
        "model", "summary", "gamma", "method", "error", "reps"
    );
    for c in &res.cells {
        let g = c.gamma.map_or("-".to_string(), |g| g.to_string());
        println!(
            "{:<8} {:<7} {:>6}  {:<16} {:>9.4} {:>5}",
            c.model, c.summary, g, c.method, c.error, c.replicates
        );
    }
}

pub fn cmd_simulate(plan_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Outcome> {
    let mut plan: ExperimentPlan = read_toml(plan_path)?;
    if let Some(s) = seed {
        plan.seed = s;
    }
    let dir = out
        .or_else(|| plan.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let res = run_experiment(&plan)?;
    res.write_outputs(&dir)?;
    write_json(&dir.join("plan.json"), &plan)?;
    print_table(&res);
    for f in &res.failures {
        eprintln!("warning: {f}");
    }
    if res.replicates.is_empty() {
        bail!("no replicate completed");
    }
    Ok(if res.failures.is_empty() {
        Outcome::Complete
    } else {
        Outcome::Partial
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub file: String,
    pub method: String,
    pub cil: f64,
    pub sd: f64,
    pub mean_raw: f64,
    pub mean_per_coordinate: f64,
}

pub fn compare_rows(reference: &Path, files: &[PathBuf]) -> Result<Vec<CompareRow>> {
    let load = |p: &Path| -> Result<SummaryRecord> {
        let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
        SummaryRecord::from_json(&text).with_context(|| format!("{} is not a summary record", p.display()))
    };
    let reference_rec = load(reference)?;
    let mut rows = Vec::new();
    for f in files {
        let rec = load(f)?;
        let ctx = || format!("comparing {} with {}", f.display(), reference.display());
        let abs = absolute_error_mean(&rec, &reference_rec).with_context(ctx)?;
        rows.push(CompareRow {
            file: f.display().to_string(),
            method: rec.provenance.method.clone(),
            cil: relative_error_cil(&rec, &reference_rec).with_context(ctx)?,
            sd: relative_error_sd(&rec, &reference_rec).with_context(ctx)?,
            mean_raw: abs.raw,
            mean_per_coordinate: abs.per_coordinate,
        });
    }
    Ok(rows)
}

pub fn cmd_compare(reference: &Path, files: &[PathBuf], out: Option<PathBuf>) -> Result<Outcome> {
    if files.is_empty() {
        bail!("no summary files to compare");
    }
    let rows = compare_rows(reference, files)?;
    println!(
        "{:<40} {:<10} {:>9} {:>9} {:>10} {:>10}",
        "file", "method", "CIL", "SD", "mean L1", "mean/coord"
    );
    for r in &rows {
        println!(
            "{:<40} {:<10} {:>9.4} {:>9.4} {:>10.3e} {:>10.3e}",
            r.file, r.method, r.cil, r.sd, r.mean_raw, r.mean_per_coordinate
        );
    }
    let mut wtr: csv::Writer<Box<dyn std::io::Write>> = match out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            csv::Writer::from_writer(Box::new(File::create(dir.join("errors.csv"))?))
        }
        None => {
            println!();
            csv::Writer::from_writer(Box::new(std::io::stdout()))
        }
    };
    for r in &rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(Outcome::Complete)
}
