//! Simulation designs and the experiment harness.
//!
//! Predictors are an intercept followed by iid Student-t(3) columns; the
//! coefficient vector defaults to all ones.
//!
//! * linear: `y = u'beta + e`, `e ~ SkewNormal(-0.71, 1, 2)` (mean about 0);
//! * logistic: `y ~ Bernoulli(p)`, `p = 1 / (1 + exp(-0.01 u'beta + 0.25))`;
//! * mixed: clusters of 3 rows, `y = a_j + u'beta + e`, with
//!   `a_j ~ SkewNormal(-0.71, 1, 2)` and `e ~ t(3)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::data::{self, ChunkedDataset, ColumnSpec, Partition, Schema};
use crate::engines::{self, EngineConfig, Method, StopRule};
use crate::exec;
use crate::functionals::FunctionalSpec;
use crate::rng::{sample_skew_normal, sample_student_t, SeedSpec, StreamTag};
use crate::summaries::{absolute_error_mean, relative_error_cil, relative_error_sd, SummaryRecord};
use crate::{Error, Result};

pub const SKEW_LOCATION: f64 = -0.71;
pub const SKEW_SCALE: f64 = 1.0;
pub const SKEW_SLANT: f64 = 2.0;
pub const T_DF: f64 = 3.0;
pub const LOGIT_SCALE: f64 = 0.01;
pub const LOGIT_OFFSET: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Linear,
    Logistic,
    Mixed,
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Linear => "linear",
            Model::Logistic => "logistic",
            Model::Mixed => "mixed",
        }
    }
}

fn default_cluster_size() -> usize {
    3
}

/// One simulated design. For the mixed model `n` counts clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub model: Model,
    pub n: usize,
    /// Predictors besides the intercept.
    pub p: usize,
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cluster_size")]
    pub cluster_size: usize,
}

impl DgpSpec {
    pub fn new(model: Model, n: usize, p: usize, seed: u64) -> Self {
        Self {
            model,
            n,
            p,
            beta0: None,
            seed,
            cluster_size: default_cluster_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 1 {
            return Err(Error::Config("dgp.p must be at least 1".into()));
        }
        if self.n < self.p + 2 {
            return Err(Error::Config(format!("dgp.n must be at least p + 2 = {}", self.p + 2)));
        }
        if let Some(b) = &self.beta0 {
            if b.len() != self.p + 1 {
                return Err(Error::Config(format!(
                    "dgp.beta0 has {} entries, expected p + 1 = {}",
                    b.len(),
                    self.p + 1
                )));
            }
        }
        if self.model == Model::Mixed && self.cluster_size < 1 {
            return Err(Error::Config("dgp.cluster_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn beta(&self) -> Vec<f64> {
        self.beta0.clone().unwrap_or_else(|| vec![1.0; self.p + 1])
    }

    pub fn predictor_names(&self) -> Vec<String> {
        (1..=self.p).map(|j| format!("x{j}")).collect()
    }

    /// The functional fitted to this design.
    pub fn functional(&self) -> FunctionalSpec {
        let names = self.predictor_names();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        match self.model {
            Model::Linear => FunctionalSpec::linear("y", &refs),
            Model::Logistic => FunctionalSpec::logistic("y", &refs),
            Model::Mixed => FunctionalSpec {
                cluster_size: self.cluster_size,
                ..FunctionalSpec::mixed("y", &refs, "g")
            },
        }
    }

    pub fn schema(&self) -> Schema {
        let mut cols = vec![ColumnSpec::numeric("y")];
        cols.extend(self.predictor_names().into_iter().map(ColumnSpec::numeric));
        if self.model == Model::Mixed {
            cols.push(ColumnSpec::group_id("g"));
        }
        Schema(cols)
    }
}

/// Simulate a dataset (held in memory). Columns: `y`, `x1..xp` and, for the
/// mixed model, the cluster id `g`.
pub fn generate(dgp: &DgpSpec) -> Result<ChunkedDataset> {
    dgp.validate()?;
    let beta = dgp.beta();
    let mut rng = SeedSpec::derive(dgp.seed, StreamTag::Dgp, 0, 0).rng();
    let (clusters, m) = match dgp.model {
        Model::Mixed => (dgp.n, dgp.cluster_size),
        _ => (dgp.n, 1),
    };
    let width = dgp.p + 1 + usize::from(dgp.model == Model::Mixed);
    let mut values = Vec::with_capacity(clusters * m * width);
    let mut x = vec![0.0; dgp.p];
    for j in 0..clusters {
        let alpha = match dgp.model {
            Model::Mixed => sample_skew_normal(SKEW_LOCATION, SKEW_SCALE, SKEW_SLANT, &mut rng)?,
            _ => 0.0,
        };
        for _ in 0..m {
            for v in x.iter_mut() {
                *v = sample_student_t(T_DF, &mut rng)?;
            }
            let lin = beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            let y = match dgp.model {
                Model::Linear => lin + sample_skew_normal(SKEW_LOCATION, SKEW_SCALE, SKEW_SLANT, &mut rng)?,
                Model::Logistic => {
                    let p = 1.0 / (1.0 + (-LOGIT_SCALE * lin + LOGIT_OFFSET).exp());
                    f64::from(u8::from(rand::Rng::random::<f64>(&mut rng) < p))
                }
                Model::Mixed => alpha + lin + sample_student_t(T_DF, &mut rng)?,
            };
            values.push(y);
            values.extend_from_slice(&x);
            if dgp.model == Model::Mixed {
                values.push(j as f64);
            }
        }
    }
    ChunkedDataset::from_row_major(dgp.schema(), values, data::DEFAULT_BLOCK_SIZE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMethod {
    #[serde(alias = "BB")]
    Bb,
    #[serde(alias = "BLBB")]
    Blbb,
    #[serde(alias = "SDBB")]
    Sdbb,
    #[serde(alias = "LOSSLESS")]
    Lossless,
    #[serde(alias = "BLDP")]
    Bldp,
    #[serde(alias = "SDDP")]
    Sddp,
    #[serde(alias = "AN")]
    An,
    #[serde(alias = "ANS")]
    Ans,
}

impl PlanMethod {
    pub fn name(&self) -> &'static str {
        match self.engine() {
            Some(m) => m.name(),
            None if *self == PlanMethod::An => "AN",
            None => "ANS",
        }
    }

    fn engine(&self) -> Option<Method> {
        Some(match self {
            PlanMethod::Bb => Method::Bb,
            PlanMethod::Blbb => Method::Blbb,
            PlanMethod::Sdbb => Method::Sdbb,
            PlanMethod::Lossless => Method::Lossless,
            PlanMethod::Bldp => Method::Bldp,
            PlanMethod::Sddp => Method::Sddp,
            PlanMethod::An | PlanMethod::Ans => return None,
        })
    }
}

fn default_method_r() -> usize {
    100
}

fn default_batch() -> usize {
    100
}

/// One compared method. `r` is draws per subset for BLBB/BLDP and total
/// draws otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodPlan {
    pub method: PlanMethod,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub b: Option<usize>,
    #[serde(default = "default_method_r")]
    pub r: usize,
    #[serde(default)]
    pub s: Option<usize>,
    #[serde(default)]
    pub dp_alpha: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

impl MethodPlan {
    pub fn new(method: PlanMethod, gamma: Option<f64>, r: usize) -> Self {
        Self {
            method,
            gamma,
            b: None,
            r,
            s: None,
            dp_alpha: 0.0,
            batch: default_batch(),
        }
    }

    /// Short identifier, e.g. `blbb_g0.8`.
    pub fn label(&self) -> String {
        let mut l = self.method.name().to_lowercase();
        if let Some(g) = self.gamma {
            l.push_str(&format!("_g{g}"));
        }
        if let Some(b) = self.b {
            l.push_str(&format!("_b{b}"));
        }
        l
    }

    fn engine_config(&self, method: Method, seed: u64) -> EngineConfig {
        EngineConfig {
            gamma: self.gamma,
            b: self.b,
            r: self.r,
            s: self.s,
            dp_alpha: self.dp_alpha,
            batch: self.batch,
            seed,
            ..EngineConfig::new(method)
        }
    }
}

fn default_replicates() -> usize {
    20
}

fn default_reference_r() -> usize {
    1000
}

fn default_trace_every() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// A full simulation study: replicated datasets, a BB reference per
/// dataset, and the methods compared against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub dgp: DgpSpec,
    #[serde(default)]
    pub methods: Vec<MethodPlan>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Draws of the reference BB.
    #[serde(default = "default_reference_r")]
    pub reference_r: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// When set, replicate 0 of every engine method is also run under this
    /// wall-clock budget (seconds) to record an error-versus-time trace.
    #[serde(default)]
    pub trace_budget: Option<f64>,
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl ExperimentPlan {
    pub fn new(dgp: DgpSpec, methods: Vec<MethodPlan>, replicates: usize) -> Self {
        Self {
            dgp,
            methods,
            replicates,
            reference_r: default_reference_r(),
            seed: 0,
            out_dir: None,
            trace_budget: None,
            trace_every: default_trace_every(),
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.replicates < 1 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.reference_r < 2 {
            return Err(Error::Config("reference_r must be at least 2".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if let Some(engine) = m.method.engine() {
                m.engine_config(engine, 0)
                    .validate()
                    .map_err(|e| Error::Config(format!("methods[{i}]: {e}")))?;
            } else if m.method == PlanMethod::Ans && m.gamma.is_none() && m.b.is_none() {
                return Err(Error::Config(format!("methods[{i}]: ANS needs gamma or b")));
            }
        }
        if let Some(t) = self.trace_budget {
            if !(t > 0.0) {
                return Err(Error::Config("trace_budget must be positive".into()));
            }
        }
        Ok(())
    }

    fn replicate_seed(&self, replicate: usize) -> u64 {
        SeedSpec::derive(self.seed, StreamTag::Dgp, 0, replicate as u64).stream_id
    }

    /// Seed of method `slot` (0 = reference) on `replicate`.
    fn method_seed(&self, slot: usize, replicate: usize) -> u64 {
        SeedSpec::derive(self.seed, StreamTag::Replicate, slot as u64, replicate as u64).stream_id
    }
}

/// Errors of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateErrors {
    pub replicate: usize,
    pub method: String,
    pub gamma: Option<f64>,
    pub label: String,
    pub cil: f64,
    pub sd: f64,
    pub mean_raw: f64,
    pub mean_per_coordinate: f64,
    pub n_draws: usize,
    pub n_excluded: usize,
}

/// One cell of the error table, averaged over successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub model: String,
    /// `CIL`, `SD` or `Mean`.
    pub summary: String,
    pub gamma: Option<f64>,
    pub method: String,
    pub error: f64,
    pub replicates: usize,
}

/// Error of a running summary at one checkpoint of a budgeted run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub unit: usize,
    pub elapsed_secs: f64,
    pub draws: usize,
    pub cil: Option<f64>,
    pub sd: Option<f64>,
    pub mean_per_coordinate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model: String,
    pub cells: Vec<TableCell>,
    pub replicates: Vec<ReplicateErrors>,
    pub failures: Vec<String>,
    /// `(label, points)` per traced method.
    pub traces: Vec<(String, Vec<TracePoint>)>,
}

impl ExperimentResult {
    pub fn cell(&self, summary: &str, method: &str, gamma: Option<f64>) -> Option<&TableCell> {
        self.cells
            .iter()
            .find(|c| c.summary == summary && c.method == method && c.gamma == gamma)
    }

    pub fn write_table_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["model", "summary", "gamma", "method", "error", "replicates"])?;
        for c in &self.cells {
            wtr.write_record([
                c.model.clone(),
                c.summary.clone(),
                c.gamma.map_or(String::new(), |g| g.to_string()),
                c.method.clone(),
                format!("{}", c.error),
                c.replicates.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// `table1.csv` and one `trace_<label>.jsonl` per traced method.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_table_csv(BufWriter::new(File::create(dir.join("table1.csv"))?))?;
        for (label, points) in &self.traces {
            let mut f = BufWriter::new(File::create(dir.join(format!("trace_{label}.jsonl")))?);
            for p in points {
                serde_json::to_writer(&mut f, p)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

struct Compared {
    label: String,
    method: String,
    gamma: Option<f64>,
    summary: SummaryRecord,
}

fn errors_against(replicate: usize, c: &Compared, reference: &SummaryRecord) -> Result<ReplicateErrors> {
    let abs = absolute_error_mean(&c.summary, reference)?;
    Ok(ReplicateErrors {
        replicate,
        method: c.method.clone(),
        gamma: c.gamma,
        label: c.label.clone(),
        cil: relative_error_cil(&c.summary, reference)?,
        sd: relative_error_sd(&c.summary, reference)?,
        mean_raw: abs.raw,
        mean_per_coordinate: abs.per_coordinate,
        n_draws: c.summary.n_draws,
        n_excluded: c.summary.n_excluded,
    })
}

fn run_method(ds: &ChunkedDataset, spec: &FunctionalSpec, m: &MethodPlan, seed: u64) -> Result<SummaryRecord> {
    match m.method.engine() {
        Some(engine) => Ok(engines::run(ds, spec, &m.engine_config(engine, seed))?.summary),
        None if m.method == PlanMethod::An => baselines::an_summary(ds, spec),
        None => {
            let n = data::n_units(ds, spec)?;
            let cfg = m.engine_config(Method::Blbb, seed);
            let b = cfg.subset_size(n)?;
            let mut rng = SeedSpec::derive(seed, StreamTag::Partition, 0, 0).rng();
            let partition = Partition::new(n, b, &mut rng)?;
            let s = m.s.unwrap_or(partition.len()).min(partition.len());
            let subsets: Vec<_> = (0..s).map(|j| partition.subset(j)).collect();
            baselines::ans_summary(ds, spec, &subsets)
        }
    }
}

type ReplicateOutput = (Vec<ReplicateErrors>, Vec<String>, Vec<(String, Vec<TracePoint>)>);

fn run_replicate(plan: &ExperimentPlan, rep: usize) -> Result<ReplicateOutput> {
    let dgp = DgpSpec {
        seed: plan.replicate_seed(rep),
        ..plan.dgp.clone()
    };
    let ds = generate(&dgp)?;
    let spec = dgp.functional();
    let reference_cfg = EngineConfig {
        r: plan.reference_r,
        seed: plan.method_seed(0, rep),
        ..EngineConfig::new(Method::Bb)
    };
    let reference = engines::run(&ds, &spec, &reference_cfg)?.summary;
    let mut rows = vec![errors_against(
        rep,
        &Compared {
            label: "bb_reference".into(),
            method: "BB (reference)".into(),
            gamma: None,
            summary: reference.clone(),
        },
        &reference,
    )?];
    let mut failures = Vec::new();
    for (i, m) in plan.methods.iter().enumerate() {
        let seed = plan.method_seed(i + 1, rep);
        match run_method(&ds, &spec, m, seed) {
            Ok(summary) => {
                let c = Compared {
                    label: m.label(),
                    method: m.method.name().into(),
                    gamma: m.gamma,
                    summary,
                };
                match errors_against(rep, &c, &reference) {
                    Ok(e) => rows.push(e),
                    Err(e) => failures.push(format!("replicate {rep}, {}: {e}", m.label())),
                }
            }
            Err(e) => {
                log::warn!("replicate {rep}, {}: {e}", m.label());
                failures.push(format!("replicate {rep}, {}: {e}", m.label()));
            }
        }
    }
    let mut traces = Vec::new();
    if let (Some(budget), 0) = (plan.trace_budget, rep) {
        for (i, m) in plan.methods.iter().enumerate() {
            let Some(engine) = m.method.engine() else { continue };
            let cfg = m.engine_config(engine, plan.method_seed(i + 1, rep));
            match engines::time_budgeted_run(&ds, &spec, &cfg, StopRule::seconds(budget), plan.trace_every) {
                Ok(run) => {
                    let points = run
                        .trace
                        .iter()
                        .map(|c| TracePoint {
                            unit: c.unit,
                            elapsed_secs: c.elapsed_secs,
                            draws: c.draws,
                            cil: c.summary.as_ref().and_then(|s| relative_error_cil(s, &reference).ok()),
                            sd: c.summary.as_ref().and_then(|s| relative_error_sd(s, &reference).ok()),
                            mean_per_coordinate: c
                                .summary
                                .as_ref()
                                .and_then(|s| absolute_error_mean(s, &reference).ok())
                                .map(|e| e.per_coordinate),
                        })
                        .collect();
                    traces.push((m.label(), points));
                }
                Err(e) => failures.push(format!("trace {}: {e}", m.label())),
            }
        }
    }
    Ok((rows, failures, traces))
}

/// Run every replicate (in parallel), compare each method with the
/// replicate's BB reference, and average the errors per method.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentResult> {
    plan.validate()?;
    let outputs = exec::map_indexed(plan.replicates, plan.parallel, |rep| run_replicate(plan, rep));
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    let mut traces = Vec::new();
    for (rep, out) in outputs.into_iter().enumerate() {
        match out {
            Ok((rows, f, t)) => {
                replicates.extend(rows);
                failures.extend(f);
                traces.extend(t);
            }
            Err(e) => {
                log::warn!("replicate {rep} failed: {e}");
                failures.push(format!("replicate {rep}: {e}"));
            }
        }
    }
    let model = plan.dgp.model.name().to_string();
    let mut labels: Vec<(String, String, Option<f64>)> = vec![("bb_reference".into(), "BB (reference)".into(), None)];
    for m in &plan.methods {
        let key = (m.label(), m.method.name().to_string(), m.gamma);
        if !labels.contains(&key) {
            labels.push(key);
        }
    }
    let mut cells = Vec::new();
    for summary in ["CIL", "SD", "Mean"] {
        for (label, method, gamma) in &labels {
            let vals: Vec<f64> = replicates
                .iter()
                .filter(|r| &r.label == label)
                .map(|r| match summary {
                    "CIL" => r.cil,
                    "SD" => r.sd,
                    _ => r.mean_per_coordinate,
                })
                .collect();
            if vals.is_empty() {
                continue;
            }
            cells.push(TableCell {
                model: model.clone(),
                summary: summary.into(),
                gamma: *gamma,
                method: method.clone(),
                error: vals.iter().sum::<f64>() / vals.len() as f64,
                replicates: vals.len(),
            });
        }
    }
    let result = ExperimentResult {
        model,
        cells,
        replicates,
        failures,
        traces,
    };
    if let Some(dir) = &plan.out_dir {
        result.write_outputs(dir)?;
    }
    Ok(result)
}
