//! Posterior-sampling drivers.
//!
//! | method     | data touched per work item            | work item |
//! |------------|---------------------------------------|-----------|
//! | `BB`       | all units, Dirichlet(1, ..., 1)       | one draw  |
//! | `BLBB`     | one partition block, Dirichlet(n / b) | one subset, `r` draws |
//! | `SDBB`     | a fresh uniform subsample of size `b` | one draw  |
//! | `LOSSLESS` | every unit once, Gamma(1) per draw    | one batch of `B` draws |
//! | `BLDP`, `SDDP` | as BLBB / SDBB plus prior atoms   | as BLBB / SDBB |
//!
//! Work items draw from their own random stream, derived from the master seed
//! and the item index, and results are reduced in index order, so output is
//! identical for any worker count. Draws are stored centered (at the
//! empirical value of the data they were drawn on) and without the `sqrt(n)`
//! factor, which is recorded in the provenance instead.

mod bb;
mod blbb;
mod budget;
mod dp;
mod lossless;
mod sdbb;

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, ChunkedDataset};
use crate::functionals::FunctionalSpec;
use crate::summaries::{Provenance, SummaryRecord};
use crate::{Error, Result};

pub use budget::{time_budgeted_run, write_trace_jsonl, Checkpoint, StopRule};
pub use dp::{truncation_level, BaseMeasure, DP_TRUNCATION_EPS};

/// Failed subsample draws are redrawn at most this many times.
pub const SDBB_RETRY_CAP: usize = 10;

/// A run aborts when more than this fraction of its draws fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
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
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Bb,
        Method::Blbb,
        Method::Sdbb,
        Method::Lossless,
        Method::Bldp,
        Method::Sddp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Bb => "BB",
            Method::Blbb => "BLBB",
            Method::Sdbb => "SDBB",
            Method::Lossless => "LOSSLESS",
            Method::Bldp => "BLDP",
            Method::Sddp => "SDDP",
        }
    }

    fn uses_subsets(&self) -> bool {
        !matches!(self, Method::Bb)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

fn default_r() -> usize {
    100
}

fn default_batch() -> usize {
    100
}

fn default_true() -> bool {
    true
}

/// Settings of one engine run. Exactly one of `gamma` (`b = round(n^gamma)`)
/// and `b` sets the subset size of the subset-based methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub method: Method,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub b: Option<usize>,
    /// Draws per subset (BLBB, BLDP) or in total (BB, SDBB, SDDP, LOSSLESS).
    #[serde(default = "default_r")]
    pub r: usize,
    /// Subsets to process (BLBB, BLDP); defaults to `floor(n / b)`.
    #[serde(default)]
    pub s: Option<usize>,
    /// Wall-clock budget in seconds.
    #[serde(default)]
    pub time_budget: Option<f64>,
    #[serde(default)]
    pub dp_alpha: f64,
    #[serde(default)]
    pub dp_base: BaseMeasure,
    #[serde(default)]
    pub seed: u64,
    /// Draws accumulated per data pass (LOSSLESS).
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Summarise BLBB by pooling all draws instead of averaging per-subset
    /// summaries (diagnostics only).
    #[serde(default)]
    pub pool_draws: bool,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl EngineConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            gamma: None,
            b: None,
            r: default_r(),
            s: None,
            time_budget: None,
            dp_alpha: 0.0,
            dp_base: BaseMeasure::default(),
            seed: 0,
            batch: default_batch(),
            pool_draws: false,
            parallel: true,
        }
    }

    /// Field-level checks; messages name the offending `engine.*` key.
    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(Error::Config("engine.r must be at least 1".into()));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::Config(format!("engine.gamma must lie in (0, 1], got {g}")));
            }
        }
        if self.b == Some(0) {
            return Err(Error::Config("engine.b must be at least 1".into()));
        }
        if self.gamma.is_some() && self.b.is_some() {
            return Err(Error::Config("engine.gamma and engine.b are mutually exclusive".into()));
        }
        if self.s == Some(0) {
            return Err(Error::Config("engine.s must be at least 1".into()));
        }
        if let Some(t) = self.time_budget {
            if !(t > 0.0) {
                return Err(Error::Config(format!("engine.time_budget must be positive, got {t}")));
            }
        }
        if !(self.dp_alpha >= 0.0) || !self.dp_alpha.is_finite() {
            return Err(Error::Config(format!(
                "engine.dp_alpha must be finite and >= 0, got {}",
                self.dp_alpha
            )));
        }
        if self.batch < 1 {
            return Err(Error::Config("engine.batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Subset size for `n` units.
    pub fn subset_size(&self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::InsufficientData("dataset has no units".into()));
        }
        if !self.method.uses_subsets() {
            return Ok(n);
        }
        match (self.b, self.gamma) {
            (Some(b), _) if b > n => Err(Error::Config(format!(
                "engine.b = {b} exceeds the number of units n = {n}"
            ))),
            (Some(b), _) => Ok(b),
            (None, Some(g)) => Ok(((n as f64).powf(g).round() as usize).clamp(1, n)),
            (None, None) if self.method == Method::Lossless => Ok(n.min(data::DEFAULT_BLOCK_SIZE)),
            (None, None) => Err(Error::Config(format!(
                "engine.gamma or engine.b is required for {}",
                self.method
            ))),
        }
    }
}

/// `R` draws of a `dim`-vector functional, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawMatrix {
    pub dim: usize,
    pub column_names: Vec<String>,
    pub draws: Vec<f64>,
    /// Subset each row was drawn on, for pooled BLBB-type output.
    pub subset: Option<Vec<usize>>,
    pub centered: bool,
    /// Empirical value subtracted from every row (the mean of the per-draw
    /// centers when each draw has its own).
    pub center: Vec<f64>,
    pub n_excluded: usize,
    pub provenance: Provenance,
}

impl DrawMatrix {
    /// Uncentered draws with default coordinate names.
    pub fn new(draws: Vec<f64>, dim: usize, provenance: Provenance) -> Self {
        Self {
            dim,
            column_names: (0..dim).map(|l| format!("beta_{l}")).collect(),
            draws,
            subset: None,
            centered: false,
            center: vec![0.0; dim],
            n_excluded: 0,
            provenance,
        }
    }

    pub fn n_draws(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.draws.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.draws[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, l: usize) -> Vec<f64> {
        self.draws.iter().skip(l).step_by(self.dim).copied().collect()
    }

    /// One row per draw: `draw`, `subset` (when present), then coordinates.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["draw".to_string()];
        if self.subset.is_some() {
            header.push("subset".into());
        }
        header.extend(self.column_names.iter().cloned());
        wtr.write_record(&header)?;
        let mut fields = Vec::with_capacity(header.len());
        for i in 0..self.n_draws() {
            fields.clear();
            fields.push(i.to_string());
            if let Some(s) = &self.subset {
                fields.push(s[i].to_string());
            }
            fields.extend(self.row(i).iter().map(|v| format!("{v}")));
            wtr.write_record(&fields)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

/// Draws and summary of one BLBB-type subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRun {
    pub subset_id: usize,
    pub draws: DrawMatrix,
    pub summary: SummaryRecord,
}

/// A subset or draw that was given up on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedUnit {
    pub unit: usize,
    pub reason: String,
}

/// Output of any engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineRun {
    pub method: Method,
    /// All retained draws (pooled over subsets for BLBB-type methods).
    pub draws: DrawMatrix,
    /// Per-subset results (BLBB-type methods only).
    pub subsets: Vec<SubsetRun>,
    pub skipped: Vec<SkippedUnit>,
    pub summary: SummaryRecord,
    pub trace: Vec<Checkpoint>,
    pub planned_units: usize,
    pub completed_units: usize,
}

impl EngineRun {
    /// Whether anything was excluded, skipped or cut short.
    pub fn is_partial(&self) -> bool {
        !self.skipped.is_empty() || self.draws.n_excluded > 0 || self.completed_units < self.planned_units
    }
}

/// Resolved inputs shared by every engine.
pub(crate) struct Setup<'a> {
    pub ds: &'a ChunkedDataset,
    pub spec: &'a FunctionalSpec,
    pub cfg: &'a EngineConfig,
    /// Units in the full data.
    pub n: usize,
    pub b: usize,
}

impl<'a> Setup<'a> {
    pub fn new(ds: &'a ChunkedDataset, spec: &'a FunctionalSpec, cfg: &'a EngineConfig) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        let n = data::n_units(ds, spec)?;
        let b = cfg.subset_size(n)?;
        Ok(Self { ds, spec, cfg, n, b })
    }

    /// Rescaled Dirichlet concentration `n / b`.
    pub fn concentration(&self) -> f64 {
        self.n as f64 / self.b as f64
    }

    pub fn provenance(&self) -> Provenance {
        let mut p = Provenance::new(self.cfg.method.name(), self.n, self.b);
        p.seed = Some(self.cfg.seed);
        p.gamma = self.cfg.gamma;
        p.r = Some(self.cfg.r);
        if matches!(self.cfg.method, Method::Bldp | Method::Sddp) {
            p.dp_alpha = Some(self.cfg.dp_alpha);
        }
        p
    }

    pub fn parallel(&self) -> bool {
        self.cfg.parallel
    }
}

fn subtract(values: &[f64], center: &[f64]) -> Vec<f64> {
    values.iter().zip(center).map(|(v, c)| v - c).collect()
}

pub(crate) fn check_failure_rate(failed: usize, attempted: usize, what: &str) -> Result<()> {
    if attempted > 0 && failed as f64 > MAX_FAILURE_FRACTION * attempted as f64 {
        return Err(Error::Engine(format!(
            "{failed} of {attempted} {what} failed (more than {:.0}%)",
            100.0 * MAX_FAILURE_FRACTION
        )));
    }
    Ok(())
}

/// Full Bayesian bootstrap: Dirichlet(1, ..., 1) weights over all units,
/// centered at the full-data empirical value. Not memory bounded.
pub fn run_bb(ds: &ChunkedDataset, spec: &FunctionalSpec, cfg: &EngineConfig) -> Result<EngineRun> {
    run_with(
        ds,
        spec,
        &EngineConfig {
            method: Method::Bb,
            ..cfg.clone()
        },
    )
}

/// Bag of little Bayesian bootstraps: one random partition; on each of the
/// first `s` blocks, `r` Dirichlet(n/b, ..., n/b) draws centered at the
/// block's empirical value; per-block summaries averaged with equal weight.
pub fn run_blbb(ds: &ChunkedDataset, spec: &FunctionalSpec, cfg: &EngineConfig) -> Result<EngineRun> {
    run_with(
        ds,
        spec,
        &EngineConfig {
            method: Method::Blbb,
            ..cfg.clone()
        },
    )
}

/// Subsampled double Bayesian bootstrap: `r` times, a fresh uniform subsample
/// of size `b` and one Dirichlet(n/b, ..., n/b) draw centered at the
/// subsample's empirical value; all draws pooled into one summary.
pub fn run_sdbb(ds: &ChunkedDataset, spec: &FunctionalSpec, cfg: &EngineConfig) -> Result<EngineRun> {
    run_with(
        ds,
        spec,
        &EngineConfig {
            method: Method::Sdbb,
            ..cfg.clone()
        },
    )
}

/// Exact Bayesian-bootstrap draws of `g(integral rho dP)` from unnormalised
/// Gamma-weighted sufficient statistics accumulated subset by subset.
pub fn run_lossless(ds: &ChunkedDataset, spec: &FunctionalSpec, cfg: &EngineConfig) -> Result<EngineRun> {
    run_with(
        ds,
        spec,
        &EngineConfig {
            method: Method::Lossless,
            ..cfg.clone()
        },
    )
}

/// Dirichlet-process variants; `cfg.method` must be `BLDP` or `SDDP`.
pub fn run_dp(ds: &ChunkedDataset, spec: &FunctionalSpec, cfg: &EngineConfig) -> Result<EngineRun> {
    if !matches!(cfg.method, Method::Bldp | Method::Sddp) {
        return Err(Error::Config(format!(
            "engine.method must be BLDP or SDDP for the DP engine, got {}",
            cfg.method
        )));
    }
    run_with(ds, spec, cfg)
}

/// Run whichever engine `cfg.method` names, honouring `cfg.time_budget`.
pub fn run(ds: &ChunkedDataset, spec: &FunctionalSpec, cfg: &EngineConfig) -> Result<EngineRun> {
    run_with(ds, spec, cfg)
}

fn run_with(ds: &ChunkedDataset, spec: &FunctionalSpec, cfg: &EngineConfig) -> Result<EngineRun> {
    let stop = StopRule {
        max_seconds: cfg.time_budget,
        max_units: None,
    };
    dispatch(ds, spec, cfg, &stop, None)
}

pub(crate) fn dispatch(
    ds: &ChunkedDataset,
    spec: &FunctionalSpec,
    cfg: &EngineConfig,
    stop: &StopRule,
    trace_every: Option<usize>,
) -> Result<EngineRun> {
    let setup = Setup::new(ds, spec, cfg)?;
    let clock = budget::Clock::start(stop);
    match cfg.method {
        Method::Bb => bb::run(&setup, &clock, trace_every),
        Method::Blbb => blbb::run(&setup, None, &clock, trace_every),
        Method::Sdbb => sdbb::run(&setup, None, &clock, trace_every),
        Method::Lossless => lossless::run(&setup, &clock, trace_every),
        Method::Bldp => {
            let prior = dp::DpPrior::new(&setup)?;
            blbb::run(&setup, Some(&prior), &clock, trace_every)
        }
        Method::Sddp => {
            let prior = dp::DpPrior::new(&setup)?;
            sdbb::run(&setup, Some(&prior), &clock, trace_every)
        }
    }
}
