//! Wall-clock budgets and progress traces.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{dispatch, EngineConfig, EngineRun};
use crate::data::ChunkedDataset;
use crate::exec;
use crate::functionals::FunctionalSpec;
use crate::summaries::SummaryRecord;
use crate::{Error, Result};

/// When to stop handing out work items. Items already started always finish.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub max_seconds: Option<f64>,
    pub max_units: Option<usize>,
}

impl StopRule {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn seconds(s: f64) -> Self {
        Self {
            max_seconds: Some(s),
            max_units: None,
        }
    }

    pub fn units(u: usize) -> Self {
        Self {
            max_seconds: None,
            max_units: Some(u),
        }
    }
}

/// Progress after one completed work item (subset, draw or batch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub unit: usize,
    pub elapsed_secs: f64,
    /// Draws retained so far.
    pub draws: usize,
    /// Running summary of everything retained so far, when computed.
    pub summary: Option<SummaryRecord>,
}

pub(crate) struct Clock {
    start: Instant,
    stop: StopRule,
}

impl Clock {
    pub fn start(stop: &StopRule) -> Self {
        Self {
            start: Instant::now(),
            stop: *stop,
        }
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn expired(&self) -> bool {
        self.stop.max_seconds.is_some_and(|s| self.elapsed() >= s)
    }

    /// Run work items `0..n` in waves, stopping between waves once the rule
    /// fires. Each result carries its completion time. With a time limit a
    /// wave is as wide as the worker pool, otherwise everything runs at once.
    pub fn run_units<T, F>(&self, n: usize, parallel: bool, f: F) -> Result<Vec<(T, f64)>>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        let limit = self.stop.max_units.map_or(n, |u| u.min(n));
        let wave = if self.stop.max_seconds.is_some() {
            if parallel {
                exec::current_workers().max(1)
            } else {
                1
            }
        } else {
            limit.max(1)
        };
        let mut out = Vec::with_capacity(limit);
        while out.len() < limit {
            if self.expired() {
                break;
            }
            let done = out.len();
            let len = wave.min(limit - done);
            out.extend(exec::map_indexed(len, parallel, |i| {
                let t = f(done + i);
                (t, self.elapsed())
            }));
        }
        if out.is_empty() && n > 0 {
            return Err(Error::BudgetTooSmall);
        }
        Ok(out)
    }
}

/// Whether checkpoint `unit` of `total` gets a running summary.
pub(crate) fn wants_summary(trace_every: Option<usize>, unit: usize, total: usize) -> bool {
    match trace_every {
        Some(k) => (unit + 1) % k.max(1) == 0 || unit + 1 == total,
        None => false,
    }
}

/// Run the engine named by `cfg.method` until `stop` fires, recording a
/// checkpoint after every completed work item. A running summary is attached
/// to every `summary_every`-th checkpoint and to the last one.
pub fn time_budgeted_run(
    ds: &ChunkedDataset,
    spec: &FunctionalSpec,
    cfg: &EngineConfig,
    stop: StopRule,
    summary_every: usize,
) -> Result<EngineRun> {
    dispatch(ds, spec, cfg, &stop, Some(summary_every.max(1)))
}

/// One JSON object per checkpoint.
pub fn write_trace_jsonl<W: Write>(trace: &[Checkpoint], mut out: W) -> Result<()> {
    for c in trace {
        serde_json::to_writer(&mut out, c)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
