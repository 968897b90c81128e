use super::budget::{wants_summary, Checkpoint, Clock};
use super::{check_failure_rate, subtract, DrawMatrix, EngineRun, Setup, SkippedUnit};
use crate::data;
use crate::functionals::PreparedFunctional;
use crate::rng::{dirichlet_flat, SeedSpec, StreamTag};
use crate::summaries::summarize;
use crate::{Error, Result};

/// One pooled draw: the centered value and the center it was taken at, plus
/// the number of failed attempts on the way.
pub(super) struct DrawOutcome {
    pub value: Result<(Vec<f64>, Vec<f64>)>,
    pub failures: usize,
}

pub(super) fn run(setup: &Setup, clock: &Clock, trace_every: Option<usize>) -> Result<EngineRun> {
    let data = data::materialize_range(setup.ds, 0..setup.n, setup.spec)?;
    let prepared = PreparedFunctional::new(setup.spec, &data)?;
    let center = prepared.empirical()?.0;
    let seed = setup.cfg.seed;
    let n = setup.n;
    let outcomes = clock.run_units(setup.cfg.r, setup.parallel(), |k| {
        let value = (|| {
            let mut rng = SeedSpec::derive(seed, StreamTag::Bb, 0, k as u64).rng();
            let w = dirichlet_flat(n, &mut rng)?;
            let t = prepared.evaluate(&w)?;
            Ok((subtract(&t.0, &center), center.clone()))
        })();
        let failures = usize::from(value.is_err());
        DrawOutcome { value, failures }
    })?;
    assemble(setup, data.column_names.clone(), outcomes, trace_every)
}

/// Pool per-draw outcomes (in unit order) into one centered draw matrix.
pub(super) fn assemble(
    setup: &Setup,
    names: Vec<String>,
    outcomes: Vec<(DrawOutcome, f64)>,
    trace_every: Option<usize>,
) -> Result<EngineRun> {
    let dim = names.len();
    let completed = outcomes.len();
    let mut draws = Vec::with_capacity(completed * dim);
    let mut center_sum = vec![0.0; dim];
    let mut failed = 0;
    let mut skipped = Vec::new();
    let mut trace = Vec::new();
    let provenance = setup.provenance();
    let matrix = |draws: Vec<f64>, center_sum: &[f64], failed: usize| {
        let kept = draws.len() / dim.max(1);
        DrawMatrix {
            dim,
            column_names: names.clone(),
            draws,
            subset: None,
            centered: true,
            center: center_sum.iter().map(|c| c / kept.max(1) as f64).collect(),
            n_excluded: failed,
            provenance: provenance.clone(),
        }
    };
    for (unit, (outcome, elapsed)) in outcomes.into_iter().enumerate() {
        failed += outcome.failures;
        match outcome.value {
            Ok((d, c)) => {
                draws.extend_from_slice(&d);
                for (s, v) in center_sum.iter_mut().zip(&c) {
                    *s += v;
                }
            }
            Err(e) => {
                log::warn!("{} draw {unit} excluded: {e}", setup.cfg.method);
                skipped.push(SkippedUnit {
                    unit,
                    reason: e.to_string(),
                });
            }
        }
        if trace_every.is_some() {
            let kept = draws.len() / dim;
            let summary = if wants_summary(trace_every, unit, completed) && kept >= 2 {
                Some(summarize(&matrix(draws.clone(), &center_sum, failed))?)
            } else {
                None
            };
            trace.push(Checkpoint {
                unit,
                elapsed_secs: elapsed,
                draws: kept,
                summary,
            });
        }
    }
    let kept = draws.len() / dim;
    check_failure_rate(failed, kept + failed, "draw attempts")?;
    if kept == 0 {
        return Err(Error::Engine("no draw succeeded".into()));
    }
    let draws = matrix(draws, &center_sum, failed);
    let mut summary = summarize(&draws)?;
    if failed > 0 {
        summary.notes.push(format!("{failed} failed draw attempts excluded"));
    }
    Ok(EngineRun {
        method: setup.cfg.method,
        draws,
        subsets: Vec::new(),
        skipped,
        summary,
        trace,
        planned_units: setup.cfg.r,
        completed_units: completed,
    })
}
