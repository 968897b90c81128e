//! Exact Bayesian-bootstrap draws for functionals of the form
//! `g(integral rho dP)`.
//!
//! Dirichlet(1, ..., 1) weights are normalised Gamma(1) variables, and the
//! normalisation cancels inside `g(S / N)`. Each draw therefore only needs
//! its running sums `S = sum_i G_i rho(x_i)` and `N = sum_i G_i`, which are
//! accumulated subset by subset. A pass over the data serves a batch of `B`
//! draws at once; every draw keeps its own stream across subsets, so the
//! draws do not depend on how the data are cut.

use super::bb::{assemble, DrawOutcome};
use super::budget::{wants_summary, Checkpoint, Clock};
use super::{subtract, EngineRun, Setup};
use crate::data;
use crate::exec;
use crate::functionals::{rho_moments, LinearMoments};
use crate::rng::{GammaSampler, SeedSpec, Stream, StreamTag};
use crate::summaries::summarize;
use crate::{Error, Result};

struct DrawState {
    rng: Stream,
    acc: LinearMoments,
    error: Option<Error>,
}

struct PassOutput {
    values: Vec<Result<Vec<f64>>>,
    /// Uniform-weight sums, gathered on the first pass only.
    uniform: Option<LinearMoments>,
}

pub(super) fn run(setup: &Setup, clock: &Clock, trace_every: Option<usize>) -> Result<EngineRun> {
    let spec = setup.spec;
    if !spec.supports_lossless() {
        return Err(Error::UnsupportedForLossless(spec.kind.name().into()));
    }
    let names = data::design_columns(setup.ds, spec)?;
    let dim = names.len();
    let (n, b) = (setup.n, setup.b);
    let chunks = n.div_ceil(b);
    let total = setup.cfg.r;
    let batch = setup.cfg.batch;
    let passes = total.div_ceil(batch);
    let gamma = GammaSampler::new(1.0)?;

    let pass = |p: usize| -> Result<PassOutput> {
        let draws = p * batch..((p + 1) * batch).min(total);
        let mut states: Vec<DrawState> = draws
            .map(|k| DrawState {
                rng: SeedSpec::derive(setup.cfg.seed, StreamTag::Lossless, 0, k as u64).rng(),
                acc: LinearMoments::zeros(dim),
                error: None,
            })
            .collect();
        let mut uniform = (p == 0).then(|| LinearMoments::zeros(dim));
        for c in 0..chunks {
            let sub = data::materialize_range(setup.ds, c * b..((c + 1) * b).min(n), spec)?;
            exec::for_each_mut(&mut states, setup.parallel(), |_, st| {
                if st.error.is_some() {
                    return;
                }
                let g: Vec<f64> = (0..sub.rows).map(|_| gamma.sample_positive(&mut st.rng)).collect();
                match rho_moments(&sub, spec, &g) {
                    Ok(m) => st.acc.merge(&m),
                    Err(e) => st.error = Some(e),
                }
            });
            if let Some(u) = uniform.as_mut() {
                u.merge(&rho_moments(&sub, spec, &vec![1.0; sub.rows])?);
            }
        }
        let values = states
            .into_iter()
            .map(|st| match st.error {
                Some(e) => Err(e),
                None => st.acc.finish().map(|v| v.0),
            })
            .collect();
        Ok(PassOutput { values, uniform })
    };

    let results = clock.run_units(passes, false, pass)?;
    let completed = results.len();
    let mut outputs = Vec::with_capacity(completed);
    let mut elapsed = Vec::with_capacity(completed);
    for (res, t) in results {
        outputs.push(res?);
        elapsed.push(t);
    }
    let center = outputs[0]
        .uniform
        .as_ref()
        .expect("first pass gathers uniform sums")
        .finish()?
        .0;
    let mut per_pass = Vec::with_capacity(completed);
    let mut outcomes = Vec::new();
    for (out, &t) in outputs.into_iter().zip(&elapsed) {
        per_pass.push(out.values.len());
        for v in out.values {
            let failures = usize::from(v.is_err());
            outcomes.push((
                DrawOutcome {
                    value: v.map(|x| (subtract(&x, &center), center.clone())),
                    failures,
                },
                t,
            ));
        }
    }
    let mut run = assemble(setup, names, outcomes, None)?;
    run.planned_units = passes;
    run.completed_units = completed;
    if trace_every.is_some() {
        // Checkpoints per pass; excluded draws are dropped from the prefix count.
        let skipped: Vec<usize> = run.skipped.iter().map(|s| s.unit).collect();
        let mut attempted = 0;
        for (p, (&len, &t)) in per_pass.iter().zip(&elapsed).enumerate() {
            attempted += len;
            let kept = attempted - skipped.iter().filter(|&&u| u < attempted).count();
            let summary = if wants_summary(trace_every, p, completed) && kept >= 2 {
                let mut prefix = run.draws.clone();
                prefix.draws.truncate(kept * dim);
                Some(summarize(&prefix)?)
            } else {
                None
            };
            run.trace.push(Checkpoint {
                unit: p,
                elapsed_secs: t,
                draws: kept,
                summary,
            });
        }
    }
    Ok(run)
}
