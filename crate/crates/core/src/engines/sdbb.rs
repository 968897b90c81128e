use super::bb::{assemble, DrawOutcome};
use super::budget::Clock;
use super::dp::DpPrior;
use super::{subtract, EngineRun, Setup, SDBB_RETRY_CAP};
use crate::data;
use crate::functionals::PreparedFunctional;
use crate::rng::{dirichlet_rescaled, SeedSpec, StreamTag};
use crate::Result;

/// Each draw owns one stream for subsample selection, retries and weights,
/// and a second one for prior atoms, so SDDP with `alpha = 0` reproduces
/// SDBB exactly.
pub(super) fn run(
    setup: &Setup,
    prior: Option<&DpPrior>,
    clock: &Clock,
    trace_every: Option<usize>,
) -> Result<EngineRun> {
    let names = data::design_columns(setup.ds, setup.spec)?;
    let (ds, spec, seed) = (setup.ds, setup.spec, setup.cfg.seed);
    let (n, b, c) = (setup.n, setup.b, setup.concentration());
    let outcomes = clock.run_units(setup.cfg.r, setup.parallel(), |k| {
        let mut rng = SeedSpec::derive(seed, StreamTag::Sdbb, 0, k as u64).rng();
        let mut prior_rng = SeedSpec::derive(seed, StreamTag::DpPrior, 0, k as u64).rng();
        let mut failures = 0;
        loop {
            let attempt = (|| {
                let idx = data::draw_subset(n, b, &mut rng)?;
                let sub = data::materialize(ds, &idx, spec)?;
                let prepared = PreparedFunctional::new(spec, &sub)?;
                let center = prepared.empirical()?.0;
                let w = dirichlet_rescaled(sub.n_units(), c, &mut rng)?;
                let t = match prior {
                    Some(p) => p.evaluate(spec, &sub, &prepared, &w, &mut prior_rng)?,
                    None => prepared.evaluate(&w)?,
                };
                Ok((subtract(&t.0, &center), center))
            })();
            match attempt {
                Ok(v) => return DrawOutcome { value: Ok(v), failures },
                Err(e) => {
                    failures += 1;
                    if failures > SDBB_RETRY_CAP {
                        return DrawOutcome {
                            value: Err(e),
                            failures,
                        };
                    }
                }
            }
        }
    })?;
    assemble(setup, names, outcomes, trace_every)
}
