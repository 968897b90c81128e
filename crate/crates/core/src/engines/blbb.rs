use super::budget::{wants_summary, Checkpoint, Clock};
use super::dp::DpPrior;
use super::{check_failure_rate, subtract, DrawMatrix, EngineRun, Setup, SkippedUnit, SubsetRun};
use crate::data::{self, Partition};
use crate::exec;
use crate::functionals::PreparedFunctional;
use crate::rng::{dirichlet_rescaled, SeedSpec, StreamTag};
use crate::summaries::{combine_average, summarize, SummaryRecord};
use crate::{Error, Result};

pub(super) fn run(
    setup: &Setup,
    prior: Option<&DpPrior>,
    clock: &Clock,
    trace_every: Option<usize>,
) -> Result<EngineRun> {
    let cfg = setup.cfg;
    let (n, b) = (setup.n, setup.b);
    let max_s = n / b;
    let s = cfg.s.unwrap_or(max_s);
    if s > max_s {
        return Err(Error::Config(format!("engine.s = {s} exceeds floor(n / b) = {max_s}")));
    }
    let mut prng = SeedSpec::derive(cfg.seed, StreamTag::Partition, 0, 0).rng();
    let partition = Partition::new(n, b, &mut prng)?;
    let names = data::design_columns(setup.ds, setup.spec)?;
    let mut provenance = setup.provenance();
    provenance.s = Some(s);

    let results = clock.run_units(s, setup.parallel(), |j| -> Result<SubsetRun> {
        let idx = partition.subset(j);
        let sub = data::materialize(setup.ds, &idx, setup.spec)?;
        let prepared = PreparedFunctional::new(setup.spec, &sub)?;
        let center = prepared.empirical()?.0;
        let c = setup.concentration();
        let draws = exec::map_indexed(cfg.r, setup.parallel(), |k| -> Result<Vec<f64>> {
            let mut rng = SeedSpec::derive(cfg.seed, StreamTag::Blbb, j as u64, k as u64).rng();
            let w = dirichlet_rescaled(sub.n_units(), c, &mut rng)?;
            let t = match prior {
                Some(p) => {
                    let mut prior_rng = SeedSpec::derive(cfg.seed, StreamTag::DpPrior, j as u64, k as u64).rng();
                    p.evaluate(setup.spec, &sub, &prepared, &w, &mut prior_rng)?
                }
                None => prepared.evaluate(&w)?,
            };
            Ok(subtract(&t.0, &center))
        });
        let mut kept = Vec::with_capacity(cfg.r * names.len());
        let mut failed = 0;
        for d in draws {
            match d {
                Ok(v) => kept.extend(v),
                Err(e) => {
                    log::debug!("subset {j}: draw excluded: {e}");
                    failed += 1;
                }
            }
        }
        check_failure_rate(failed, cfg.r, &format!("draws on subset {j}"))?;
        let mut p = provenance.clone();
        p.subset_id = Some(j);
        let draws = DrawMatrix {
            dim: names.len(),
            column_names: names.clone(),
            draws: kept,
            subset: None,
            centered: true,
            center,
            n_excluded: failed,
            provenance: p,
        };
        let summary = summarize(&draws)?;
        Ok(SubsetRun {
            subset_id: j,
            draws,
            summary,
        })
    })?;

    let completed = results.len();
    let mut subsets: Vec<SubsetRun> = Vec::with_capacity(completed);
    let mut skipped = Vec::new();
    let mut trace = Vec::new();
    for (j, (res, elapsed)) in results.into_iter().enumerate() {
        match res {
            Ok(run) => subsets.push(run),
            Err(e) => {
                log::warn!("{} subset {j} skipped: {e}", cfg.method);
                skipped.push(SkippedUnit {
                    unit: j,
                    reason: e.to_string(),
                });
            }
        }
        if trace_every.is_some() {
            let summary = if wants_summary(trace_every, j, completed) && !subsets.is_empty() {
                Some(combined(&subsets)?)
            } else {
                None
            };
            trace.push(Checkpoint {
                unit: j,
                elapsed_secs: elapsed,
                draws: subsets.iter().map(|r| r.draws.n_draws()).sum(),
                summary,
            });
        }
    }
    if subsets.is_empty() {
        let first = skipped.first().map_or(String::new(), |s| s.reason.clone());
        return Err(Error::Engine(format!(
            "all {completed} subsets failed (first: {first})"
        )));
    }

    let dim = names.len();
    let mut pooled = Vec::new();
    let mut subset_of_row = Vec::new();
    let mut center = vec![0.0; dim];
    for r in &subsets {
        pooled.extend_from_slice(&r.draws.draws);
        subset_of_row.extend(std::iter::repeat_n(r.subset_id, r.draws.n_draws()));
        for (c, v) in center.iter_mut().zip(&r.draws.center) {
            *c += v / subsets.len() as f64;
        }
    }
    let draws = DrawMatrix {
        dim,
        column_names: names,
        draws: pooled,
        subset: Some(subset_of_row),
        centered: true,
        center,
        n_excluded: subsets.iter().map(|r| r.draws.n_excluded).sum(),
        provenance: provenance.clone(),
    };
    let mut summary = if cfg.pool_draws {
        let mut s = summarize(&draws)?;
        s.notes.push("summary of pooled draws (diagnostic)".into());
        s
    } else {
        combined(&subsets)?
    };
    summary.provenance = provenance;
    if partition.unassigned() > 0 {
        summary.notes.push(format!(
            "{} units left unassigned by the partition (n mod b)",
            partition.unassigned()
        ));
    }
    if !skipped.is_empty() {
        summary
            .notes
            .push(format!("{} of {completed} subsets skipped", skipped.len()));
    }
    Ok(EngineRun {
        method: cfg.method,
        draws,
        subsets,
        skipped,
        summary,
        trace,
        planned_units: s,
        completed_units: completed,
    })
}

fn combined(subsets: &[SubsetRun]) -> Result<SummaryRecord> {
    let records: Vec<SummaryRecord> = subsets.iter().map(|r| r.summary.clone()).collect();
    combine_average(&records)
}
