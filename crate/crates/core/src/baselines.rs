//! Asymptotic-normal comparators: AN on the full data and ANS, the average
//! of subset normals with variances rescaled by `b / n`.

use serde::{Deserialize, Serialize};

use crate::data::{self, ChunkedDataset, MaterializedSubset, SubsetIndex};
use crate::functionals::{self, CoefficientVector, FunctionalKind, FunctionalSpec};
use crate::linalg::{self, SpdSolver};
use crate::summaries::{combine_average, Provenance, SummaryRecord, QUANTILE_RULE, Z_975};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineSource {
    #[serde(rename = "AN")]
    An,
    #[serde(rename = "ANS")]
    Ans,
}

impl BaselineSource {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineSource::An => "AN",
            BaselineSource::Ans => "ANS",
        }
    }
}

/// Estimate and standard errors of an asymptotic normal approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticSummary {
    pub estimate: CoefficientVector,
    pub standard_errors: Vec<f64>,
    pub source: BaselineSource,
    /// Subsets averaged (ANS).
    pub subsets: Option<usize>,
    pub variance: String,
}

/// Estimate and diagonal of the asymptotic variance of `T` on `data`.
///
/// Linear: classical homoskedastic `RSS / (n - p - 1) (U'U)^-1`. Logistic:
/// inverse observed information at the MLE. Mean: sample variance over `n`.
pub fn asymptotic_normal(
    data: &MaterializedSubset,
    spec: &FunctionalSpec,
) -> Result<(CoefficientVector, Vec<f64>, &'static str)> {
    let n = data.rows;
    let k = data.width;
    if n == 0 {
        return Err(Error::invalid("empty subset"));
    }
    let ones = vec![1.0; n];
    match spec.kind {
        FunctionalKind::Mean => {
            if n < 2 {
                return Err(Error::Baseline("the mean needs at least 2 rows".into()));
            }
            let m = functionals::weighted_mean(data, &ones)?;
            let ss: f64 = data.y.iter().map(|y| (y - m.0[0]).powi(2)).sum();
            Ok((m, vec![ss / (n as f64 - 1.0) / n as f64], "sample variance / n"))
        }
        FunctionalKind::Linear => {
            if n <= k {
                return Err(Error::Baseline(format!(
                    "{n} rows leave no residual degrees of freedom for {k} coefficients"
                )));
            }
            let beta = functionals::weighted_least_squares(data, &ones)?;
            let rss: f64 = (0..n)
                .map(|i| {
                    let fit: f64 = data.row(i).iter().zip(&beta.0).map(|(u, b)| u * b).sum();
                    (data.y[i] - fit).powi(2)
                })
                .sum();
            let sigma2 = rss / (n - k) as f64;
            let gram = linalg::gram(&data.design, n, k);
            let inv = SpdSolver::new(&gram, k)?.inverse();
            let var = (0..k).map(|l| sigma2 * inv[l * k + l]).collect();
            Ok((beta, var, "classical homoskedastic least squares"))
        }
        FunctionalKind::Logistic => {
            let beta = functionals::weighted_logistic(data, &ones, spec)?;
            let info_w: Vec<f64> = (0..n)
                .map(|i| {
                    let eta: f64 = data.row(i).iter().zip(&beta.0).map(|(u, b)| u * b).sum();
                    let p = 1.0 / (1.0 + (-eta).exp());
                    p * (1.0 - p)
                })
                .collect();
            let (info, _) = linalg::weighted_normal_equations(&data.design, &data.y, k, &info_w);
            let inv = SpdSolver::new(&info, k)?.inverse();
            let var = (0..k).map(|l| inv[l * k + l]).collect();
            Ok((beta, var, "inverse observed information"))
        }
        FunctionalKind::Mixed => Err(Error::Baseline(
            "asymptotic baselines are not provided for the mixed functional".into(),
        )),
    }
}

fn normal_record(
    estimate: &CoefficientVector,
    se: &[f64],
    names: &[String],
    provenance: Provenance,
    variance: &str,
) -> SummaryRecord {
    let k = se.len();
    SummaryRecord {
        coordinates: names.to_vec(),
        q025: se.iter().map(|s| -Z_975 * s).collect(),
        q975: se.iter().map(|s| Z_975 * s).collect(),
        sd: se.to_vec(),
        mean: vec![0.0; k],
        center: estimate.0.clone(),
        n_draws: 0,
        n_excluded: 0,
        degenerate: se.iter().any(|&s| s == 0.0),
        quantile_rule: QUANTILE_RULE.to_string(),
        provenance,
        notes: vec![format!("normal approximation; variance: {variance}")],
    }
}

/// AN fitted on all of `ds`.
pub fn an_fit(ds: &ChunkedDataset, spec: &FunctionalSpec) -> Result<AsymptoticSummary> {
    spec.validate()?;
    let n = data::n_units(ds, spec)?;
    let full = data::materialize_range(ds, 0..n, spec)?;
    let (estimate, var, variance) = asymptotic_normal(&full, spec)?;
    Ok(AsymptoticSummary {
        estimate,
        standard_errors: var.iter().map(|v| v.sqrt()).collect(),
        source: BaselineSource::An,
        subsets: None,
        variance: variance.into(),
    })
}

/// AN as a summary record: `q = 0 -/+ 1.959964 se`, `sd = se`, centered at
/// the full-data estimate. Zero standard errors mark the record degenerate.
pub fn an_summary(ds: &ChunkedDataset, spec: &FunctionalSpec) -> Result<SummaryRecord> {
    let fit = an_fit(ds, spec)?;
    let n = data::n_units(ds, spec)?;
    let names = data::design_columns(ds, spec)?;
    let mut rec = normal_record(
        &fit.estimate,
        &fit.standard_errors,
        &names,
        Provenance::new("AN", n, n),
        &fit.variance,
    );
    if rec.degenerate {
        rec.notes.push("zero standard error on some coordinate".into());
    }
    Ok(rec)
}

/// ANS: per subset, the normal approximation of `T` on the subset with its
/// variance multiplied by `b / n`; subset records averaged. Failing subsets
/// are skipped.
pub fn ans_summary(ds: &ChunkedDataset, spec: &FunctionalSpec, partition: &[SubsetIndex]) -> Result<SummaryRecord> {
    spec.validate()?;
    let n = data::n_units(ds, spec)?;
    let names = data::design_columns(ds, spec)?;
    let mut records = Vec::with_capacity(partition.len());
    let mut failures = Vec::new();
    for idx in partition {
        let b = idx.row_ids.len();
        let res = data::materialize(ds, idx, spec).and_then(|sub| asymptotic_normal(&sub, spec));
        match res {
            Ok((estimate, var, variance)) => {
                let factor = b as f64 / n as f64;
                let se: Vec<f64> = var.iter().map(|v| (v * factor).sqrt()).collect();
                let mut p = Provenance::new("ANS", n, b);
                p.subset_id = Some(idx.subset_id);
                records.push(normal_record(&estimate, &se, &names, p, variance));
            }
            Err(e) => {
                log::warn!("ANS subset {} skipped: {e}", idx.subset_id);
                failures.push(e.to_string());
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Baseline(format!(
            "all {} subsets failed (first: {})",
            partition.len(),
            failures.first().cloned().unwrap_or_default()
        )));
    }
    let mut rec = combine_average(&records)?;
    rec.provenance.subset_id = None;
    rec.provenance.s = Some(records.len());
    if !failures.is_empty() {
        rec.notes
            .push(format!("{} of {} subsets skipped", failures.len(), partition.len()));
    }
    if rec.degenerate {
        rec.notes.push("zero standard error on some coordinate".into());
    }
    Ok(rec)
}
