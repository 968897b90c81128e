//! Posterior summaries, their combination, credible intervals and the
//! approximation-error metrics.
//!
//! A [`SummaryRecord`] holds, per coordinate, the 2.5th and 97.5th
//! percentiles, the standard deviation and the mean of (usually centered)
//! draws, together with the center that undoes the centering.

use serde::{Deserialize, Serialize};

use crate::engines::DrawMatrix;
use crate::{Error, Result};

/// Name of the percentile rule, recorded in every summary.
pub const QUANTILE_RULE: &str = "linear interpolation at rank h = (R-1)q + 1";

/// Normal quantile used by the asymptotic baselines and interval checks.
pub const Z_975: f64 = 1.959964;

/// Where a set of draws or a summary came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    /// Subset the draws belong to; `None` for pooled or combined results.
    pub subset_id: Option<usize>,
    pub seed: Option<u64>,
    /// Resampling units in the full data (rows, or clusters).
    pub n: usize,
    pub b: usize,
    pub gamma: Option<f64>,
    /// Subsets processed (BLBB-type methods).
    pub s: Option<usize>,
    /// Draws per subset (BLBB) or in total.
    pub r: Option<usize>,
    pub dp_alpha: Option<f64>,
    /// `sqrt(n)`: the scale factor of the centered process, which cancels
    /// in every relative error and interval and is therefore not applied.
    pub unapplied_scale: f64,
    pub version: String,
    /// Hash of the run configuration, set by front ends that have one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Provenance {
    pub fn new(method: impl Into<String>, n: usize, b: usize) -> Self {
        Self {
            method: method.into(),
            subset_id: None,
            seed: None,
            n,
            b,
            gamma: None,
            s: None,
            r: None,
            dp_alpha: None,
            unapplied_scale: (n as f64).sqrt(),
            version: crate::VERSION.to_string(),
            config_hash: None,
        }
    }
}

/// Per-coordinate posterior summaries. Field order is the JSON order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub coordinates: Vec<String>,
    pub q025: Vec<f64>,
    pub q975: Vec<f64>,
    pub sd: Vec<f64>,
    pub mean: Vec<f64>,
    /// Added back to `mean` (and the interval) to return to the scale of `T`.
    pub center: Vec<f64>,
    pub n_draws: usize,
    pub n_excluded: usize,
    /// Set when a standard deviation is zero on some coordinate.
    pub degenerate: bool,
    pub quantile_rule: String,
    pub provenance: Provenance,
    pub notes: Vec<String>,
}

impl SummaryRecord {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Posterior mean on the scale of `T` (`mean + center`).
    pub fn uncentered_mean(&self) -> Vec<f64> {
        self.mean.iter().zip(&self.center).map(|(m, c)| m + c).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn validate(&self) -> Result<()> {
        let k = self.dim();
        if [self.q025.len(), self.q975.len(), self.sd.len(), self.center.len()]
            .iter()
            .any(|&l| l != k)
        {
            return Err(Error::Combine("summary fields have different lengths".into()));
        }
        Ok(())
    }
}

/// Percentile of sorted data by linear interpolation at 1-based rank
/// `h = (R - 1) q + 1`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let r = sorted.len();
    debug_assert!(r >= 1);
    let h = (r - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= r {
        return sorted[r - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (m, (ss / (n - 1.0)).sqrt())
}

/// Summaries of row-major `draws` with `dim` columns.
pub fn summarize_rows(draws: &[f64], dim: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let r = if dim == 0 { 0 } else { draws.len() / dim };
    if r < 2 {
        return Err(Error::InsufficientDraws(r));
    }
    let mut q025 = Vec::with_capacity(dim);
    let mut q975 = Vec::with_capacity(dim);
    let mut sd = Vec::with_capacity(dim);
    let mut mean = Vec::with_capacity(dim);
    let mut col = vec![0.0; r];
    for l in 0..dim {
        for (i, c) in col.iter_mut().enumerate() {
            *c = draws[i * dim + l];
        }
        let (m, s) = mean_sd(&col);
        col.sort_unstable_by(f64::total_cmp);
        q025.push(quantile_sorted(&col, 0.025));
        q975.push(quantile_sorted(&col, 0.975));
        sd.push(s);
        mean.push(m);
    }
    Ok((q025, q975, sd, mean))
}

/// Mean, sd (divisor `R - 1`) and percentiles of every coordinate.
pub fn summarize(draws: &DrawMatrix) -> Result<SummaryRecord> {
    let (q025, q975, sd, mean) = summarize_rows(&draws.draws, draws.dim)?;
    Ok(SummaryRecord {
        coordinates: draws.column_names.clone(),
        degenerate: sd.iter().any(|&s| s == 0.0),
        q025,
        q975,
        sd,
        mean,
        center: if draws.centered {
            draws.center.clone()
        } else {
            vec![0.0; draws.dim]
        },
        n_draws: draws.n_draws(),
        n_excluded: draws.n_excluded,
        quantile_rule: QUANTILE_RULE.to_string(),
        provenance: draws.provenance.clone(),
        notes: Vec::new(),
    })
}

fn average(rows: impl Iterator<Item = Vec<f64>>, count: usize, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / count as f64).collect()
}

/// Equal-weight average of every field across records (the `b/n` sum over
/// equal-size subsets). Draw and exclusion counts are summed.
pub fn combine_average(records: &[SummaryRecord]) -> Result<SummaryRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::Combine("no records to combine".into()))?;
    if records.len() == 1 {
        return Ok(first.clone());
    }
    let k = first.dim();
    for r in records {
        r.validate()?;
        if r.dim() != k {
            return Err(Error::Combine(format!("dimension mismatch: {} vs {k}", r.dim())));
        }
    }
    let s = records.len();
    let field = |f: fn(&SummaryRecord) -> &Vec<f64>| average(records.iter().map(|r| f(r).clone()), s, k);
    let sd = field(|r| &r.sd);
    let mut notes: Vec<String> = Vec::new();
    for r in records {
        for n in &r.notes {
            if !notes.contains(n) {
                notes.push(n.clone());
            }
        }
    }
    let mut provenance = first.provenance.clone();
    provenance.subset_id = None;
    Ok(SummaryRecord {
        coordinates: first.coordinates.clone(),
        q025: field(|r| &r.q025),
        q975: field(|r| &r.q975),
        degenerate: sd.iter().any(|&x| x == 0.0),
        sd,
        mean: field(|r| &r.mean),
        center: field(|r| &r.center),
        n_draws: records.iter().map(|r| r.n_draws).sum(),
        n_excluded: records.iter().map(|r| r.n_excluded).sum(),
        quantile_rule: first.quantile_rule.clone(),
        provenance,
        notes,
    })
}

/// Approximate 95% credible interval per coordinate: the uncentered mean
/// plus or minus half the percentile spread.
pub fn credible_interval(rec: &SummaryRecord) -> Vec<(f64, f64)> {
    (0..rec.dim())
        .map(|l| {
            let m = rec.mean[l] + rec.center[l];
            let half = 0.5 * (rec.q975[l] - rec.q025[l]);
            (m - half, m + half)
        })
        .collect()
}

fn check_same_dim(a: &SummaryRecord, b: &SummaryRecord) -> Result<()> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::Combine(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn mean_relative(approx: &[f64], reference: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (l, (a, r)) in approx.iter().zip(reference).enumerate() {
        if *r == 0.0 {
            return Err(Error::DegenerateReference(l));
        }
        acc += (a / r - 1.0).abs();
    }
    Ok(acc / approx.len() as f64)
}

/// Average over coordinates of `|len_approx / len_ref - 1|`, where `len` is
/// the 2.5–97.5 percentile spread.
pub fn relative_error_cil(approx: &SummaryRecord, reference: &SummaryRecord) -> Result<f64> {
    check_same_dim(approx, reference)?;
    let len = |r: &SummaryRecord| -> Vec<f64> { r.q975.iter().zip(&r.q025).map(|(h, l)| h - l).collect() };
    mean_relative(&len(approx), &len(reference))
}

/// Average over coordinates of `|sd_approx / sd_ref - 1|`.
pub fn relative_error_sd(approx: &SummaryRecord, reference: &SummaryRecord) -> Result<f64> {
    check_same_dim(approx, reference)?;
    mean_relative(&approx.sd, &reference.sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsoluteError {
    /// L1 norm of the difference of posterior means.
    pub raw: f64,
    /// The same divided by the number of coordinates.
    pub per_coordinate: f64,
}

/// Bias of the posterior mean, compared on the scale of `T`.
pub fn absolute_error_mean(approx: &SummaryRecord, reference: &SummaryRecord) -> Result<AbsoluteError> {
    check_same_dim(approx, reference)?;
    let raw: f64 = approx
        .uncentered_mean()
        .iter()
        .zip(reference.uncentered_mean())
        .map(|(a, r)| (a - r).abs())
        .sum();
    Ok(AbsoluteError {
        raw,
        per_coordinate: raw / approx.dim() as f64,
    })
}
