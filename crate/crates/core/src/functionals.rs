//! Weighted statistical functionals `T(P)` for a discrete weighted measure
//! `P = sum_i w_i delta_{x_i}`.
//!
//! Every functional is 0-homogeneous in the weights, so a Dirichlet draw and
//! the unnormalised Gamma variables it was built from give the same value.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::MaterializedSubset;
use crate::linalg::{self, SpdSolver};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionalKind {
    /// Weighted mean of the outcome column.
    Mean,
    /// Weighted least squares.
    Linear,
    /// Weighted logistic regression (maximum weighted likelihood).
    Logistic,
    /// Random-intercept GLS estimator with cluster weights.
    Mixed,
}

impl FunctionalKind {
    pub fn name(&self) -> &'static str {
        match self {
            FunctionalKind::Mean => "mean",
            FunctionalKind::Linear => "linear",
            FunctionalKind::Logistic => "logistic",
            FunctionalKind::Mixed => "mixed",
        }
    }
}

/// Weight matrix used in the mixed-model quadratic forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixedWeightMatrix {
    /// `A = V^-1`, the usual GLS weighting.
    #[default]
    Inverse,
    /// `A = V`, the covariance itself.
    Literal,
}

impl std::str::FromStr for MixedWeightMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse" => Ok(Self::Inverse),
            "literal" => Ok(Self::Literal),
            other => Err(Error::invalid(format!(
                "mixed weight matrix must be `inverse` or `literal`, got `{other}`"
            ))),
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_cluster_size() -> usize {
    3
}
fn default_max_iterations() -> usize {
    100
}
fn default_gradient_tolerance() -> f64 {
    1e-8
}
fn default_separation_cap() -> f64 {
    1e3
}

/// Declarative description of the statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    pub kind: FunctionalKind,
    pub outcome: String,
    #[serde(default)]
    pub predictors: Vec<String>,
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default = "default_cluster_size")]
    pub cluster_size: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_gradient_tolerance")]
    pub gradient_tolerance: f64,
    #[serde(default = "default_separation_cap")]
    pub separation_cap: f64,
    #[serde(default)]
    pub mixed_weight_matrix: MixedWeightMatrix,
}

impl FunctionalSpec {
    fn base(kind: FunctionalKind, outcome: &str, predictors: &[&str]) -> Self {
        Self {
            kind,
            outcome: outcome.to_string(),
            predictors: predictors.iter().map(|s| s.to_string()).collect(),
            intercept: true,
            group: None,
            cluster_size: default_cluster_size(),
            max_iterations: default_max_iterations(),
            gradient_tolerance: default_gradient_tolerance(),
            separation_cap: default_separation_cap(),
            mixed_weight_matrix: MixedWeightMatrix::Inverse,
        }
    }

    pub fn mean(column: &str) -> Self {
        Self::base(FunctionalKind::Mean, column, &[])
    }

    pub fn linear(outcome: &str, predictors: &[&str]) -> Self {
        Self::base(FunctionalKind::Linear, outcome, predictors)
    }

    pub fn logistic(outcome: &str, predictors: &[&str]) -> Self {
        Self::base(FunctionalKind::Logistic, outcome, predictors)
    }

    pub fn mixed(outcome: &str, predictors: &[&str], group: &str) -> Self {
        Self {
            group: Some(group.to_string()),
            ..Self::base(FunctionalKind::Mixed, outcome, predictors)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outcome.is_empty() {
            return Err(Error::Config("functional.outcome is empty".into()));
        }
        match self.kind {
            FunctionalKind::Mean => {
                if !self.predictors.is_empty() {
                    return Err(Error::Config("functional.predictors must be empty for `mean`".into()));
                }
            }
            FunctionalKind::Mixed => {
                if self.group.is_none() {
                    return Err(Error::Config("functional.group is required for `mixed`".into()));
                }
                if self.cluster_size < 1 {
                    return Err(Error::Config("functional.cluster_size must be at least 1".into()));
                }
            }
            _ => {}
        }
        if !self.intercept && self.predictors.is_empty() && self.kind != FunctionalKind::Mean {
            return Err(Error::Config("functional has an empty design".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("functional.max_iterations must be positive".into()));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::Config("functional.gradient_tolerance must be positive".into()));
        }
        if !(self.separation_cap > 0.0) {
            return Err(Error::Config("functional.separation_cap must be positive".into()));
        }
        Ok(())
    }

    /// Rows per resampling unit.
    pub fn unit_size(&self) -> usize {
        match self.kind {
            FunctionalKind::Mixed => self.cluster_size,
            _ => 1,
        }
    }

    /// Whether the functional has a sufficient-statistic decomposition
    /// `g(integral rho dP)` usable by the lossless engine.
    pub fn supports_lossless(&self) -> bool {
        matches!(self.kind, FunctionalKind::Mean | FunctionalKind::Linear)
    }
}

/// Coefficients in the coordinate order fixed by the design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoefficientVector(pub Vec<f64>);

impl CoefficientVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn checked(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularDesign {
                condition: f64::INFINITY,
            });
        }
        Ok(Self(values))
    }
}

fn check_weights(w: &[f64], expected: usize) -> Result<()> {
    if expected == 0 {
        return Err(Error::invalid("empty subset"));
    }
    if w.len() != expected {
        return Err(Error::invalid(format!("{} weights for {expected} units", w.len())));
    }
    if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::invalid("weights must be positive and finite"));
    }
    Ok(())
}

/// `sum_i w_i y_i / sum_i w_i`.
pub fn weighted_mean(data: &MaterializedSubset, w: &[f64]) -> Result<CoefficientVector> {
    check_weights(w, data.rows)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&wi, &yi) in w.iter().zip(&data.y) {
        num += wi * yi;
        den += wi;
    }
    CoefficientVector::checked(vec![num / den])
}

/// Solves `(sum w_i u_i u_i^T) beta = sum w_i u_i y_i`.
pub fn weighted_least_squares(data: &MaterializedSubset, w: &[f64]) -> Result<CoefficientVector> {
    check_weights(w, data.rows)?;
    let (gram, rhs) = linalg::weighted_normal_equations(&data.design, &data.y, data.width, w);
    CoefficientVector::checked(linalg::spd_solve(&gram, &rhs)?)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn linear_predictor(data: &MaterializedSubset, beta: &[f64], eta: &mut [f64]) {
    let k = data.width;
    for (i, e) in eta.iter_mut().enumerate() {
        let row = &data.design[i * k..(i + 1) * k];
        *e = row.iter().zip(beta).map(|(u, b)| u * b).sum();
    }
}

fn logistic_loglik(data: &MaterializedSubset, w: &[f64], eta: &[f64]) -> f64 {
    w.iter()
        .zip(&data.y)
        .zip(eta)
        .map(|((&wi, &yi), &e)| wi * (yi * e - softplus(e)))
        .sum()
}

/// Maximises `sum_i w_i [y_i u_i'b - log(1 + exp(u_i'b))]` by damped Newton
/// (IRLS with step halving), starting at zero.
///
/// Converges when the gradient max-norm drops below the spec's tolerance.
/// Separation is reported when the coefficients exceed the cap, or when the
/// gradient has vanished numerically while the Newton step has not (the
/// likelihood is still increasing towards infinity).
pub fn weighted_logistic(data: &MaterializedSubset, w: &[f64], spec: &FunctionalSpec) -> Result<CoefficientVector> {
    check_weights(w, data.rows)?;
    if data.y.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("logistic outcome must be 0 or 1"));
    }
    let total: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|x| x / total).collect();
    let k = data.width;
    let n = data.rows;
    let mut beta = vec![0.0f64; k];
    let mut eta = vec![0.0; n];
    let mut ll = logistic_loglik(data, &w, &eta);
    let mut info_w = vec![0.0; n];
    let mut cand = vec![0.0; k];
    let mut gmax = f64::INFINITY;

    for _ in 0..spec.max_iterations {
        let mut grad = vec![0.0; k];
        for i in 0..n {
            let p = sigmoid(eta[i]);
            let r = w[i] * (data.y[i] - p);
            let row = &data.design[i * k..(i + 1) * k];
            for (g, &u) in grad.iter_mut().zip(row) {
                *g += r * u;
            }
            info_w[i] = w[i] * p * (1.0 - p);
        }
        gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let beta_norm = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));

        let (info, _) = linalg::weighted_normal_equations(&data.design, &data.y, k, &info_w);
        let step = match SpdSolver::new(&info, k) {
            Ok(s) => s.solve(&grad),
            Err(e) => {
                if beta_norm > 10.0 {
                    return Err(Error::Separation(format!(
                        "information matrix degenerate at |beta|_inf = {beta_norm:.1}"
                    )));
                }
                return Err(e);
            }
        };
        let step_norm = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if gmax < spec.gradient_tolerance {
            if step_norm > 1.0 {
                return Err(Error::Separation(format!(
                    "likelihood flat (gradient {gmax:.1e}) while the Newton step is {step_norm:.2}"
                )));
            }
            return CoefficientVector::checked(beta);
        }

        let mut t = 1.0;
        loop {
            for j in 0..k {
                cand[j] = beta[j] + t * step[j];
            }
            linear_predictor(data, &cand, &mut eta);
            let ll_new = logistic_loglik(data, &w, &eta);
            if ll_new >= ll - 1e-14 * ll.abs() || t < 1e-10 {
                ll = ll_new;
                break;
            }
            t *= 0.5;
        }
        beta.copy_from_slice(&cand);
        if beta.iter().any(|b| b.abs() > spec.separation_cap) {
            return Err(Error::Separation(format!(
                "coefficients exceed the cap {}",
                spec.separation_cap
            )));
        }
    }
    Err(Error::NonConvergence {
        iterations: spec.max_iterations,
        gradient: gmax,
    })
}

/// Fitted random-intercept covariance `V = sigma2 I + tau2 J` for clusters
/// of size `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedCovariance {
    pub m: usize,
    /// Row-major `m x m`.
    pub v: Vec<f64>,
    pub sigma2: f64,
    pub tau2: f64,
}

impl MixedCovariance {
    pub fn from_components(m: usize, sigma2: f64, tau2: f64) -> Result<Self> {
        if m == 0 || !(sigma2 > 0.0) || tau2 < 0.0 {
            return Err(Error::invalid("covariance needs m >= 1, sigma2 > 0, tau2 >= 0"));
        }
        let mut v = vec![tau2; m * m];
        for i in 0..m {
            v[i * m + i] += sigma2;
        }
        Ok(Self { m, v, sigma2, tau2 })
    }

    pub fn identity(m: usize) -> Self {
        Self::from_components(m, 1.0, 0.0).expect("valid identity")
    }

    /// Matrix entering the quadratic forms.
    pub fn weight_matrix(&self, mode: MixedWeightMatrix) -> Result<Vec<f64>> {
        match mode {
            MixedWeightMatrix::Literal => Ok(self.v.clone()),
            MixedWeightMatrix::Inverse => Ok(SpdSolver::new(&self.v, self.m)?.inverse()),
        }
    }
}

/// Per-cluster sufficient statistics shared by every profile-likelihood evaluation.
struct ClusterMoments {
    k: usize,
    n_obs: f64,
    clusters: f64,
    m: f64,
    s_uu: Vec<f64>,
    s_uy: Vec<f64>,
    s_yy: f64,
    t_uu: Vec<f64>,
    t_uy: Vec<f64>,
    t_yy: f64,
}

impl ClusterMoments {
    fn new(data: &MaterializedSubset) -> Self {
        let k = data.width;
        let m = data.unit_size;
        let g = data.n_units();
        let s_uu = linalg::gram(&data.design, data.rows, k);
        let mut s_uy = vec![0.0; k];
        let mut s_yy = 0.0;
        let mut sums = vec![0.0; g * k];
        let mut sum_y = vec![0.0; g];
        for i in 0..data.rows {
            let row = data.row(i);
            let y = data.y[i];
            s_yy += y * y;
            let c = i / m;
            sum_y[c] += y;
            for j in 0..k {
                s_uy[j] += row[j] * y;
                sums[c * k + j] += row[j];
            }
        }
        let t_uu = linalg::gram(&sums, g, k);
        let mut t_uy = vec![0.0; k];
        let mut t_yy = 0.0;
        for c in 0..g {
            t_yy += sum_y[c] * sum_y[c];
            for j in 0..k {
                t_uy[j] += sums[c * k + j] * sum_y[c];
            }
        }
        Self {
            k,
            n_obs: data.rows as f64,
            clusters: g as f64,
            m: m as f64,
            s_uu,
            s_uy,
            s_yy,
            t_uu,
            t_uy,
            t_yy,
        }
    }

    /// Profile log-likelihood at variance ratio `lambda = tau2 / sigma2`,
    /// with the implied `sigma2`.
    fn profile(&self, lambda: f64) -> Result<(f64, f64)> {
        let kappa = lambda / (1.0 + self.m * lambda);
        let gram: Vec<f64> = self.s_uu.iter().zip(&self.t_uu).map(|(s, t)| s - kappa * t).collect();
        let rhs: Vec<f64> = self.s_uy.iter().zip(&self.t_uy).map(|(s, t)| s - kappa * t).collect();
        let beta = SpdSolver::new(&gram, self.k)?.solve(&rhs);
        let fit: f64 = beta.iter().zip(&rhs).map(|(b, r)| b * r).sum();
        let rss = (self.s_yy - kappa * self.t_yy - fit).max(f64::MIN_POSITIVE);
        let sigma2 = rss / self.n_obs;
        let ll = -0.5 * self.n_obs * sigma2.ln() - 0.5 * self.clusters * (self.m * lambda).ln_1p();
        Ok((ll, sigma2))
    }
}

/// Maximum-likelihood fit of the Gaussian random-intercept model, profiling
/// out the fixed effects and `sigma2` and searching the variance ratio on a
/// bounded log-scale grid refined by golden-section search.
pub fn estimate_mixed_covariance(data: &MaterializedSubset) -> Result<MixedCovariance> {
    let m = data.unit_size;
    if data.n_units() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} cluster(s); at least 2 are needed",
            data.n_units()
        )));
    }
    let mom = ClusterMoments::new(data);
    let (lo, hi) = (-18.0f64, 12.0f64);
    let grid = 61;
    let mut best_t = lo;
    let mut best_ll = f64::NEG_INFINITY;
    for i in 0..grid {
        let t = lo + (hi - lo) * i as f64 / (grid - 1) as f64;
        let (ll, _) = mom.profile(t.exp())?;
        if ll > best_ll {
            best_ll = ll;
            best_t = t;
        }
    }
    let step = (hi - lo) / (grid - 1) as f64;
    let (mut a, mut b) = ((best_t - step).max(lo), (best_t + step).min(hi));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = mom.profile(c.exp())?.0;
    let mut fd = mom.profile(d.exp())?.0;
    for _ in 0..80 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = mom.profile(c.exp())?.0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = mom.profile(d.exp())?.0;
        }
    }
    let t = 0.5 * (a + b);
    let mut lambda = t.exp();
    let (mut ll, mut sigma2) = mom.profile(lambda)?;
    // Boundary: the ratio may be exactly zero.
    let (ll0, s0) = mom.profile(0.0)?;
    if ll0 >= ll {
        lambda = 0.0;
        ll = ll0;
        sigma2 = s0;
    }
    let _ = ll;
    MixedCovariance::from_components(m, sigma2, (lambda * sigma2).max(0.0))
}

/// `(sum_i W_i U_i' A U_i)^-1 (sum_i W_i U_i' A Y_i)` with one weight per cluster.
pub fn weighted_mixed(
    data: &MaterializedSubset,
    w: &[f64],
    cov: &MixedCovariance,
    mode: MixedWeightMatrix,
) -> Result<CoefficientVector> {
    let t = transform_clusters(data, cov, mode)?;
    weighted_mixed_transformed(&t, w)
}

/// Rotate each cluster block by `L^T` where `A = L L^T`, turning the GLS
/// quadratic forms into ordinary weighted sums of squares.
fn transform_clusters(
    data: &MaterializedSubset,
    cov: &MixedCovariance,
    mode: MixedWeightMatrix,
) -> Result<MaterializedSubset> {
    let m = data.unit_size;
    if cov.m != m {
        return Err(Error::invalid(format!(
            "covariance is {}x{} but clusters have {m} rows",
            cov.m, cov.m
        )));
    }
    let a = cov.weight_matrix(mode)?;
    let chol = nalgebra::Cholesky::new(DMatrix::from_row_slice(m, m, &a)).ok_or(Error::SingularDesign {
        condition: f64::INFINITY,
    })?;
    let l = chol.l();
    let k = data.width;
    let mut design = vec![0.0; data.rows * k];
    let mut y = vec![0.0; data.rows];
    for c in 0..data.n_units() {
        let base = c * m;
        // Row r of L^T U_i is sum_s L[s, r] * U_i[s, :].
        for r in 0..m {
            let out = &mut design[(base + r) * k..(base + r + 1) * k];
            let mut yr = 0.0;
            for s in r..m {
                let coef = l[(s, r)];
                if coef == 0.0 {
                    continue;
                }
                let src = data.row(base + s);
                for j in 0..k {
                    out[j] += coef * src[j];
                }
                yr += coef * data.y[base + s];
            }
            y[base + r] = yr;
        }
    }
    Ok(MaterializedSubset {
        design,
        y,
        groups: data.groups.clone(),
        rows: data.rows,
        width: k,
        unit_size: m,
        column_names: data.column_names.clone(),
    })
}

fn weighted_mixed_transformed(t: &MaterializedSubset, w: &[f64]) -> Result<CoefficientVector> {
    check_weights(w, t.n_units())?;
    let m = t.unit_size;
    let row_w: Vec<f64> = w.iter().flat_map(|&x| std::iter::repeat_n(x, m)).collect();
    let (gram, rhs) = linalg::weighted_normal_equations(&t.design, &t.y, t.width, &row_w);
    CoefficientVector::checked(linalg::spd_solve(&gram, &rhs)?)
}

/// A functional bound to one materialised subset, with any data-dependent
/// nuisance quantities (the mixed-model covariance) fitted once.
pub struct PreparedFunctional<'a> {
    spec: &'a FunctionalSpec,
    data: &'a MaterializedSubset,
    mixed: Option<(MixedCovariance, MaterializedSubset)>,
}

impl<'a> PreparedFunctional<'a> {
    pub fn new(spec: &'a FunctionalSpec, data: &'a MaterializedSubset) -> Result<Self> {
        if data.rows == 0 {
            return Err(Error::invalid("empty subset"));
        }
        let mixed = if spec.kind == FunctionalKind::Mixed {
            let cov = estimate_mixed_covariance(data)?;
            let t = transform_clusters(data, &cov, spec.mixed_weight_matrix)?;
            Some((cov, t))
        } else {
            None
        };
        Ok(Self { spec, data, mixed })
    }

    /// Use a covariance fitted elsewhere.
    pub fn with_covariance(
        spec: &'a FunctionalSpec,
        data: &'a MaterializedSubset,
        cov: MixedCovariance,
    ) -> Result<Self> {
        let t = transform_clusters(data, &cov, spec.mixed_weight_matrix)?;
        Ok(Self {
            spec,
            data,
            mixed: Some((cov, t)),
        })
    }

    pub fn covariance(&self) -> Option<&MixedCovariance> {
        self.mixed.as_ref().map(|(c, _)| c)
    }

    pub fn n_units(&self) -> usize {
        self.data.n_units()
    }

    pub fn dim(&self) -> usize {
        self.data.width
    }

    /// `T` at the measure putting `unit_weights[i]` on unit `i`.
    pub fn evaluate(&self, unit_weights: &[f64]) -> Result<CoefficientVector> {
        match self.spec.kind {
            FunctionalKind::Mean => weighted_mean(self.data, unit_weights),
            FunctionalKind::Linear => weighted_least_squares(self.data, unit_weights),
            FunctionalKind::Logistic => weighted_logistic(self.data, unit_weights, self.spec),
            FunctionalKind::Mixed => {
                let (_, t) = self.mixed.as_ref().expect("mixed functional is prepared");
                weighted_mixed_transformed(t, unit_weights)
            }
        }
    }

    /// `T` at the empirical measure (uniform weights).
    pub fn empirical(&self) -> Result<CoefficientVector> {
        let units = self.n_units();
        self.evaluate(&vec![1.0 / units as f64; units])
    }
}

/// `T(P_n)` for the subset: the functional at uniform weights `1 / b`.
pub fn empirical_value(data: &MaterializedSubset, spec: &FunctionalSpec) -> Result<CoefficientVector> {
    PreparedFunctional::new(spec, data)?.empirical()
}

/// Mergeable sufficient statistics `(sum_i G_i rho(x_i), sum_i G_i)` for the
/// least-squares decomposition `rho_1 = u u^T`, `rho_2 = u y`, `g(M, v) = M^-1 v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMoments {
    pub k: usize,
    /// Row-major `k x k`.
    pub gram: Vec<f64>,
    pub rhs: Vec<f64>,
    pub total_weight: f64,
}

impl LinearMoments {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            gram: vec![0.0; k * k],
            rhs: vec![0.0; k],
            total_weight: 0.0,
        }
    }

    pub fn merge(&mut self, other: &LinearMoments) {
        debug_assert_eq!(self.k, other.k);
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        for (a, b) in self.rhs.iter_mut().zip(&other.rhs) {
            *a += b;
        }
        self.total_weight += other.total_weight;
    }

    /// `g(S / N)`.
    pub fn finish(&self) -> Result<CoefficientVector> {
        if !(self.total_weight > 0.0) {
            return Err(Error::invalid("no weight accumulated"));
        }
        let inv = 1.0 / self.total_weight;
        let m: Vec<f64> = self.gram.iter().map(|x| x * inv).collect();
        let v: Vec<f64> = self.rhs.iter().map(|x| x * inv).collect();
        CoefficientVector::checked(linalg::spd_solve(&m, &v)?)
    }
}

/// Partial sums of the registered `rho` for one subset under unnormalised
/// weights (one per row).
pub fn rho_moments(data: &MaterializedSubset, spec: &FunctionalSpec, gamma_weights: &[f64]) -> Result<LinearMoments> {
    if !spec.supports_lossless() {
        return Err(Error::UnsupportedForLossless(spec.kind.name().into()));
    }
    if gamma_weights.len() != data.rows {
        return Err(Error::invalid("one weight per row is required"));
    }
    if gamma_weights.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::invalid("weights must be positive and finite"));
    }
    let (gram, rhs) = linalg::weighted_normal_equations(&data.design, &data.y, data.width, gamma_weights);
    Ok(LinearMoments {
        k: data.width,
        gram,
        rhs,
        total_weight: gamma_weights.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, SeedSpec};
    use nalgebra::DVector;

    fn simulated_linear(n: usize, p: usize, seed: u64) -> MaterializedSubset {
        let mut r = SeedSpec::new(seed, 0).rng();
        let k = p + 1;
        let mut design = Vec::with_capacity(n * k);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            design.push(1.0);
            let mut lin = 1.0;
            for _ in 0..p {
                let x = rng::sample_student_t(3.0, &mut r).unwrap();
                design.push(x);
                lin += x;
            }
            y.push(lin + rng::sample_skew_normal(-0.71, 1.0, 2.0, &mut r).unwrap());
        }
        MaterializedSubset::new(design, y, k).unwrap()
    }

    /// Dense normal-equations oracle: explicit loops and an LU solve.
    fn lu_oracle(data: &MaterializedSubset, w: &[f64]) -> Vec<f64> {
        let k = data.width;
        let mut m = DMatrix::<f64>::zeros(k, k);
        let mut v = DVector::<f64>::zeros(k);
        for i in 0..data.rows {
            let row = data.row(i);
            for a in 0..k {
                v[a] += w[i] * row[a] * data.y[i];
                for b in 0..k {
                    m[(a, b)] += w[i] * row[a] * row[b];
                }
            }
        }
        m.lu().solve(&v).unwrap().iter().copied().collect()
    }

    #[test]
    fn wls_two_point_line() {
        let d = MaterializedSubset::new(vec![1.0, 0.0, 1.0, 1.0], vec![2.0, 5.0], 2).unwrap();
        for w in [[0.5, 0.5], [0.1, 0.9], [0.99, 0.01]] {
            let b = weighted_least_squares(&d, &w).unwrap();
            assert!((b.0[0] - 2.0).abs() < 1e-12);
            assert!((b.0[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wls_matches_lu_oracle() {
        let d = simulated_linear(500, 5, 1);
        let w = vec![1.0 / 500.0; 500];
        let b = weighted_least_squares(&d, &w).unwrap();
        let o = lu_oracle(&d, &w);
        for (x, y) in b.0.iter().zip(&o) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn duplicated_column_is_singular() {
        let mut r = SeedSpec::new(2, 0).rng();
        let mut design = Vec::new();
        let mut y = Vec::new();
        for _ in 0..50 {
            let x = rng::sample_normal(&mut r);
            design.extend([1.0, x, x]);
            y.push(x + rng::sample_normal(&mut r));
        }
        let d = MaterializedSubset::new(design, y, 3).unwrap();
        assert!(matches!(
            weighted_least_squares(&d, &[0.02; 50]),
            Err(Error::SingularDesign { .. })
        ));
    }

    #[test]
    fn logistic_all_ones_is_separation() {
        let d = MaterializedSubset::new(vec![1.0; 20], vec![1.0; 20], 1).unwrap();
        let spec = FunctionalSpec::logistic("y", &[]);
        assert!(matches!(
            weighted_logistic(&d, &[0.05; 20], &spec),
            Err(Error::Separation(_))
        ));
    }

    #[test]
    fn logistic_symmetric_data_has_zero_intercept() {
        let mut design = Vec::new();
        let mut y = Vec::new();
        let mut push = |u: f64, label: f64, times: usize| {
            for _ in 0..times {
                design.extend([1.0, u]);
                y.push(label);
            }
        };
        push(-1.0, 0.0, 7);
        push(1.0, 1.0, 7);
        push(-1.0, 1.0, 3);
        push(1.0, 0.0, 3);
        let d = MaterializedSubset::new(design, y, 2).unwrap();
        let spec = FunctionalSpec::logistic("y", &["u"]);
        let b = weighted_logistic(&d, &[1.0 / 20.0; 20], &spec).unwrap();
        assert!(b.0[0].abs() < 1e-8, "intercept {}", b.0[0]);
        assert!((b.0[1] - (7.0f64 / 3.0).ln()).abs() < 1e-7, "slope {}", b.0[1]);
    }

    fn simulated_logistic(n: usize, p: usize, seed: u64) -> MaterializedSubset {
        let mut r = SeedSpec::new(seed, 0).rng();
        let k = p + 1;
        let mut design = Vec::with_capacity(n * k);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            design.push(1.0);
            let mut eta = -0.3;
            for j in 0..p {
                let x = rng::sample_normal(&mut r);
                design.push(x);
                eta += 0.5 * x * (j as f64 + 1.0) / p as f64;
            }
            let u: f64 = rand::Rng::random(&mut r);
            y.push(if u < 1.0 / (1.0 + (-eta).exp()) { 1.0 } else { 0.0 });
        }
        MaterializedSubset::new(design, y, k).unwrap()
    }

    /// Plain Newton–Raphson with an LU solve and no damping, run to 1e-10.
    fn irls_oracle(d: &MaterializedSubset, w: &[f64]) -> Vec<f64> {
        let k = d.width;
        let mut beta = DVector::<f64>::zeros(k);
        for _ in 0..100 {
            let mut g = DVector::<f64>::zeros(k);
            let mut h = DMatrix::<f64>::zeros(k, k);
            for i in 0..d.rows {
                let u = DVector::from_row_slice(d.row(i));
                let p = 1.0 / (1.0 + (-u.dot(&beta)).exp());
                g += &u * (w[i] * (d.y[i] - p));
                h += &u * u.transpose() * (w[i] * p * (1.0 - p));
            }
            let step = h.lu().solve(&g).unwrap();
            beta += &step;
            if g.amax() < 1e-10 {
                break;
            }
        }
        beta.iter().copied().collect()
    }

    #[test]
    fn logistic_matches_independent_newton() {
        let d = simulated_logistic(1000, 3, 3);
        let w = vec![1e-3; 1000];
        let spec = FunctionalSpec::logistic("y", &["a", "b", "c"]);
        let b = weighted_logistic(&d, &w, &spec).unwrap();
        let o = irls_oracle(&d, &w);
        for (x, y) in b.0.iter().zip(&o) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        let e = empirical_value(&d, &spec).unwrap();
        assert_eq!(e, b);
    }

    #[test]
    fn logistic_gradient_below_tolerance_at_solution() {
        let d = simulated_logistic(400, 4, 4);
        let spec = FunctionalSpec::logistic("y", &[]);
        let mut r = SeedSpec::new(4, 1).rng();
        for _ in 0..20 {
            let w = rng::dirichlet_flat(400, &mut r).unwrap();
            let b = weighted_logistic(&d, &w, &spec).unwrap();
            let mut g = vec![0.0; d.width];
            for i in 0..d.rows {
                let row = d.row(i);
                let eta: f64 = row.iter().zip(&b.0).map(|(u, c)| u * c).sum();
                let p = sigmoid(eta);
                for j in 0..d.width {
                    g[j] += w[i] * (d.y[i] - p) * row[j];
                }
            }
            assert!(g.iter().all(|x| x.abs() < spec.gradient_tolerance));
        }
    }

    #[test]
    fn logistic_rejects_non_binary_outcome() {
        let d = MaterializedSubset::new(vec![1.0; 3], vec![0.0, 1.0, 2.0], 1).unwrap();
        assert!(weighted_logistic(&d, &[1.0; 3], &FunctionalSpec::logistic("y", &[])).is_err());
    }

    fn simulated_mixed(clusters: usize, p: usize, sigma2: f64, tau2: f64, seed: u64) -> MaterializedSubset {
        let mut r = SeedSpec::new(seed, 0).rng();
        let k = p + 1;
        let mut design = Vec::new();
        let mut y = Vec::new();
        for _ in 0..clusters {
            let a = tau2.sqrt() * rng::sample_normal(&mut r);
            for _ in 0..3 {
                design.push(1.0);
                let mut lin = 1.0;
                for _ in 0..p {
                    let x = rng::sample_normal(&mut r);
                    design.push(x);
                    lin += x;
                }
                y.push(lin + a + sigma2.sqrt() * rng::sample_normal(&mut r));
            }
        }
        MaterializedSubset::new(design, y, k).unwrap().with_clusters(3).unwrap()
    }

    #[test]
    fn mixed_covariance_recovers_components() {
        let d = simulated_mixed(2000, 2, 1.0, 0.0, 5);
        let c = estimate_mixed_covariance(&d).unwrap();
        assert!(c.tau2 < 0.05, "tau2 {}", c.tau2);

        let d = simulated_mixed(2000, 2, 1.0, 4.0, 6);
        let c = estimate_mixed_covariance(&d).unwrap();
        assert!((c.tau2 - 4.0).abs() < 0.5, "tau2 {}", c.tau2);
        assert!((c.sigma2 - 1.0).abs() < 0.1, "sigma2 {}", c.sigma2);
        for i in 0..3 {
            for j in 0..3 {
                assert!((c.v[i * 3 + j] - c.v[j * 3 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixed_covariance_needs_two_clusters() {
        let d = simulated_mixed(1, 1, 1.0, 1.0, 7);
        assert!(matches!(estimate_mixed_covariance(&d), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn mixed_with_identity_is_cluster_weighted_ls() {
        let d = simulated_mixed(200, 3, 1.0, 2.0, 8);
        let mut r = SeedSpec::new(8, 1).rng();
        let w = rng::dirichlet_flat(200, &mut r).unwrap();
        let id = MixedCovariance::identity(3);
        let b = weighted_mixed(&d, &w, &id, MixedWeightMatrix::Inverse).unwrap();
        let row_w: Vec<f64> = w.iter().flat_map(|&x| [x, x, x]).collect();
        let o = lu_oracle(&d, &row_w);
        for (x, y) in b.0.iter().zip(&o) {
            assert!((x - y).abs() < 1e-10);
        }
        // tau2 = 0 makes A proportional to the identity.
        let flat = MixedCovariance::from_components(3, 2.5, 0.0).unwrap();
        let b2 = weighted_mixed(&d, &w, &flat, MixedWeightMatrix::Inverse).unwrap();
        let ls = weighted_least_squares(&d, &row_w).unwrap();
        for (x, y) in b2.0.iter().zip(&ls.0) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn mixed_quadratic_forms_match_direct_gls() {
        let d = simulated_mixed(50, 2, 1.0, 1.5, 9);
        let cov = MixedCovariance::from_components(3, 0.7, 1.3).unwrap();
        let mut r = SeedSpec::new(9, 1).rng();
        let w = rng::dirichlet_flat(50, &mut r).unwrap();
        for mode in [MixedWeightMatrix::Inverse, MixedWeightMatrix::Literal] {
            let a = DMatrix::from_row_slice(3, 3, &cov.weight_matrix(mode).unwrap());
            let k = d.width;
            let mut m = DMatrix::<f64>::zeros(k, k);
            let mut v = DVector::<f64>::zeros(k);
            for c in 0..50 {
                let u = DMatrix::from_fn(3, k, |i, j| d.row(3 * c + i)[j]);
                let yc = DVector::from_fn(3, |i, _| d.y[3 * c + i]);
                m += u.transpose() * &a * &u * w[c];
                v += u.transpose() * &a * yc * w[c];
            }
            let o = m.lu().solve(&v).unwrap();
            let b = weighted_mixed(&d, &w, &cov, mode).unwrap();
            for (x, y) in b.0.iter().zip(o.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mixed_consistent_at_moderate_n() {
        let d = simulated_mixed(1000, 5, 3.0, 0.5, 10);
        let spec = FunctionalSpec::mixed("y", &[], "g");
        let b = empirical_value(&d, &spec).unwrap();
        assert!(b.0.iter().all(|x| (x - 1.0).abs() < 0.1), "{:?}", b.0);
    }

    #[test]
    fn empirical_linear_is_uniform_wls() {
        let d = simulated_linear(120, 3, 11);
        let spec = FunctionalSpec::linear("y", &[]);
        let e = empirical_value(&d, &spec).unwrap();
        let w = weighted_least_squares(&d, &vec![1.0 / 120.0; 120]).unwrap();
        assert_eq!(e, w);
        let empty = MaterializedSubset::new(vec![], vec![], 4).unwrap();
        assert!(matches!(
            empirical_value(&empty, &spec),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn rho_moments_constant_rows() {
        let d = MaterializedSubset::new(vec![1.0; 30], vec![4.25; 30], 1).unwrap();
        let mut r = SeedSpec::new(12, 0).rng();
        let g: Vec<f64> = (0..30).map(|_| rng::sample_gamma(1.0, &mut r).unwrap()).collect();
        let mom = rho_moments(&d, &FunctionalSpec::linear("y", &[]), &g).unwrap();
        assert!((mom.finish().unwrap().0[0] - 4.25).abs() < 1e-12);
    }

    #[test]
    fn rho_moments_merge_and_normalisation() {
        let d = simulated_linear(400, 4, 13);
        let spec = FunctionalSpec::linear("y", &[]);
        let mut r = SeedSpec::new(13, 0).rng();
        let g: Vec<f64> = (0..400).map(|_| rng::sample_gamma(1.0, &mut r).unwrap()).collect();
        let whole = rho_moments(&d, &spec, &g).unwrap();
        let mut merged = LinearMoments::zeros(d.width);
        for chunk in 0..4 {
            let ids: Vec<usize> = (chunk * 100..(chunk + 1) * 100).collect();
            let part = d.select_units(&ids);
            merged.merge(&rho_moments(&part, &spec, &g[chunk * 100..(chunk + 1) * 100]).unwrap());
        }
        for (a, b) in whole.gram.iter().zip(&merged.gram) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!((whole.total_weight - merged.total_weight).abs() <= 1e-12 * whole.total_weight);

        let total: f64 = g.iter().sum();
        let w: Vec<f64> = g.iter().map(|x| x / total).collect();
        let b1 = whole.finish().unwrap();
        let b2 = weighted_least_squares(&d, &w).unwrap();
        for (x, y) in b1.0.iter().zip(&b2.0) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn rho_moments_rejects_unregistered_kinds() {
        let d = MaterializedSubset::new(vec![1.0; 3], vec![0.0, 1.0, 0.0], 1).unwrap();
        let spec = FunctionalSpec::logistic("y", &[]);
        assert!(matches!(
            rho_moments(&d, &spec, &[1.0; 3]),
            Err(Error::UnsupportedForLossless(_))
        ));
    }

    #[test]
    fn weighted_mean_matches_dot_product() {
        let d = simulated_linear(64, 0, 14);
        let mut r = SeedSpec::new(14, 1).rng();
        let w = rng::dirichlet_flat(64, &mut r).unwrap();
        let got = weighted_mean(&d, &w).unwrap().0[0];
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..64 {
            num += w[i] * d.y[i];
            den += w[i];
        }
        assert_eq!(got.to_bits(), (num / den).to_bits());
        let dot: f64 = w.iter().zip(&d.y).map(|(a, b)| a * b).sum();
        assert!((got - dot).abs() <= 1e-13 * dot.abs().max(1.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn functionals_are_scale_invariant(seed in 0u64..1000, scale in 1e-3f64..1e3) {
                let d = simulated_linear(60, 2, seed);
                let mut r = SeedSpec::new(seed, 9).rng();
                let w = rng::dirichlet_flat(60, &mut r).unwrap();
                let ws: Vec<f64> = w.iter().map(|x| x * scale).collect();
                let a = weighted_least_squares(&d, &w).unwrap();
                let b = weighted_least_squares(&d, &ws).unwrap();
                for (x, y) in a.0.iter().zip(&b.0) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
                let m1 = weighted_mean(&d, &w).unwrap().0[0];
                let m2 = weighted_mean(&d, &ws).unwrap().0[0];
                prop_assert!((m1 - m2).abs() < 1e-10);

                let ld = simulated_logistic(80, 2, seed);
                let lw = rng::dirichlet_flat(80, &mut r).unwrap();
                let lws: Vec<f64> = lw.iter().map(|x| x * scale).collect();
                let spec = FunctionalSpec::logistic("y", &[]);
                let l1 = weighted_logistic(&ld, &lw, &spec).unwrap();
                let l2 = weighted_logistic(&ld, &lws, &spec).unwrap();
                for (x, y) in l1.0.iter().zip(&l2.0) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
            }

            #[test]
            fn functionals_are_permutation_invariant(seed in 0u64..1000) {
                let d = simulated_linear(40, 2, seed);
                let mut r = SeedSpec::new(seed, 3).rng();
                let w = rng::dirichlet_flat(40, &mut r).unwrap();
                let mut order: Vec<usize> = (0..40).collect();
                for i in (1..40).rev() {
                    let j = rand::Rng::random_range(&mut r, 0..=i);
                    order.swap(i, j);
                }
                let dp = d.select_units(&order);
                let wp: Vec<f64> = order.iter().map(|&i| w[i]).collect();
                let a = weighted_least_squares(&d, &w).unwrap();
                let b = weighted_least_squares(&dp, &wp).unwrap();
                for (x, y) in a.0.iter().zip(&b.0) {
                    prop_assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
                }
            }
        }
    }
}
