//! Dirichlet-process posterior draws: a `Beta(alpha, n)` share of the mass
//! goes to a truncated stick-breaking draw from the prior, the rest to the
//! rescaled Bayesian-bootstrap weights of the subset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Setup;
use crate::data::MaterializedSubset;
use crate::functionals::{CoefficientVector, FunctionalKind, FunctionalSpec, PreparedFunctional};
use crate::rng::{sample_beta, sample_normal};
use crate::{Error, Result};

/// Stick mass left after truncation is below this.
pub const DP_TRUNCATION_EPS: f64 = 1e-6;

/// Base measure `H` of the prior.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseMeasure {
    /// Independent standard normals for every non-intercept design column
    /// and the outcome; a fair coin for a binary (logistic) outcome.
    #[default]
    StandardNormal,
}

/// Number of sticks `K` with expected leftover mass `(alpha / (alpha + 1))^K`
/// below `eps`; zero when `alpha = 0`.
pub fn truncation_level(alpha: f64, eps: f64) -> usize {
    if alpha <= 0.0 {
        return 0;
    }
    let k = (eps.ln() / (alpha / (alpha + 1.0)).ln()).ceil();
    (k as usize).max(1)
}

pub(super) struct DpPrior {
    alpha: f64,
    n: f64,
    sticks: usize,
    intercept: bool,
    binary_outcome: bool,
}

impl DpPrior {
    pub fn new(setup: &Setup) -> Result<Self> {
        let spec = setup.spec;
        if spec.kind == FunctionalKind::Mixed {
            return Err(Error::Config(
                "engine.dp_base: the standard-normal base measure cannot generate clustered observations for the mixed functional".into(),
            ));
        }
        let alpha = setup.cfg.dp_alpha;
        Ok(Self {
            alpha,
            n: setup.n as f64,
            sticks: truncation_level(alpha, DP_TRUNCATION_EPS),
            intercept: spec.intercept,
            binary_outcome: spec.kind == FunctionalKind::Logistic,
        })
    }

    /// `T` at `R * P_DP + (1 - R) * sum_i w_i delta_{x_i}`.
    pub fn evaluate<G: Rng + ?Sized>(
        &self,
        spec: &FunctionalSpec,
        data: &MaterializedSubset,
        prepared: &PreparedFunctional,
        w: &[f64],
        rng: &mut G,
    ) -> Result<CoefficientVector> {
        let r = sample_beta(self.alpha, self.n, rng)?;
        if r == 0.0 {
            return prepared.evaluate(w);
        }
        let k = data.width;
        let mut design = data.design.clone();
        let mut y = data.y.clone();
        let mut weights: Vec<f64> = w.iter().map(|x| (1.0 - r) * x).collect();
        let mut remaining = 1.0;
        for s in 0..self.sticks {
            let mass = if s + 1 == self.sticks {
                remaining
            } else {
                let v = sample_beta(1.0, self.alpha, rng)?;
                let m = remaining * v;
                remaining -= m;
                m
            };
            for c in 0..k {
                design.push(if c == 0 && self.intercept {
                    1.0
                } else {
                    sample_normal(rng)
                });
            }
            y.push(if self.binary_outcome {
                f64::from(u8::from(rng.random_bool(0.5)))
            } else {
                sample_normal(rng)
            });
            weights.push(r * mass);
        }
        // Sticks that underflowed carry no mass; drop them.
        let keep: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        if keep.len() < weights.len() {
            design = keep.iter().flat_map(|&i| design[i * k..(i + 1) * k].to_vec()).collect();
            y = keep.iter().map(|&i| y[i]).collect();
            weights = keep.iter().map(|&i| weights[i]).collect();
        }
        let merged = MaterializedSubset::new(design, y, k)?;
        PreparedFunctional::new(spec, &merged)?.evaluate(&weights)
    }
}
