//! Reproducible random streams and variate generators.
//!
//! A [`SeedSpec`] names one independent stream: the master seed keys a
//! ChaCha8 generator and the stream id selects one of its 2^64 disjoint
//! streams. Stream ids are derived from `(tag, subset, replicate)` so that
//! parallel workers never need to coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Concrete generator behind every stream.
pub type Stream = ChaCha8Rng;

/// Purpose of a stream; mixed into the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamTag {
    Bb = 1,
    Blbb = 2,
    Sdbb = 3,
    Lossless = 4,
    DpPrior = 5,
    Partition = 6,
    Dgp = 7,
    Replicate = 8,
    Other = 9,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self { master_seed, stream_id }
    }

    /// Stream for work item `(subset, replicate)` of a given purpose.
    pub fn derive(master_seed: u64, tag: StreamTag, subset: u64, replicate: u64) -> Self {
        let h = splitmix64(tag as u64);
        let h = splitmix64(h ^ subset);
        let h = splitmix64(h ^ replicate.rotate_left(32));
        Self::new(master_seed, h)
    }

    pub fn rng(&self) -> Stream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Dirichlet draw attached to the row (or cluster) ids it weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(indices: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if indices.len() != weights.len() {
            return Err(Error::invalid("indices and weights differ in length"));
        }
        if weights.is_empty() {
            return Err(Error::invalid("empty weight vector"));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::invalid("weights must lie in (0, 1]"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate indices in weight vector"));
        }
        Ok(Self { indices, weights })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Gamma(shape, 1) sampler using the Marsaglia–Tsang squeeze method.
///
/// Shapes below one are boosted: `G(a) = G(a + 1) * U^(1/a)`.
#[derive(Debug, Clone, Copy)]
pub struct GammaSampler {
    shape: f64,
    d: f64,
    c: f64,
    boosted: bool,
}

impl GammaSampler {
    pub fn new(shape: f64) -> Result<Self> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::invalid(format!(
                "gamma shape must be positive and finite, got {shape}"
            )));
        }
        let boosted = shape < 1.0;
        let base = if boosted { shape + 1.0 } else { shape };
        let d = base - 1.0 / 3.0;
        Ok(Self {
            shape,
            d,
            c: 1.0 / (9.0 * d).sqrt(),
            boosted,
        })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = loop {
            let x: f64 = rng.sample(StandardNormal);
            let v = 1.0 + self.c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u: f64 = rng.random();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + self.d * (1.0 - v + v.ln()) {
                break self.d * v;
            }
        };
        if self.boosted {
            let u: f64 = rng.random();
            g * u.powf(1.0 / self.shape)
        } else {
            g
        }
    }

    /// Draw conditioned on being strictly positive. Underflow to zero has
    /// probability zero in exact arithmetic; such draws are redrawn.
    pub fn sample_positive<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let g = self.sample(rng);
            if g > 0.0 {
                return g;
            }
        }
    }
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> Result<f64> {
    Ok(GammaSampler::new(shape)?.sample(rng))
}

/// Fill `out` with a Dirichlet(c, ..., c) draw.
pub fn fill_dirichlet<R: Rng + ?Sized>(out: &mut [f64], c: f64, rng: &mut R) -> Result<()> {
    if out.is_empty() {
        return Err(Error::invalid("Dirichlet dimension must be at least 1"));
    }
    let gamma = GammaSampler::new(c)?;
    loop {
        let mut total = 0.0;
        for w in out.iter_mut() {
            *w = gamma.sample_positive(rng);
            total += *w;
        }
        if total.is_finite() {
            let inv = 1.0 / total;
            let mut ok = true;
            for w in out.iter_mut() {
                *w *= inv;
                ok &= *w > 0.0;
            }
            if ok {
                return Ok(());
            }
        }
    }
}

/// Dirichlet(1, ..., 1) weights of dimension `m`.
pub fn dirichlet_flat<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Vec<f64>> {
    let mut w = vec![0.0; m];
    fill_dirichlet(&mut w, 1.0, rng)?;
    Ok(w)
}

/// Dirichlet(c, ..., c) weights of dimension `m`, the rescaled law that
/// makes `m` points behave like `c * m` points. Requires `c >= 1`.
pub fn dirichlet_rescaled<R: Rng + ?Sized>(m: usize, c: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(c >= 1.0) || !c.is_finite() {
        return Err(Error::invalid(format!(
            "rescale concentration must be finite and >= 1, got {c}"
        )));
    }
    let mut w = vec![0.0; m];
    fill_dirichlet(&mut w, c, rng)?;
    Ok(w)
}

/// Beta(a, b) via two Gamma draws. `a = 0` yields exactly 0.
pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if a < 0.0 || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid(format!(
            "beta parameters must satisfy a >= 0, b > 0; got ({a}, {b})"
        )));
    }
    if a == 0.0 {
        return Ok(0.0);
    }
    let x = GammaSampler::new(a)?.sample(rng);
    let y = GammaSampler::new(b)?.sample(rng);
    if x + y == 0.0 {
        // Both gammas underflowed (tiny shapes); fall back to the limit mass.
        return Ok(if a >= b { 1.0 } else { 0.0 });
    }
    Ok(x / (x + y))
}

/// Skew-normal draw via `location + scale * (delta |Z1| + sqrt(1 - delta^2) Z2)`.
pub fn sample_skew_normal<R: Rng + ?Sized>(location: f64, scale: f64, slant: f64, rng: &mut R) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!(
            "skew-normal scale must be positive, got {scale}"
        )));
    }
    let delta = slant / (1.0 + slant * slant).sqrt();
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    Ok(location + scale * (delta * z1.abs() + (1.0 - delta * delta).sqrt() * z2))
}

/// Student-t draw as `Z / sqrt(chi2_df / df)`.
pub fn sample_student_t<R: Rng + ?Sized>(df: f64, rng: &mut R) -> Result<f64> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::invalid(format!("degrees of freedom must be positive, got {df}")));
    }
    let z: f64 = rng.sample(StandardNormal);
    let chi2 = 2.0 * GammaSampler::new(0.5 * df)?.sample_positive(rng);
    Ok(z / (chi2 / df).sqrt())
}

/// Standard normal draw.
pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{ks_one_sample, ks_two_sample};

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    fn stream(id: u64) -> Stream {
        SeedSpec::new(20240601, id).rng()
    }

    #[test]
    fn same_seed_same_sequence() {
        let a: Vec<f64> = (0..50)
            .map({
                let mut r = stream(3);
                move |_| sample_gamma(2.5, &mut r).unwrap()
            })
            .collect();
        let b: Vec<f64> = (0..50)
            .map({
                let mut r = stream(3);
                move |_| sample_gamma(2.5, &mut r).unwrap()
            })
            .collect();
        assert_eq!(a, b);
        let mut r = stream(4);
        let c: Vec<f64> = (0..50).map(|_| sample_gamma(2.5, &mut r).unwrap()).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn derived_streams_differ_by_every_field() {
        let base = SeedSpec::derive(1, StreamTag::Blbb, 3, 7);
        assert_ne!(base, SeedSpec::derive(1, StreamTag::Sdbb, 3, 7));
        assert_ne!(base, SeedSpec::derive(1, StreamTag::Blbb, 4, 7));
        assert_ne!(base, SeedSpec::derive(1, StreamTag::Blbb, 3, 8));
        assert_ne!(
            SeedSpec::derive(1, StreamTag::Blbb, 1, 0).stream_id,
            SeedSpec::derive(1, StreamTag::Blbb, 0, 1).stream_id
        );
    }

    #[test]
    fn gamma_rejects_non_positive_shape() {
        let mut r = stream(0);
        assert!(sample_gamma(0.0, &mut r).is_err());
        assert!(sample_gamma(-1.0, &mut r).is_err());
        assert!(sample_gamma(f64::NAN, &mut r).is_err());
    }

    #[test]
    fn gamma_shape_one_has_unit_mean() {
        let mut r = stream(1);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_gamma(1.0, &mut r).unwrap()).collect();
        let (m, _) = mean_var(&xs);
        assert!((m - 1.0).abs() < 0.02, "mean {m}");
    }

    #[test]
    fn gamma_shape_hundred_moments() {
        let mut r = stream(2);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_gamma(100.0, &mut r).unwrap()).collect();
        let (m, v) = mean_var(&xs);
        // se(mean) = sqrt(100/n); se(var) ~ sqrt((mu4 - s^4)/n) with mu4 = 3s^4 + 6*100 for Gamma.
        let se_m = (100.0 / n as f64).sqrt();
        let se_v = ((2.0 * 100.0 * 100.0 + 600.0) / n as f64).sqrt();
        assert!((m - 100.0).abs() < 3.0 * se_m, "mean {m}");
        assert!((v - 100.0).abs() < 3.0 * se_v, "var {v}");
    }

    #[test]
    fn gamma_small_shape_mean() {
        let mut r = stream(5);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_gamma(0.3, &mut r).unwrap()).collect();
        let (m, _) = mean_var(&xs);
        assert!((m - 0.3).abs() < 3.0 * (0.3f64 / 1e5).sqrt(), "mean {m}");
    }

    #[test]
    fn dirichlet_flat_edge_cases() {
        let mut r = stream(6);
        assert!(dirichlet_flat(0, &mut r).is_err());
        assert_eq!(dirichlet_flat(1, &mut r).unwrap(), vec![1.0]);
        let w = dirichlet_flat(5, &mut r).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn dirichlet_flat_component_mean() {
        let mut r = stream(7);
        let n = 100_000;
        let m: f64 = (0..n).map(|_| dirichlet_flat(4, &mut r).unwrap()[0]).sum::<f64>() / n as f64;
        assert!((m - 0.25).abs() < 0.005, "mean {m}");
    }

    #[test]
    fn rescaled_rejects_shrinking_concentration() {
        let mut r = stream(8);
        assert!(dirichlet_rescaled(3, 0.5, &mut r).is_err());
        assert!(dirichlet_rescaled(0, 2.0, &mut r).is_err());
    }

    #[test]
    fn rescaled_with_unit_concentration_matches_flat() {
        let mut r1 = stream(9);
        let mut r2 = stream(10);
        let a: Vec<f64> = (0..10_000).map(|_| dirichlet_flat(5, &mut r1).unwrap()[0]).collect();
        let b: Vec<f64> = (0..10_000)
            .map(|_| dirichlet_rescaled(5, 1.0, &mut r2).unwrap()[0])
            .collect();
        assert!(ks_two_sample(&a, &b).p_value > 0.01);
    }

    #[test]
    fn rescaled_large_concentration_concentrates() {
        let mut r = stream(11);
        let hits = (0..10_000)
            .filter(|_| {
                let w = dirichlet_rescaled(2, 1e4, &mut r).unwrap();
                w.iter().all(|x| (x - 0.5).abs() < 0.02)
            })
            .count();
        assert!(hits as f64 >= 0.99 * 10_000.0, "hits {hits}");
    }

    #[test]
    fn rescaled_component_variance() {
        // Var(W1) = (1/m)(1 - 1/m) / (c m + 1) = 0.09 / 31.
        let mut r = stream(12);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| dirichlet_rescaled(10, 3.0, &mut r).unwrap()[0])
            .collect();
        let (_, v) = mean_var(&xs);
        let target = 0.09 / 31.0;
        assert!((v / target - 1.0).abs() < 0.10, "var {v} target {target}");
    }

    #[test]
    fn flat_dirichlet_is_normalised_gamma_stream() {
        let spec = SeedSpec::new(77, 5);
        let w = dirichlet_flat(8, &mut spec.rng()).unwrap();
        let mut rng = spec.rng();
        let g = GammaSampler::new(1.0).unwrap();
        let raw: Vec<f64> = (0..8).map(|_| g.sample_positive(&mut rng)).collect();
        let total: f64 = raw.iter().sum();
        for (a, b) in w.iter().zip(&raw) {
            assert!(((b / total) - a).abs() <= 1e-12 * a.abs());
        }
    }

    #[test]
    fn beta_edge_cases_and_mean() {
        let mut r = stream(13);
        assert_eq!(sample_beta(0.0, 100.0, &mut r).unwrap(), 0.0);
        assert!(sample_beta(-1.0, 1.0, &mut r).is_err());
        assert!(sample_beta(1.0, -1.0, &mut r).is_err());
        let n = 100_000;
        let m: f64 = (0..n).map(|_| sample_beta(1.0, 1.0, &mut r).unwrap()).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.005, "mean {m}");
    }

    #[test]
    fn beta_tail_bound_has_no_exceedances() {
        let mut r = stream(14);
        let exceed = (0..100_000)
            .filter(|_| sample_beta(1.0, 1e4, &mut r).unwrap() >= 0.01)
            .count();
        assert_eq!(exceed, 0);
    }

    #[test]
    fn skew_normal_moments() {
        let mut r = stream(15);
        assert!(sample_skew_normal(0.0, 0.0, 1.0, &mut r).is_err());
        let n = 100_000;
        let plain: Vec<f64> = (0..n)
            .map(|_| sample_skew_normal(3.0, 1.0, 0.0, &mut r).unwrap())
            .collect();
        let (m0, _) = mean_var(&plain);
        assert!((m0 - 3.0).abs() < 0.01, "mean {m0}");

        let xs: Vec<f64> = (0..n)
            .map(|_| sample_skew_normal(-0.71, 1.0, 2.0, &mut r).unwrap())
            .collect();
        let (m, v) = mean_var(&xs);
        assert!(m.abs() < 0.007, "mean {m}");
        let delta = 2.0 / 5f64.sqrt();
        let target = 1.0 - (delta * (2.0 / std::f64::consts::PI).sqrt()).powi(2);
        assert!((target - 0.491).abs() < 1e-3);
        assert!((v - target).abs() < 0.01, "var {v}");
    }

    #[test]
    fn student_t_properties() {
        let mut r = stream(16);
        assert!(sample_student_t(0.0, &mut r).is_err());
        let mut xs: Vec<f64> = (0..100_000).map(|_| sample_student_t(3.0, &mut r).unwrap()).collect();
        xs.sort_by(f64::total_cmp);
        let median = 0.5 * (xs[49_999] + xs[50_000]);
        assert!(median.abs() < 0.02, "median {median}");

        let big: Vec<f64> = (0..1_000_000).map(|_| sample_student_t(3.0, &mut r).unwrap()).collect();
        let (_, v) = mean_var(&big);
        assert!((v - 3.0).abs() < 0.3, "var {v}");

        let near_normal: Vec<f64> = (0..10_000).map(|_| sample_student_t(1e6, &mut r).unwrap()).collect();
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        assert!(ks_one_sample(&near_normal, |x| normal.cdf(x)).p_value > 0.01);
    }

    #[test]
    fn weight_vector_invariants() {
        assert!(WeightVector::new(vec![0, 1], vec![0.5, 0.5]).is_ok());
        assert!(WeightVector::new(vec![0, 0], vec![0.5, 0.5]).is_err());
        assert!(WeightVector::new(vec![0, 1], vec![0.6, 0.5]).is_err());
        assert!(WeightVector::new(vec![0, 1], vec![1.0, 0.0]).is_err());
        assert!(WeightVector::new(vec![0], vec![0.5, 0.5]).is_err());
    }
}
