//! Smoothed-unigram noise distributions and alias-method sampling.
//!
//! All randomness in the crate flows through [`SeededRng`], a ChaCha8 stream
//! cipher generator. It is portable and its output for a given `(seed, stream)`
//! pair is fixed, so runs reproduce bit-for-bit across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Name of the pinned generator, recorded in model metadata.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Default smoothing exponent for LM training.
pub const DEFAULT_ALPHA: f64 = 0.75;

pub type SeededRng = ChaCha8Rng;

/// Build the generator for `seed`, on the given independent stream.
///
/// Different subsystems (initialization, dropout, negatives) use different
/// stream ids so changing how many draws one of them makes never shifts the
/// draws seen by another.
pub fn seeded_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive an independent child generator from `rng`.
pub fn split(rng: &mut SeededRng) -> SeededRng {
    let seed: u64 = rng.gen();
    let stream: u64 = rng.gen();
    seeded_rng(seed, stream)
}

/// Categorical noise distribution `p^α(w) ∝ count(w)^α` with an alias table.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDistribution {
    probs: Vec<f64>,
    alpha: f64,
    threshold: Vec<f64>,
    alias: Vec<usize>,
}

impl NoiseDistribution {
    /// Build `p^α` from raw counts.
    pub fn from_counts(counts: &[f64], alpha: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Empty("noise counts".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        if counts.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(Error::InvalidArgument(
                "counts must be finite and non-negative".into(),
            ));
        }
        if !counts.iter().any(|&c| c > 0.0) {
            return Err(Error::InvalidArgument("all counts are zero".into()));
        }
        let weights: Vec<f64> = counts.iter().map(|&c| c.powf(alpha)).collect();
        let total: f64 = weights.iter().sum();
        let probs = weights.iter().map(|w| w / total).collect();
        Self::from_probs_unchecked(probs, alpha)
    }

    /// Build from an already-normalized probability vector.
    pub fn from_probs(probs: Vec<f64>, alpha: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("noise probabilities".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidArgument("probabilities must be >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}"
            )));
        }
        Self::from_probs_unchecked(probs, alpha)
    }

    fn from_probs_unchecked(probs: Vec<f64>, alpha: f64) -> Result<Self> {
        let (threshold, alias) = build_alias(&probs);
        Ok(NoiseDistribution {
            probs,
            alpha,
            threshold,
            alias,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, w: usize) -> f64 {
        self.probs[w]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Alias table as `(threshold, alias)` columns.
    pub fn alias_table(&self) -> (&[f64], &[usize]) {
        (&self.threshold, &self.alias)
    }

    /// Draw one id in constant time.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let n = self.probs.len();
        let bucket = rng.gen_range(0..n);
        let u: f64 = rng.gen();
        if u < self.threshold[bucket] {
            bucket
        } else {
            self.alias[bucket]
        }
    }

    /// Draw `k` ids; when `exclude` is set, draws equal to it are rejected and
    /// redrawn (unless the distribution has no other support).
    pub fn sample_k<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        let can_exclude = match exclude {
            Some(w) => self.probs.get(w).is_some_and(|&p| p < 1.0),
            None => false,
        };
        while out.len() < k {
            let u = self.sample(rng);
            if can_exclude && Some(u) == exclude {
                continue;
            }
            out.push(u);
        }
        out
    }

    /// Probability mass the alias table routes to each id.
    pub fn reconstructed_probs(&self) -> Vec<f64> {
        let n = self.probs.len();
        let mut mass = vec![0.0; n];
        for (bucket, (&t, &a)) in self.threshold.iter().zip(&self.alias).enumerate() {
            mass[bucket] += t;
            mass[a] += 1.0 - t;
        }
        mass.iter_mut().for_each(|m| *m /= n as f64);
        mass
    }
}

/// Vose's alias construction in O(n).
fn build_alias(probs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = probs.len();
    let mut scaled: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let mut threshold = vec![1.0; n];
    let mut alias: Vec<usize> = (0..n).collect();
    let mut small = Vec::new();
    let mut large = Vec::new();
    for (i, &s) in scaled.iter().enumerate() {
        if s < 1.0 {
            small.push(i);
        } else {
            large.push(i);
        }
    }
    while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
        small.pop();
        threshold[s] = scaled[s];
        alias[s] = l;
        scaled[l] = (scaled[l] + scaled[s]) - 1.0;
        if scaled[l] < 1.0 {
            large.pop();
            small.push(l);
        }
    }
    // Leftovers are numerically 1.
    for i in large.into_iter().chain(small) {
        threshold[i] = 1.0;
        alias[i] = i;
    }
    (threshold, alias)
}

/// Pearson goodness-of-fit of observed category counts against `probs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

/// Minimum expected count per pooled bin.
pub const CHI_SQUARE_MIN_EXPECTED: f64 = 5.0;

/// Chi-square test of `observed` against `probs`. Adjacent categories are
/// pooled until each bin expects at least [`CHI_SQUARE_MIN_EXPECTED`] draws;
/// a trailing short bin is merged into the previous one.
pub fn chi_square(observed: &[u64], probs: &[f64]) -> Result<ChiSquare> {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    if observed.len() != probs.len() {
        return Err(Error::DimensionMismatch(
            "observed and probs differ in length".into(),
        ));
    }
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(Error::Empty("no observations".into()));
    }
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probs) {
        if p == 0.0 && o > 0 {
            return Err(Error::InvalidArgument(
                "draw of a zero-probability category".into(),
            ));
        }
        acc.0 += o as f64;
        acc.1 += p * n as f64;
        if acc.1 >= CHI_SQUARE_MIN_EXPECTED {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
    }
    match bins.last_mut() {
        Some(last) => {
            last.0 += acc.0;
            last.1 += acc.1;
        }
        None => bins.push(acc),
    }
    if bins.len() < 2 {
        return Err(Error::InvalidArgument(
            "too few observations for a chi-square test".into(),
        ));
    }
    let statistic = bins.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let degrees_of_freedom = bins.len() - 1;
    let dist = ChiSquared::new(degrees_of_freedom as f64)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(ChiSquare {
        statistic,
        degrees_of_freedom,
        p_value: dist.sf(statistic),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_square_exact_fit_and_gross_misfit() {
        let fit = chi_square(&[250, 250, 500], &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(fit.statistic, 0.0);
        assert!((fit.p_value - 1.0).abs() < 1e-12);
        let bad = chi_square(&[900, 50, 50], &[0.25, 0.25, 0.5]).unwrap();
        assert!(bad.p_value < 1e-10);
        assert!(chi_square(&[1, 0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn chi_square_p_value_matches_table() {
        // df = 2: sf(x) = exp(-x/2).
        let obs = [60u64, 20, 20];
        let r = chi_square(&obs, &[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(r.degrees_of_freedom, 2);
        assert!((r.statistic - 4.0).abs() < 1e-12);
        assert!((r.p_value - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn uniform_counts_give_uniform_probs() {
        for alpha in [0.0, 0.3, 1.0] {
            let noise = NoiseDistribution::from_counts(&[1.0, 1.0, 1.0, 1.0], alpha).unwrap();
            for &p in noise.probs() {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn square_root_smoothing() {
        let noise = NoiseDistribution::from_counts(&[9.0, 1.0], 0.5).unwrap();
        // sqrt(9) / (sqrt(9) + sqrt(1)) = 3/4
        assert!((noise.prob(0) - 0.75).abs() < 1e-15);
        assert!((noise.prob(1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn alpha_zero_is_uniform() {
        let noise = NoiseDistribution::from_counts(&[9.0, 1.0], 0.0).unwrap();
        assert_eq!(noise.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(NoiseDistribution::from_counts(&[0.0, 0.0], 0.5).is_err());
        assert!(NoiseDistribution::from_counts(&[1.0], 1.5).is_err());
        assert!(NoiseDistribution::from_counts(&[1.0], -0.1).is_err());
        assert!(NoiseDistribution::from_counts(&[], 0.5).is_err());
    }

    #[test]
    fn singleton_always_draws_zero() {
        let noise = NoiseDistribution::from_counts(&[3.0], 0.75).unwrap();
        let mut rng = seeded_rng(7, 0);
        assert!((0..1000).all(|_| noise.sample(&mut rng) == 0));
    }

    #[test]
    fn alias_reconstructs_mass() {
        let counts = [5.0, 0.0, 1.0, 17.0, 2.0, 2.0, 0.5];
        let noise = NoiseDistribution::from_counts(&counts, 0.75).unwrap();
        for (a, b) in noise.reconstructed_probs().iter().zip(noise.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_draw_counts_concentrate() {
        let noise = NoiseDistribution::from_counts(&[1.0; 4], 1.0).unwrap();
        let mut rng = seeded_rng(11, 0);
        let mut hist = [0usize; 4];
        for _ in 0..1_000_000 {
            hist[noise.sample(&mut rng)] += 1;
        }
        let bound = 4.0 * (1e6f64 * 0.25 * 0.75).sqrt();
        for &h in &hist {
            assert!((h as f64 - 250_000.0).abs() <= bound, "{hist:?}");
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let noise = NoiseDistribution::from_counts(&[3.0, 1.0, 4.0, 1.0, 5.0], 0.75).unwrap();
        let a: Vec<usize> = {
            let mut rng = seeded_rng(42, 3);
            (0..200).map(|_| noise.sample(&mut rng)).collect()
        };
        let b: Vec<usize> = {
            let mut rng = seeded_rng(42, 3);
            (0..200).map(|_| noise.sample(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn collision_rejection_excludes_positive() {
        let noise = NoiseDistribution::from_counts(&[1.0, 1.0, 1.0], 1.0).unwrap();
        let mut rng = seeded_rng(1, 0);
        let draws = noise.sample_k(&mut rng, 500, Some(1));
        assert!(draws.iter().all(|&d| d != 1));
        // Degenerate single-support case must still terminate.
        let point = NoiseDistribution::from_counts(&[0.0, 2.0], 1.0).unwrap();
        let draws = point.sample_k(&mut rng, 5, Some(1));
        assert_eq!(draws, vec![1; 5]);
    }
}
