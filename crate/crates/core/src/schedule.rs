//! Geometric noise ladder and annealing step sizes.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub levels: usize,
    pub alpha0: f64,
    pub beta: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_max: 1.0,
            sigma_min: 0.01,
            levels: 30,
            alpha0: 1e-5,
            beta: 1.0,
        }
    }
}

/// `sigma_i = sigma_max (sigma_min / sigma_max)^(i / (L - 1))`, descending,
/// with both endpoints exact.
pub fn geometric_levels(sigma_min: f64, sigma_max: f64, levels: usize) -> Result<Vec<f64>> {
    if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
        return Err(Error::invalid(format!(
            "need sigma_max > sigma_min > 0, got sigma_min = {sigma_min}, sigma_max = {sigma_max}"
        )));
    }
    if levels < 2 {
        return Err(Error::invalid(format!("need at least 2 levels, got {levels}")));
    }
    let ratio = sigma_min / sigma_max;
    let last = (levels - 1) as f64;
    let mut out: Vec<f64> = (0..levels).map(|i| sigma_max * ratio.powf(i as f64 / last)).collect();
    out[0] = sigma_max;
    out[levels - 1] = sigma_min;
    Ok(out)
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, levels: usize, alpha0: f64, beta: f64) -> Result<Self> {
        let s = NoiseSchedule {
            sigma_max,
            sigma_min,
            levels,
            alpha0,
            beta,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        geometric_levels(self.sigma_min, self.sigma_max, self.levels)?;
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::invalid(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be nonnegative, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn sigmas(&self) -> Vec<f64> {
        geometric_levels(self.sigma_min, self.sigma_max, self.levels).expect("schedule validated at construction")
    }

    /// `alpha0 (sigma_t / sigma_min)^2`.
    pub fn step_size(&self, sigma_t: f64) -> f64 {
        let r = sigma_t / self.sigma_min;
        self.alpha0 * r * r
    }

    /// Uniform draw over the discrete levels.
    pub fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sigmas()[rng.random_range(0..self.levels)]
    }

    /// Level at index `levels / 2`.
    pub fn middle_sigma(&self) -> f64 {
        self.sigmas()[self.levels / 2]
    }
}

/// Largest pairwise Euclidean distance among the first `limit` rows.
pub fn max_pairwise_distance(rows: &[&[f64]], limit: usize) -> f64 {
    let rows = &rows[..rows.len().min(limit)];
    let mut best = 0.0_f64;
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.max(d);
        }
    }
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ladder_examples() {
        let l = geometric_levels(0.01, 1.0, 3).unwrap();
        assert_eq!(l[0], 1.0);
        assert!((l[1] - 0.1).abs() < 1e-15);
        assert_eq!(l[2], 0.01);

        for k in [1.5, 10.0, 1e4] {
            assert_eq!(geometric_levels(0.3, 0.3 * k, 2).unwrap(), vec![0.3 * k, 0.3]);
        }
    }

    #[test]
    fn consecutive_ratio_is_constant() {
        let l = geometric_levels(0.01, 50.0, 20).unwrap();
        let r0 = l[1] / l[0];
        for w in l.windows(2) {
            assert!((w[1] / w[0] - r0).abs() < 1e-12);
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn invalid_ladders_are_rejected() {
        assert!(geometric_levels(0.1, 1.0, 1).is_err());
        assert!(geometric_levels(1.0, 0.1, 5).is_err());
        assert!(geometric_levels(0.0, 1.0, 5).is_err());
        assert!(NoiseSchedule::new(0.1, 1.0, 5, 0.0, 1.0).is_err());
        assert!(NoiseSchedule::new(0.1, 1.0, 5, 1e-5, -1.0).is_err());
    }

    #[test]
    fn step_size_examples() {
        let s = NoiseSchedule::new(0.01, 1.0, 10, 1e-5, 1.0).unwrap();
        assert_eq!(s.step_size(0.01), 1e-5);
        assert!((s.step_size(0.1) - 100.0 * 1e-5).abs() < 1e-18);
        assert!((s.step_size(0.03) - 9e-5).abs() < 1e-18);
        let sig = s.sigmas();
        for w in sig.windows(2) {
            assert!(s.step_size(w[0]) > s.step_size(w[1]));
        }
    }

    #[test]
    fn sample_sigma_is_uniform_and_reproducible() {
        let s = NoiseSchedule::new(0.01, 1.0, 10, 1e-5, 1.0).unwrap();
        let levels = s.sigmas();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut counts = vec![0usize; levels.len()];
        for _ in 0..n {
            let sig = s.sample_sigma(&mut rng);
            counts[levels.iter().position(|&l| l == sig).unwrap()] += 1;
        }
        let p = 1.0 / levels.len() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{c}");
        }

        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| s.sample_sigma(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn pairwise_distance() {
        let a = [0.0, 0.0];
        let b = [3.0, 4.0];
        let c = [1.0, 1.0];
        assert_eq!(max_pairwise_distance(&[&a, &b, &c], 128), 5.0);
        assert_eq!(max_pairwise_distance(&[&a, &c, &b], 2), 2f64.sqrt());
    }
}
