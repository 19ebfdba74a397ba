//! Annealed Langevin dynamics for prior and approximate posterior sampling.
//!
//! Each chain runs on its own ChaCha stream derived from `(seed, chain)`, so
//! results do not depend on batching or thread count.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gauss;
use crate::network::ScoreModel;
use crate::operators::{complex_to_signal, signal_to_complex, LinearOperator};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub steps_per_level: usize,
    pub seed: u64,
    /// Apply `x + sigma_min^2 s(x; sigma_min)` after the last level.
    pub final_denoise: bool,
    /// Number of trailing levels run with `beta = 0`.
    pub noise_free_levels: usize,
    /// Chains averaged into each point estimate.
    pub average: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            schedule: NoiseSchedule::default(),
            steps_per_level: 3,
            seed: 0,
            final_denoise: true,
            noise_free_levels: 0,
            average: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.steps_per_level == 0 {
            return Err(Error::invalid("steps_per_level must be at least 1"));
        }
        if self.average == 0 {
            return Err(Error::invalid("average must be at least 1"));
        }
        if self.noise_free_levels > self.schedule.levels {
            return Err(Error::invalid("noise_free_levels exceeds the number of levels"));
        }
        Ok(())
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// `A^H (y - A x) / (sigma_n^2 + sigma_t^2)` as a real signal vector.
fn data_term(op: &dyn LinearOperator, y: &[Complex64], x: &[f64], sigma_t: f64) -> Result<Vec<f64>> {
    let xc = signal_to_complex(op, x)?;
    let mut r = op.forward(&xc)?;
    if r.len() != y.len() {
        return Err(Error::Dimension {
            expected: op.output_len(),
            found: y.len(),
        });
    }
    r.iter_mut().zip(y).for_each(|(a, b)| *a = b - *a);
    let g = op.adjoint(&r)?;
    let k = 1.0 / (op.sigma_n().powi(2) + sigma_t * sigma_t);
    Ok(complex_to_signal(op, &g).into_iter().map(|v| v * k).collect())
}

/// One update `x + alpha (A^H (y - A x) / (sigma_n^2 + sigma_t^2) + s) + sqrt(2 beta alpha) eta`
/// with a precomputed score `s`.
fn langevin_update(
    x: &mut [f64],
    score: &[f64],
    likelihood: Option<(&dyn LinearOperator, &[Complex64])>,
    sigma_t: f64,
    alpha: f64,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let data = match likelihood {
        Some((op, y)) => Some(data_term(op, y, x, sigma_t)?),
        None => None,
    };
    let noise = (2.0 * beta * alpha).sqrt();
    for (i, v) in x.iter_mut().enumerate() {
        let drift = score[i] + data.as_ref().map_or(0.0, |d| d[i]);
        *v += alpha * drift;
        if noise > 0.0 {
            *v += noise * gauss(rng);
        }
    }
    Ok(())
}

/// Single posterior update from `x_t` at level `sigma_t` with step `alpha_t`.
#[allow(clippy::too_many_arguments)]
pub fn posterior_step(
    model: &dyn ScoreModel,
    op: &dyn LinearOperator,
    y: &[Complex64],
    x_t: &[f64],
    sigma_t: f64,
    alpha_t: f64,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if x_t.len() != model.dim() || x_t.len() != op.signal_len() {
        return Err(Error::Dimension {
            expected: op.signal_len(),
            found: x_t.len(),
        });
    }
    let xs = Tensor::matrix(1, x_t.len(), x_t.to_vec())?;
    let s = model.score_batch(&xs, &[sigma_t])?;
    let mut out = x_t.to_vec();
    langevin_update(&mut out, s.data(), Some((op, y)), sigma_t, alpha_t, beta, rng)?;
    Ok(out)
}

/// Run the annealed loop for `chains` chains; chain `c` uses measurement
/// `ys[c]` when a likelihood is given.
fn anneal(
    model: &dyn ScoreModel,
    likelihood: Option<(&dyn LinearOperator, &[Vec<Complex64>])>,
    chains: usize,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let dim = model.dim();
    if let Some((op, ys)) = likelihood {
        if op.signal_len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: op.signal_len(),
            });
        }
        if ys.len() != chains {
            return Err(Error::invalid(format!("{} measurements for {chains} chains", ys.len())));
        }
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..chains).map(|c| chain_rng(cfg.seed, c)).collect();
    let mut x = Tensor::zeros(&[chains, dim]);
    for (c, rng) in rngs.iter_mut().enumerate() {
        x.row_mut(c).iter_mut().for_each(|v| *v = gauss(rng));
    }
    let sigmas = cfg.schedule.sigmas();
    let levels = sigmas.len();
    for (level, &sigma) in sigmas.iter().enumerate() {
        let alpha = cfg.schedule.step_size(sigma);
        let beta = if level >= levels - cfg.noise_free_levels {
            0.0
        } else {
            cfg.schedule.beta
        };
        let level_sigmas = vec![sigma; chains];
        for _ in 0..cfg.steps_per_level {
            let s = model.score_batch(&x, &level_sigmas)?;
            x.data_mut()
                .par_chunks_mut(dim)
                .zip(s.data().par_chunks(dim))
                .zip(rngs.par_iter_mut())
                .enumerate()
                .try_for_each(|(c, ((row, sc), rng))| {
                    let lik = likelihood.map(|(op, ys)| (op, ys[c].as_slice()));
                    langevin_update(row, sc, lik, sigma, alpha, beta, rng)
                })?;
            if !x.all_finite() {
                return Err(Error::NonFinite(format!(
                    "Langevin iterate at level {level} (sigma = {sigma})"
                )));
            }
        }
    }
    if cfg.final_denoise {
        let sigma = cfg.schedule.sigma_min;
        let s = model.score_batch(&x, &vec![sigma; chains])?;
        let k = sigma * sigma;
        x.data_mut().iter_mut().zip(s.data()).for_each(|(v, sv)| *v += k * sv);
    }
    Ok(x)
}

fn average_groups(x: &Tensor, groups: usize, size: usize) -> Result<Tensor> {
    let dim = x.cols();
    let mut out = vec![0.0; groups * dim];
    for g in 0..groups {
        for k in 0..size {
            out[g * dim..(g + 1) * dim]
                .iter_mut()
                .zip(x.row(g * size + k))
                .for_each(|(o, v)| *o += v / size as f64);
        }
    }
    Tensor::matrix(groups, dim, out)
}

/// Unconditional samples: the posterior loop with `A = 0`, started from
/// `N(0, I)`. Returns `n_samples x N`.
pub fn prior_sample(model: &dyn ScoreModel, cfg: &SamplerConfig, n_samples: usize) -> Result<Tensor> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    anneal(model, None, n_samples, cfg)
}

/// One point estimate per measurement in `ys` (rows of the result). With
/// `cfg.average = k`, each estimate is the mean of `k` independent chains.
pub fn posterior_sample(
    model: &dyn ScoreModel,
    op: &dyn LinearOperator,
    ys: &[Vec<Complex64>],
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    if ys.is_empty() {
        return Err(Error::invalid("no measurements given"));
    }
    let k = cfg.average.max(1);
    let expanded: Vec<Vec<Complex64>> = ys.iter().flat_map(|y| std::iter::repeat_n(y.clone(), k)).collect();
    let x = anneal(model, Some((op, &expanded)), expanded.len(), cfg)?;
    if k == 1 {
        Ok(x)
    } else {
        average_groups(&x, ys.len(), k)
    }
}
