//! Training objectives: multilevel DSM, SURE with a Monte-Carlo divergence
//! probe, and the combined SURE-Score loss.
//!
//! Every loss takes a batch `B x N` and returns the mean of the per-sample
//! losses as a scalar graph node. A single sample is a batch of one.

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::network::BoundNetwork;
use crate::schedule::NoiseSchedule;

/// A score field evaluated on a tape.
pub trait TapeScore<'t> {
    fn score_var(&self, x: Var<'t>, sigmas: &[f64]) -> Result<Var<'t>>;
}

impl<'t> TapeScore<'t> for BoundNetwork<'t> {
    fn score_var(&self, x: Var<'t>, sigmas: &[f64]) -> Result<Var<'t>> {
        self.score(x, sigmas)
    }
}

impl<'t, F> TapeScore<'t> for F
where
    F: Fn(Var<'t>, &[f64]) -> Result<Var<'t>>,
{
    fn score_var(&self, x: Var<'t>, sigmas: &[f64]) -> Result<Var<'t>> {
        self(x, sigmas)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon: f64,
    /// Per-coordinate standard deviation of the training-data noise.
    pub sigma_w: f64,
    pub detach_denoiser_in_dsm: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            epsilon: 1e-3,
            sigma_w: 1.0,
            detach_denoiser_in_dsm: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.sigma_w > 0.0) {
            return Err(Error::invalid(format!(
                "sigma_w must be positive, got {}",
                self.sigma_w
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Noise draws for one batch: a level, DSM noise `z ~ N(0, sigma^2 I)` and a
/// divergence probe `n ~ N(0, I)` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchDraw {
    pub sigmas: Vec<f64>,
    pub z: Tensor,
    pub n: Tensor,
}

impl BatchDraw {
    pub fn sample<R: Rng + ?Sized>(schedule: &NoiseSchedule, rows: usize, dim: usize, rng: &mut R) -> Self {
        let sigmas: Vec<f64> = (0..rows).map(|_| schedule.sample_sigma(rng)).collect();
        let mut z = Vec::with_capacity(rows * dim);
        for &s in &sigmas {
            z.extend((0..dim).map(|_| s * crate::gauss(rng)));
        }
        let n = (0..rows * dim).map(|_| crate::gauss(rng)).collect();
        BatchDraw {
            sigmas,
            z: Tensor::new(vec![rows, dim], z).expect("draw shape"),
            n: Tensor::new(vec![rows, dim], n).expect("draw shape"),
        }
    }
}

fn batch_rows(shape: &[usize]) -> usize {
    if shape.len() == 2 {
        shape[0]
    } else {
        1
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// Mean over rows of `sigma^2 || s(x + z; sigma) + z / sigma^2 ||^2`.
pub fn dsm_loss<'t, S: TapeScore<'t> + ?Sized>(score: &S, x: Var<'t>, sigmas: &[f64], z: &Tensor) -> Result<Var<'t>> {
    for &s in sigmas {
        check_positive("sigma", s)?;
    }
    let tape = x.tape();
    let shape = x.shape();
    if z.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "dsm_loss",
            left: shape,
            right: z.shape().to_vec(),
        });
    }
    let rows = batch_rows(&shape);
    let cols = z.cols();
    let mut target = z.clone();
    for (r, s) in sigmas.iter().enumerate() {
        let k = 1.0 / (s * s);
        target.row_mut(r).iter_mut().for_each(|v| *v *= k);
    }
    let perturbed = x.add(tape.constant(z.clone()))?;
    let s = score.score_var(perturbed, sigmas)?;
    let residual = s.add(tape.constant(target))?;
    let weights = Tensor::row_constant(sigmas, cols).reshape(shape)?;
    Ok(residual.mul(tape.constant(weights))?.norm_sq().scale(1.0 / rows as f64))
}

/// Mean over rows of `n^T (g(x + eps n) - g(x)) / eps`, given `gx = g(x)`.
pub fn mc_divergence_at<'t, G>(g: G, x: Var<'t>, gx: Var<'t>, n: &Tensor, epsilon: f64) -> Result<Var<'t>>
where
    G: Fn(Var<'t>) -> Result<Var<'t>>,
{
    check_positive("epsilon", epsilon)?;
    let tape = x.tape();
    let rows = batch_rows(&x.shape());
    let probe = tape.constant(n.clone());
    let shifted = x.add(probe.scale(epsilon))?;
    let diff = g(shifted)?.sub(gx)?;
    Ok(diff.mul(probe)?.sum().scale(1.0 / (epsilon * rows as f64)))
}

/// Monte-Carlo divergence of the vector field `g` at `x` with probe `n`.
pub fn mc_divergence<'t, G>(g: G, x: Var<'t>, n: &Tensor, epsilon: f64) -> Result<Var<'t>>
where
    G: Fn(Var<'t>) -> Result<Var<'t>>,
{
    let gx = g(x)?;
    mc_divergence_at(g, x, gx, n, epsilon)
}

/// Tweedie map `x + sigma_w^2 s(x; sigma_w)` on a tape.
pub fn tweedie_var<'t, S: TapeScore<'t> + ?Sized>(score: &S, x: Var<'t>, sigma_w: f64) -> Result<Var<'t>> {
    let rows = batch_rows(&x.shape());
    let s = score.score_var(x, &vec![sigma_w; rows])?;
    x.add(s.scale(sigma_w * sigma_w))
}

/// Mean over rows of `||x - g(x)||^2 + 2 sigma_w^2 div g(x)` with `g` the
/// Tweedie denoiser. This is the training form; it exceeds the true MSE by
/// `N sigma_w^2` in expectation.
pub fn sure_loss<'t, S: TapeScore<'t> + ?Sized>(
    score: &S,
    x_noisy: Var<'t>,
    sigma_w: f64,
    n: &Tensor,
    epsilon: f64,
) -> Result<Var<'t>> {
    check_positive("sigma_w", sigma_w)?;
    let rows = batch_rows(&x_noisy.shape());
    let g = |x| tweedie_var(score, x, sigma_w);
    let gx = g(x_noisy)?;
    let residual = x_noisy.sub(gx)?.norm_sq().scale(1.0 / rows as f64);
    let div = mc_divergence_at(g, x_noisy, gx, n, epsilon)?;
    residual.add(div.scale(2.0 * sigma_w * sigma_w))
}

/// The two halves of the SURE-Score objective and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct SureScoreTerms<'t> {
    pub total: Var<'t>,
    /// Multilevel DSM evaluated at the denoised sample.
    pub dsm: Var<'t>,
    /// Unweighted SURE term.
    pub sure: Var<'t>,
}

/// SURE-Score loss on a noisy batch:
/// `sigma^2 ||s(g + z; sigma) + z/sigma^2||^2 + lambda ||sigma_w^2 s(x; sigma_w)||^2
///  + 2 lambda sigma_w^2 div g(x)` with `g(x) = x + sigma_w^2 s(x; sigma_w)`.
pub fn sure_score_loss<'t, S: TapeScore<'t> + ?Sized>(
    score: &S,
    x_noisy: Var<'t>,
    draw: &BatchDraw,
    cfg: &LossConfig,
) -> Result<SureScoreTerms<'t>> {
    cfg.validate()?;
    let rows = batch_rows(&x_noisy.shape());
    let sw2 = cfg.sigma_w * cfg.sigma_w;
    let s_w = score.score_var(x_noisy, &vec![cfg.sigma_w; rows])?;
    let step = s_w.scale(sw2);
    let denoised = x_noisy.add(step)?;
    let dsm_input = if cfg.detach_denoiser_in_dsm {
        denoised.detach()
    } else {
        denoised
    };
    let dsm = dsm_loss(score, dsm_input, &draw.sigmas, &draw.z)?;
    let residual = step.norm_sq().scale(1.0 / rows as f64);
    let div = mc_divergence_at(
        |x| tweedie_var(score, x, cfg.sigma_w),
        x_noisy,
        denoised,
        &draw.n,
        cfg.epsilon,
    )?;
    let sure = residual.add(div.scale(2.0 * sw2))?;
    let total = dsm.add(sure.scale(cfg.lambda))?;
    Ok(SureScoreTerms { total, dsm, sure })
}

/// `dsm_mean / sure_mean`, or 1 when the SURE mean is not positive.
pub fn lambda_from_means(dsm_mean: f64, sure_mean: f64) -> f64 {
    if sure_mean > 0.0 && dsm_mean.is_finite() && sure_mean.is_finite() {
        dsm_mean / sure_mean
    } else {
        log::warn!("first-batch SURE mean is {sure_mean}; falling back to lambda = 1");
        1.0
    }
}

/// Balance the two SURE-Score terms on the first batch.
pub fn lambda_init(
    net: &crate::network::ScoreNetwork,
    x_noisy: &Tensor,
    draw: &BatchDraw,
    cfg: &LossConfig,
) -> Result<f64> {
    let tape = crate::autodiff::Tape::new();
    let bound = net.bind(&tape, false);
    let terms = sure_score_loss(&bound, tape.constant(x_noisy.clone()), draw, cfg)?;
    Ok(lambda_from_means(terms.dsm.item(), terms.sure.item()))
}

/// Per-row Monte-Carlo divergence of a value-level field.
pub fn mc_divergence_values<G>(g: G, x: &Tensor, n: &Tensor, epsilon: f64) -> Result<Vec<f64>>
where
    G: Fn(&Tensor) -> Result<Tensor>,
{
    check_positive("epsilon", epsilon)?;
    let gx = g(x)?;
    let mut shifted = x.clone();
    shifted
        .data_mut()
        .iter_mut()
        .zip(n.data())
        .for_each(|(v, p)| *v += epsilon * p);
    let gs = g(&shifted)?;
    Ok((0..x.rows())
        .map(|r| {
            gs.row(r)
                .iter()
                .zip(gx.row(r))
                .zip(n.row(r))
                .map(|((a, b), p)| p * (a - b))
                .sum::<f64>()
                / epsilon
        })
        .collect())
}

/// Per-row SURE values (training form) for an arbitrary denoiser.
pub fn sure_values<G>(g: G, x_noisy: &Tensor, n: &Tensor, sigma_w: f64, epsilon: f64) -> Result<Vec<f64>>
where
    G: Fn(&Tensor) -> Result<Tensor>,
{
    check_positive("sigma_w", sigma_w)?;
    let gx = g(x_noisy)?;
    let div = mc_divergence_values(&g, x_noisy, n, epsilon)?;
    Ok((0..x_noisy.rows())
        .map(|r| {
            let res: f64 = x_noisy
                .row(r)
                .iter()
                .zip(gx.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            res + 2.0 * sigma_w * sigma_w * div[r]
        })
        .collect())
}

/// SURE values with the `N sigma_w^2` offset removed, i.e. unbiased estimates
/// of the per-sample squared error.
pub fn sure_mse_estimates<G>(g: G, x_noisy: &Tensor, n: &Tensor, sigma_w: f64, epsilon: f64) -> Result<Vec<f64>>
where
    G: Fn(&Tensor) -> Result<Tensor>,
{
    let offset = x_noisy.cols() as f64 * sigma_w * sigma_w;
    Ok(sure_values(g, x_noisy, n, sigma_w, epsilon)?
        .into_iter()
        .map(|v| v - offset)
        .collect())
}

/// Finite-difference step for loss gradient checks. The divergence quotient
/// divides by epsilon, so a smaller step makes the oracle noisier.
pub const LOSS_GRADCHECK_STEP: f64 = 1e-4;

/// Largest relative error between reverse-mode and central-difference
/// gradients (network parameters and inputs) of each loss, for a random
/// network with hidden widths `[16, 16]` on a batch of `rows` vectors of
/// length `dim`, with frozen noise draws.
pub fn loss_gradient_errors(
    seed: u64,
    rows: usize,
    dim: usize,
    conditioning: crate::network::Conditioning,
) -> Result<Vec<(&'static str, f64)>> {
    use crate::autodiff::check_gradient;
    use crate::network::ScoreNetwork;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let net = ScoreNetwork::with_options(
        dim,
        &[16, 16, dim],
        crate::autodiff::Activation::Softplus,
        conditioning,
        seed,
    )?;
    let schedule = NoiseSchedule::new(0.05, 3.0, 8, 1e-5, 1.0)?;
    let draw = BatchDraw::sample(&schedule, rows, dim, &mut rng);
    let x = Tensor::matrix(rows, dim, (0..rows * dim).map(|_| crate::gauss(&mut rng)).collect())?;
    let cfg = LossConfig {
        lambda: rng.random_range(0.1..3.0),
        sigma_w: rng.random_range(0.1..1.5),
        ..LossConfig::default()
    };
    let leaves: Vec<Tensor> = net.params().into_iter().cloned().chain([x]).collect();
    let check = |which: usize| {
        check_gradient(
            |_tape, vars| {
                let (x, params) = vars.split_last().expect("input leaf");
                let bound = BoundNetwork::from_vars(&net, params)?;
                match which {
                    0 => dsm_loss(&bound, *x, &draw.sigmas, &draw.z),
                    1 => sure_loss(&bound, *x, cfg.sigma_w, &draw.n, cfg.epsilon),
                    _ => Ok(sure_score_loss(&bound, *x, &draw, &cfg)?.total),
                }
            },
            &leaves,
            LOSS_GRADCHECK_STEP,
        )
    };
    Ok(vec![("dsm", check(0)?), ("sure", check(1)?), ("sure_score", check(2)?)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradient, Activation, Tape};
    use crate::network::{Conditioning, ScoreNetwork};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| scale * crate::gauss(rng))
            .collect::<Vec<f64>>();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn zero_net(n: usize) -> ScoreNetwork {
        let mut net = ScoreNetwork::new(n, &[8], 0).unwrap();
        net.zero_output_layer();
        net
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn dsm_perfect_score_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normal(1, 4, 1.0, &mut rng);
        let sigma = 0.5;
        let z = normal(1, 4, sigma, &mut rng);
        let target = z.map(|v| -v / (sigma * sigma));
        let tape = Tape::new();
        let perfect = |_: Var<'_>, _: &[f64]| Ok(tape.constant(target.clone()));
        let loss = dsm_loss(&perfect, tape.constant(x), &[sigma], &z).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn dsm_zero_network_is_noise_energy_over_sigma_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = zero_net(5);
        let x = normal(1, 5, 1.0, &mut rng);
        let sigma = 0.3;
        let z = normal(1, 5, sigma, &mut rng);
        let tape = Tape::new();
        let loss = dsm_loss(&net.bind(&tape, false), tape.constant(x), &[sigma], &z).unwrap();
        assert!(close(loss.item(), z.norm_sq() / (sigma * sigma), 1e-14));
    }

    #[test]
    fn dsm_rejects_nonpositive_sigma() {
        let net = zero_net(2);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(dsm_loss(&net.bind(&tape, false), x, &[0.0], &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn dsm_batch_mean_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ScoreNetwork::new(6, &[16, 16], 4).unwrap();
        let schedule = NoiseSchedule::new(0.01, 5.0, 12, 1e-5, 1.0).unwrap();
        let x = normal(20, 6, 1.0, &mut rng);
        let draw = BatchDraw::sample(&schedule, 20, 6, &mut rng);
        let tape = Tape::new();
        let batched = dsm_loss(&net.bind(&tape, false), tape.constant(x.clone()), &draw.sigmas, &draw.z)
            .unwrap()
            .item();

        let mut total = 0.0;
        for r in 0..20 {
            let sigma = draw.sigmas[r];
            let xp: Vec<f64> = x.row(r).iter().zip(draw.z.row(r)).map(|(a, b)| a + b).collect();
            let s = net.score(&Tensor::vector(xp), sigma).unwrap();
            let mut acc = 0.0;
            for (sv, zv) in s.data().iter().zip(draw.z.row(r)) {
                let e = sv + zv / (sigma * sigma);
                acc += e * e;
            }
            total += sigma * sigma * acc;
        }
        assert!(close(batched, total / 20.0, 1e-12), "{batched} vs {}", total / 20.0);
    }

    fn linear_field<'t>(w: &Tensor) -> impl Fn(Var<'t>) -> Result<Var<'t>> + '_ {
        // rows are samples, so g(x) = W x per row is x W^T
        move |x: Var<'t>| {
            let (r, c) = (w.rows(), w.cols());
            let mut wt = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    wt[j * r + i] = w.data()[i * c + j];
                }
            }
            x.matmul(x.tape().constant(Tensor::matrix(c, r, wt).unwrap()))
        }
    }

    #[test]
    fn divergence_of_linear_field_is_quadratic_form() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let n = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        for eps in [1e-3, 0.5, 7.0] {
            let tape = Tape::new();
            let x = tape.constant(Tensor::matrix(1, 2, vec![0.3, -0.8]).unwrap());
            let d = mc_divergence(linear_field(&w), x, &n, eps).unwrap().item();
            assert!((d - 10.0).abs() < 1e-10, "{d}");
        }
    }

    #[test]
    fn divergence_of_identity_is_probe_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = normal(1, 7, 1.0, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(normal(1, 7, 1.0, &mut rng));
        let d = mc_divergence(Ok, x, &n, 1e-3).unwrap().item();
        assert!(close(d, n.norm_sq(), 1e-10));
        assert!(mc_divergence(Ok, x, &n, 0.0).is_err());
    }

    #[test]
    fn divergence_probe_average_approaches_trace() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = normal(10_000, 2, 1.0, &mut rng);
        let x = normal(10_000, 2, 1.0, &mut rng);
        let tape = Tape::new();
        let d = mc_divergence(linear_field(&w), tape.constant(x), &n, 1e-3)
            .unwrap()
            .item();
        assert!((d - 5.0).abs() < 0.1, "{d}");
    }

    #[test]
    fn sure_of_identity_denoiser() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = zero_net(6);
        let x = normal(1, 6, 1.0, &mut rng);
        let n = normal(1, 6, 1.0, &mut rng);
        let sigma_w = 0.7;
        let tape = Tape::new();
        let v = sure_loss(&net.bind(&tape, false), tape.constant(x), sigma_w, &n, 1e-3)
            .unwrap()
            .item();
        assert!(close(v, 2.0 * sigma_w * sigma_w * n.norm_sq(), 1e-10));
    }

    #[test]
    fn sure_is_unbiased_for_gaussian_mmse() {
        // prior N(0, diag(d)); the MMSE denoiser shrinks each coordinate
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dim = 8;
        let d: Vec<f64> = (0..dim).map(|i| 0.2 + 0.3 * i as f64).collect();
        let sigma_w = 1.0;
        let count = 10_000;
        let mut clean = normal(count, dim, 1.0, &mut rng);
        for r in 0..count {
            clean.row_mut(r).iter_mut().zip(&d).for_each(|(v, di)| *v *= di.sqrt());
        }
        let noise = normal(count, dim, sigma_w, &mut rng);
        let mut noisy = clean.clone();
        noisy.data_mut().iter_mut().zip(noise.data()).for_each(|(v, w)| *v += w);
        let shrink: Vec<f64> = d.iter().map(|di| di / (di + sigma_w * sigma_w)).collect();
        let mmse = |x: &Tensor| {
            let mut out = x.clone();
            for r in 0..out.rows() {
                out.row_mut(r).iter_mut().zip(&shrink).for_each(|(v, k)| *v *= k);
            }
            Ok(out)
        };
        let n = normal(count, dim, 1.0, &mut rng);
        let est: f64 = sure_mse_estimates(mmse, &noisy, &n, sigma_w, 1e-3)
            .unwrap()
            .iter()
            .sum::<f64>()
            / count as f64;
        let den = mmse(&noisy).unwrap();
        let truth: f64 = den
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / count as f64;
        assert!((est - truth).abs() / truth < 0.03, "{est} vs {truth}");
    }

    fn cfg(lambda: f64, sigma_w: f64) -> LossConfig {
        LossConfig {
            lambda,
            epsilon: 1e-3,
            sigma_w,
            detach_denoiser_in_dsm: false,
        }
    }

    #[test]
    fn sure_score_zero_network_reduces_to_noise_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = zero_net(4);
        let schedule = NoiseSchedule::new(0.1, 2.0, 5, 1e-5, 1.0).unwrap();
        let draw = BatchDraw::sample(&schedule, 1, 4, &mut rng);
        let x = normal(1, 4, 1.0, &mut rng);
        let c = cfg(2.5, 0.4);
        let tape = Tape::new();
        let t = sure_score_loss(&net.bind(&tape, false), tape.constant(x), &draw, &c).unwrap();
        let s = draw.sigmas[0];
        let expected = draw.z.norm_sq() / (s * s) + 2.0 * c.lambda * 0.16 * draw.n.norm_sq();
        assert!(close(t.total.item(), expected, 1e-10));
    }

    fn random_setup(seed: u64, rows: usize, dim: usize) -> (ScoreNetwork, Tensor, BatchDraw, LossConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond = if seed.is_multiple_of(2) {
            Conditioning::OutputScale
        } else {
            Conditioning::LogSigmaInput
        };
        let net = ScoreNetwork::with_options(dim, &[16, 16], Activation::Softplus, cond, seed).unwrap();
        let schedule = NoiseSchedule::new(0.05, 3.0, 8, 1e-5, 1.0).unwrap();
        let draw = BatchDraw::sample(&schedule, rows, dim, &mut rng);
        let x = normal(rows, dim, 1.0, &mut rng);
        let lambda = rng.random_range(0.0..3.0);
        let sigma_w = rng.random_range(0.1..1.5);
        (net, x, draw, cfg(lambda, sigma_w))
    }

    #[test]
    fn sure_score_with_zero_lambda_is_dsm_at_denoised_sample() {
        let (net, x, draw, mut c) = random_setup(10, 4, 6);
        c.lambda = 0.0;
        let tape = Tape::new();
        let bound = net.bind(&tape, false);
        let t = sure_score_loss(&bound, tape.constant(x.clone()), &draw, &c).unwrap();
        let g = net.tweedie_denoise(&x, c.sigma_w).unwrap();
        let d = dsm_loss(&bound, tape.constant(g), &draw.sigmas, &draw.z).unwrap();
        assert!(close(t.total.item(), d.item(), 1e-12));
    }

    #[test]
    fn expanded_form_equals_composed_form() {
        for seed in 0..20 {
            let (net, x, draw, c) = random_setup(seed, 3, 5);
            let tape = Tape::new();
            let bound = net.bind(&tape, false);
            let xv = tape.constant(x.clone());
            let expanded = sure_score_loss(&bound, xv, &draw, &c).unwrap().total.item();
            let g = tweedie_var(&bound, xv, c.sigma_w).unwrap();
            let composed = dsm_loss(&bound, g, &draw.sigmas, &draw.z)
                .unwrap()
                .add(
                    sure_loss(&bound, xv, c.sigma_w, &draw.n, c.epsilon)
                        .unwrap()
                        .scale(c.lambda),
                )
                .unwrap()
                .item();
            assert!(close(expanded, composed, 1e-12), "{expanded} vs {composed}");
        }
    }

    #[test]
    fn tweedie_divergence_splits_linearly() {
        for seed in 0..10 {
            let (net, x, draw, c) = random_setup(seed, 1, 6);
            let tape = Tape::new();
            let bound = net.bind(&tape, false);
            let xv = tape.constant(x);
            let full = mc_divergence(|v| tweedie_var(&bound, v, c.sigma_w), xv, &draw.n, c.epsilon)
                .unwrap()
                .item();
            let s_only = mc_divergence(|v| bound.score(v, &[c.sigma_w]), xv, &draw.n, c.epsilon)
                .unwrap()
                .item();
            let split = draw.n.norm_sq() + c.sigma_w * c.sigma_w * s_only;
            assert!(close(full, split, 1e-12), "{full} vs {split}");
        }
    }

    #[test]
    fn detach_changes_gradients_but_not_value() {
        let (net, x, draw, c) = random_setup(4, 3, 4);
        let run = |detach: bool| {
            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let mut c = c.clone();
            c.detach_denoiser_in_dsm = detach;
            let t = sure_score_loss(&bound, tape.constant(x.clone()), &draw, &c).unwrap();
            let g = tape.backward(t.total).unwrap();
            (t.total.item(), bound.gradients(&g))
        };
        let (a, ga) = run(false);
        let (b, gb) = run(true);
        assert_eq!(a, b);
        assert_ne!(ga, gb);
    }

    fn params_gradcheck(
        net: &ScoreNetwork,
        loss: impl for<'t> Fn(&BoundNetwork<'t>, Var<'t>) -> Result<Var<'t>>,
        x: &Tensor,
    ) -> f64 {
        let leaves: Vec<Tensor> = net.params().into_iter().cloned().chain([x.clone()]).collect();
        check_gradient(
            |_tape, vars| {
                let (x, params) = vars.split_last().unwrap();
                let bound = BoundNetwork::from_vars(net, params)?;
                loss(&bound, *x)
            },
            &leaves,
            // the divergence quotient amplifies round-off by 1/epsilon, so a
            // smaller step makes the finite-difference side noisier, not better
            1e-4,
        )
        .unwrap()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (net, x, draw, c) = random_setup(11, 2, 4);
        let err = params_gradcheck(&net, |b, x| dsm_loss(b, x, &draw.sigmas, &draw.z), &x);
        assert!(err < 1e-4, "dsm {err}");
        let err = params_gradcheck(&net, |b, x| sure_loss(b, x, c.sigma_w, &draw.n, c.epsilon), &x);
        assert!(err < 1e-4, "sure {err}");
        let err = params_gradcheck(&net, |b, x| Ok(sure_score_loss(b, x, &draw, &c)?.total), &x);
        assert!(err < 1e-4, "sure-score {err}");
    }

    #[test]
    fn gradient_suite_passes_for_both_conditionings() {
        for (seed, cond) in [(1, Conditioning::OutputScale), (2, Conditioning::LogSigmaInput)] {
            for (name, err) in loss_gradient_errors(seed, 3, 8, cond).unwrap() {
                assert!(err < 1e-4, "{name} {cond}: {err}");
            }
        }
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_from_means(2.0, 0.5), 4.0);
        assert_eq!(lambda_from_means(0.7, 0.7), 1.0);
        assert_eq!(lambda_from_means(3.0, -0.2), 1.0);
        assert_eq!(lambda_from_means(3.0, 0.0), 1.0);
    }

    #[test]
    fn lambda_init_is_ratio_of_first_batch_terms() {
        let (net, x, draw, c) = random_setup(12, 8, 4);
        let lambda = lambda_init(&net, &x, &draw, &c).unwrap();
        let tape = Tape::new();
        let t = sure_score_loss(&net.bind(&tape, false), tape.constant(x), &draw, &c).unwrap();
        let sure = t.sure.item();
        if sure > 0.0 {
            assert!(close(lambda, t.dsm.item() / sure, 1e-14));
        } else {
            assert_eq!(lambda, 1.0);
        }
    }

    #[test]
    fn tiny_sigma_w_makes_denoiser_identity() {
        let (net, x, draw, mut c) = random_setup(13, 4, 5);
        c.sigma_w = 1e-4;
        let g = net.tweedie_denoise(&x, c.sigma_w).unwrap();
        let rel = g
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(rel < 1e-3, "{rel}");
        let tape = Tape::new();
        let bound = net.bind(&tape, false);
        let t = sure_score_loss(&bound, tape.constant(x.clone()), &draw, &c).unwrap();
        let direct = dsm_loss(&bound, tape.constant(x), &draw.sigmas, &draw.z).unwrap();
        assert!((t.dsm.item() - direct.item()).abs() < 1e-3 * direct.item());
    }
}
