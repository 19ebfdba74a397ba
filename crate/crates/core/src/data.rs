//! Synthetic priors, closed-form score and MMSE oracles, and noisy datasets.
//!
//! Samples are stored as rows of a real matrix. Complex-valued priors (toy
//! channels and toy images) are stored packed: real parts followed by
//! imaginary parts, see [`crate::packing::ComplexPacking`]. Channels are
//! vectorized column-major (`vec(H)`), images row-major.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gauss;
use crate::network::{Cursor, ScoreModel};
use crate::packing::ComplexPacking;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticPrior {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    },
    /// Sum of `paths` rank-one terms `g a_r(theta_r) a_t(theta_t)^H` with
    /// half-wavelength steering vectors and gains `CN(0, 1/paths)`, so every
    /// entry has unit expected energy. With `angle_spread = Some(d)` each path's
    /// angles are drawn within `+-d` of fixed cluster centres derived from
    /// `cluster_seed`; with `None` angles are uniform on `(-pi/2, pi/2)`.
    ToyChannel {
        nr: usize,
        nt: usize,
        paths: usize,
        angle_spread: Option<f64>,
        cluster_seed: u64,
    },
    /// Complex white noise smoothed by a periodic Gaussian kernel of width
    /// `smoothness` pixels, scaled to unit expected energy per pixel.
    ToyImage {
        height: usize,
        width: usize,
        smoothness: f64,
    },
}

type RowSampler<'a> = Box<dyn FnMut(&mut ChaCha8Rng, &mut Vec<f64>) + 'a>;

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

fn steering(n: usize, angle: f64) -> impl Iterator<Item = Complex64> {
    (0..n).map(move |k| Complex64::from_polar(1.0, PI * k as f64 * angle.sin()))
}

fn gaussian_kernel(width: f64, len: usize) -> Vec<f64> {
    // periodic kernel indexed by circular offset
    (0..len)
        .map(|i| {
            let d = i.min(len - i) as f64;
            (-0.5 * d * d / (width * width)).exp()
        })
        .collect()
}

impl SyntheticPrior {
    pub fn standard_gaussian(n: usize) -> Self {
        let cov = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        SyntheticPrior::Gaussian {
            mean: vec![0.0; n],
            cov,
        }
    }

    /// Two equal-weight isotropic components at `(+-sep, 0, ...)`.
    pub fn symmetric_gmm(n: usize, sep: f64, var: f64) -> Self {
        let mut m0 = vec![0.0; n];
        let mut m1 = vec![0.0; n];
        m0[0] = sep;
        m1[0] = -sep;
        let cov: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { var } else { 0.0 }).collect())
            .collect();
        SyntheticPrior::Gmm {
            weights: vec![0.5, 0.5],
            means: vec![m0, m1],
            covs: vec![cov.clone(), cov],
        }
    }

    pub fn toy_channel(nr: usize, nt: usize) -> Self {
        SyntheticPrior::ToyChannel {
            nr,
            nt,
            paths: 3,
            angle_spread: Some(0.1),
            cluster_seed: 123,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SyntheticPrior::Gaussian { .. } => "gaussian",
            SyntheticPrior::Gmm { .. } => "gmm",
            SyntheticPrior::ToyChannel { .. } => "toy_channel",
            SyntheticPrior::ToyImage { .. } => "toy_image",
        }
    }

    pub fn kind_tag(&self) -> u32 {
        match self {
            SyntheticPrior::Gaussian { .. } => 0,
            SyntheticPrior::Gmm { .. } => 1,
            SyntheticPrior::ToyChannel { .. } => 2,
            SyntheticPrior::ToyImage { .. } => 3,
        }
    }

    /// Natural shape of one sample: `[N]` for real priors, `[rows, cols]`
    /// of complex entries otherwise.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            SyntheticPrior::Gaussian { mean, .. } => vec![mean.len()],
            SyntheticPrior::Gmm { means, .. } => vec![means[0].len()],
            SyntheticPrior::ToyChannel { nr, nt, .. } => vec![*nr, *nt],
            SyntheticPrior::ToyImage { height, width, .. } => vec![*height, *width],
        }
    }

    pub fn is_complex(&self) -> bool {
        matches!(
            self,
            SyntheticPrior::ToyChannel { .. } | SyntheticPrior::ToyImage { .. }
        )
    }

    /// Length of a sample as a real vector.
    pub fn dim(&self) -> usize {
        let n: usize = self.dims().iter().product();
        if self.is_complex() {
            2 * n
        } else {
            n
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_cov = |cov: &[Vec<f64>], n: usize, what: &str| -> Result<()> {
            if cov.len() != n || cov.iter().any(|r| r.len() != n) {
                return Err(Error::invalid(format!("{what} must be {n}x{n}")));
            }
            let m = to_matrix(cov);
            if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                return Err(Error::invalid(format!("{what} is not symmetric")));
            }
            if Cholesky::new(m).is_none() {
                return Err(Error::invalid(format!("{what} is not positive definite")));
            }
            Ok(())
        };
        match self {
            SyntheticPrior::Gaussian { mean, cov } => {
                if mean.is_empty() {
                    return Err(Error::invalid("gaussian mean is empty"));
                }
                check_cov(cov, mean.len(), "gaussian covariance")
            }
            SyntheticPrior::Gmm { weights, means, covs } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
                    return Err(Error::invalid(
                        "gmm weights, means and covs must have equal nonzero length",
                    ));
                }
                if weights.iter().any(|&w| !(w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("gmm weights must be positive and sum to 1"));
                }
                let n = means[0].len();
                if n == 0 || means.iter().any(|m| m.len() != n) {
                    return Err(Error::invalid("gmm means must share a nonzero dimension"));
                }
                covs.iter()
                    .enumerate()
                    .try_for_each(|(k, c)| check_cov(c, n, &format!("gmm covariance {k}")))
            }
            SyntheticPrior::ToyChannel {
                nr,
                nt,
                paths,
                angle_spread,
                ..
            } => {
                if *nr == 0 || *nt == 0 || *paths == 0 {
                    return Err(Error::invalid("toy_channel needs nr, nt, paths >= 1"));
                }
                if let Some(s) = angle_spread {
                    if !(*s >= 0.0) {
                        return Err(Error::invalid("toy_channel angle_spread must be nonnegative"));
                    }
                }
                Ok(())
            }
            SyntheticPrior::ToyImage {
                height,
                width,
                smoothness,
            } => {
                if *height == 0 || *width == 0 || !(*smoothness > 0.0) {
                    return Err(Error::invalid("toy_image needs positive dims and smoothness"));
                }
                Ok(())
            }
        }
    }

    /// `n` i.i.d. samples as rows. Sample `i` uses its own ChaCha stream, so
    /// the result does not depend on how generation is scheduled.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        self.validate()?;
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let dim = self.dim();
        let mut out = Vec::with_capacity(n * dim);
        let mut sampler = self.row_sampler();
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sampler(&mut rng, &mut out);
        }
        Tensor::matrix(n, dim, out)
    }

    fn row_sampler(&self) -> RowSampler<'_> {
        match self {
            SyntheticPrior::Gaussian { mean, cov } => {
                let l = Cholesky::new(to_matrix(cov)).expect("validated").l();
                Box::new(move |rng, out| {
                    let z = DVector::from_fn(mean.len(), |_, _| gauss(rng));
                    let x = &l * z;
                    out.extend(x.iter().zip(mean).map(|(a, m)| a + m));
                })
            }
            SyntheticPrior::Gmm { weights, means, covs } => {
                let ls: Vec<DMatrix<f64>> = covs
                    .iter()
                    .map(|c| Cholesky::new(to_matrix(c)).expect("validated").l())
                    .collect();
                Box::new(move |rng, out| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut k = weights.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    let z = DVector::from_fn(means[k].len(), |_, _| gauss(rng));
                    let x = &ls[k] * z;
                    out.extend(x.iter().zip(&means[k]).map(|(a, m)| a + m));
                })
            }
            SyntheticPrior::ToyChannel {
                nr,
                nt,
                paths,
                angle_spread,
                cluster_seed,
            } => {
                let (nr, nt, paths) = (*nr, *nt, *paths);
                let mut crng = ChaCha8Rng::seed_from_u64(*cluster_seed);
                let centres: Vec<(f64, f64)> = (0..paths)
                    .map(|_| {
                        (
                            crng.random_range(-PI / 2.0..PI / 2.0),
                            crng.random_range(-PI / 2.0..PI / 2.0),
                        )
                    })
                    .collect();
                let spread = *angle_spread;
                let packing = ComplexPacking::new(nr * nt);
                Box::new(move |rng, out| {
                    let mut h = vec![Complex64::new(0.0, 0.0); nr * nt];
                    let gain_std = (0.5 / paths as f64).sqrt();
                    for &(cr, ct) in &centres {
                        let g = Complex64::new(gain_std * gauss(rng), gain_std * gauss(rng));
                        let (ar, at) = match spread {
                            Some(d) => (
                                cr + d * rng.random_range(-1.0..1.0),
                                ct + d * rng.random_range(-1.0..1.0),
                            ),
                            None => (
                                rng.random_range(-PI / 2.0..PI / 2.0),
                                rng.random_range(-PI / 2.0..PI / 2.0),
                            ),
                        };
                        let a_r: Vec<Complex64> = steering(nr, ar).collect();
                        let a_t: Vec<Complex64> = steering(nt, at).collect();
                        // column-major: entry (i, j) at j * nr + i
                        for (j, t) in a_t.iter().enumerate() {
                            for (i, r) in a_r.iter().enumerate() {
                                h[j * nr + i] += g * r * t.conj();
                            }
                        }
                    }
                    out.extend(packing.pack(&h));
                })
            }
            SyntheticPrior::ToyImage {
                height,
                width,
                smoothness,
            } => {
                let (hh, ww) = (*height, *width);
                let kr = gaussian_kernel(*smoothness, hh);
                let kc = gaussian_kernel(*smoothness, ww);
                let energy: f64 = kr.iter().map(|v| v * v).sum::<f64>() * kc.iter().map(|v| v * v).sum::<f64>();
                let scale = 1.0 / energy.sqrt();
                let packing = ComplexPacking::new(hh * ww);
                Box::new(move |rng, out| {
                    let white: Vec<Complex64> = (0..hh * ww)
                        .map(|_| Complex64::new(gauss(rng), gauss(rng)) * std::f64::consts::FRAC_1_SQRT_2)
                        .collect();
                    let mut rows = vec![Complex64::new(0.0, 0.0); hh * ww];
                    for r in 0..hh {
                        for c in 0..ww {
                            rows[r * ww + c] = (0..ww).map(|k| white[r * ww + k] * kc[(c + ww - k) % ww]).sum();
                        }
                    }
                    let mut img = vec![Complex64::new(0.0, 0.0); hh * ww];
                    for r in 0..hh {
                        for c in 0..ww {
                            img[r * ww + c] = (0..hh)
                                .map(|k| rows[k * ww + c] * kr[(r + hh - k) % hh])
                                .sum::<Complex64>()
                                * scale;
                        }
                    }
                    out.extend(packing.pack(&img));
                })
            }
        }
    }

    /// Score of the prior convolved with `N(0, sigma^2 I)`, per row.
    pub fn analytic_score(&self, x: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
        self.check_rows(x, sigmas.len())?;
        let mut out = Tensor::zeros(x.shape());
        match self {
            SyntheticPrior::Gaussian { mean, cov } => {
                let mut cache = FactorCache::new(to_matrix(cov));
                for (r, &s) in sigmas.iter().enumerate() {
                    let d = DVector::from_iterator(mean.len(), x.row(r).iter().zip(mean).map(|(a, m)| a - m));
                    let u = cache.get(s)?.solve(&d);
                    out.row_mut(r).iter_mut().zip(u.iter()).for_each(|(o, v)| *o = -v);
                }
            }
            SyntheticPrior::Gmm { weights, means, covs } => {
                let n = means[0].len();
                let mut caches: Vec<FactorCache> = covs.iter().map(|c| FactorCache::new(to_matrix(c))).collect();
                for (r, &s) in sigmas.iter().enumerate() {
                    let mut logs = Vec::with_capacity(weights.len());
                    let mut dirs = Vec::with_capacity(weights.len());
                    for (k, cache) in caches.iter_mut().enumerate() {
                        let d = DVector::from_iterator(n, x.row(r).iter().zip(&means[k]).map(|(a, m)| a - m));
                        let chol = cache.get(s)?;
                        let u = chol.solve(&d);
                        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                        logs.push(weights[k].ln() - 0.5 * d.dot(&u) - 0.5 * log_det);
                        dirs.push(u);
                    }
                    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = logs.iter().map(|l| (l - m).exp()).sum();
                    let row = out.row_mut(r);
                    for (l, u) in logs.iter().zip(&dirs) {
                        let resp = (l - m).exp() / total;
                        row.iter_mut().zip(u.iter()).for_each(|(o, v)| *o -= resp * v);
                    }
                }
            }
            _ => {
                return Err(Error::Unsupported(format!(
                    "analytic score for {} prior",
                    self.kind_name()
                )))
            }
        }
        Ok(out)
    }

    /// Posterior-mean denoiser for noise `N(0, sigma_w^2 I)`, per row.
    pub fn analytic_mmse(&self, x: &Tensor, sigma_w: f64) -> Result<Tensor> {
        if !(sigma_w >= 0.0) {
            return Err(Error::invalid(format!("sigma_w must be nonnegative, got {sigma_w}")));
        }
        self.check_rows(x, x.rows())?;
        match self {
            SyntheticPrior::Gaussian { mean, cov } => {
                if sigma_w == 0.0 {
                    return Ok(x.clone());
                }
                let sigma = to_matrix(cov);
                let mut cache = FactorCache::new(sigma.clone());
                let chol = cache.get(sigma_w)?;
                let mut out = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let d = DVector::from_iterator(mean.len(), x.row(r).iter().zip(mean).map(|(a, m)| a - m));
                    let v = &sigma * chol.solve(&d);
                    out.row_mut(r)
                        .iter_mut()
                        .zip(v.iter().zip(mean))
                        .for_each(|(o, (a, m))| *o = m + a);
                }
                Ok(out)
            }
            SyntheticPrior::Gmm { .. } => {
                if sigma_w == 0.0 {
                    return Ok(x.clone());
                }
                let s = self.analytic_score(x, &vec![sigma_w; x.rows()])?;
                let k = sigma_w * sigma_w;
                let data = x.data().iter().zip(s.data()).map(|(a, b)| a + k * b).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            _ => Err(Error::Unsupported(format!(
                "analytic MMSE for {} prior",
                self.kind_name()
            ))),
        }
    }

    /// Mean of the Gaussian posterior for `y = A x + n`, `n ~ N(0, sigma_n^2 I)`.
    pub fn gaussian_posterior_mean(&self, a: &DMatrix<f64>, y: &[f64], sigma_n: f64) -> Result<Vec<f64>> {
        let SyntheticPrior::Gaussian { mean, cov } = self else {
            return Err(Error::Unsupported(format!(
                "posterior mean for {} prior",
                self.kind_name()
            )));
        };
        if a.ncols() != mean.len() || a.nrows() != y.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                found: a.ncols(),
            });
        }
        let prec_prior = to_matrix(cov)
            .try_inverse()
            .ok_or_else(|| Error::invalid("singular prior covariance"))?;
        let k = 1.0 / (sigma_n * sigma_n);
        let prec = a.transpose() * a * k + &prec_prior;
        let rhs = a.transpose() * DVector::from_column_slice(y) * k + &prec_prior * DVector::from_column_slice(mean);
        let chol = Cholesky::new(prec).ok_or_else(|| Error::invalid("posterior precision not positive definite"))?;
        Ok(chol.solve(&rhs).iter().copied().collect())
    }

    fn check_rows(&self, x: &Tensor, rows: usize) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.dim() || x.rows() != rows {
            return Err(Error::ShapeMismatch {
                op: "prior oracle",
                left: x.shape().to_vec(),
                right: vec![rows, self.dim()],
            });
        }
        Ok(())
    }
}

/// Cholesky factors of `base + sigma^2 I`, memoized by `sigma`.
struct FactorCache {
    base: DMatrix<f64>,
    factors: HashMap<u64, Cholesky<f64, Dyn>>,
}

impl FactorCache {
    fn new(base: DMatrix<f64>) -> Self {
        FactorCache {
            base,
            factors: HashMap::new(),
        }
    }

    fn get(&mut self, sigma: f64) -> Result<&Cholesky<f64, Dyn>> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("noise level must be positive, got {sigma}")));
        }
        let base = &self.base;
        Ok(self.factors.entry(sigma.to_bits()).or_insert_with(|| {
            let n = base.nrows();
            let m = base + DMatrix::identity(n, n) * (sigma * sigma);
            Cholesky::new(m).expect("covariance plus sigma^2 I is positive definite")
        }))
    }
}

/// A prior's exact perturbed score as a [`ScoreModel`].
#[derive(Clone, Debug)]
pub struct AnalyticScore(pub SyntheticPrior);

impl ScoreModel for AnalyticScore {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn score_batch(&self, x: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
        self.0.analytic_score(x, sigmas)
    }
}

/// `10^(-snr_db / 20)`; `+inf` maps to zero noise.
pub fn sigma_w_from_snr_db(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 20.0)
    }
}

/// Standard deviation of each stored real coordinate of the noise.
pub fn coordinate_sigma(sigma_w: f64, complex: bool) -> f64 {
    if complex {
        sigma_w * std::f64::consts::FRAC_1_SQRT_2
    } else {
        sigma_w
    }
}

const DATASET_MAGIC: &[u8; 4] = b"SSDS";
const DATASET_VERSION: u32 = 1;
const FLAG_COMPLEX: u32 = 1;
const FLAG_CLEAN: u32 = 2;

/// One noisy realization per clean sample. The last `test_fraction` of rows
/// form the held-out test split.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    pub kind_tag: u32,
    pub dims: Vec<usize>,
    pub complex: bool,
    /// Noise level `sigma_w` with `E|w_i|^2 = sigma_w^2` per (complex) entry.
    pub sigma_w: f64,
    pub seed: u64,
    pub noisy: Tensor,
    pub clean: Option<Tensor>,
}

pub const TEST_FRACTION: f64 = 0.1;

/// Add `CN(0, sigma_w^2)` (complex) or `N(0, sigma_w^2)` (real) noise with
/// `sigma_w = 10^(-snr_db/20)`. Row `i` uses its own stream.
pub fn corrupt(prior: &SyntheticPrior, clean: &Tensor, snr_db: f64, seed: u64) -> Result<NoisyDataset> {
    if clean.cols() != prior.dim() || clean.shape().len() != 2 {
        return Err(Error::Dimension {
            expected: prior.dim(),
            found: clean.cols(),
        });
    }
    let sigma_w = sigma_w_from_snr_db(snr_db);
    let std = coordinate_sigma(sigma_w, prior.is_complex());
    let mut noisy = clean.clone();
    if std > 0.0 {
        for r in 0..noisy.rows() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f4_015e);
            rng.set_stream(r as u64);
            noisy.row_mut(r).iter_mut().for_each(|v| *v += std * gauss(&mut rng));
        }
    }
    Ok(NoisyDataset {
        kind_tag: prior.kind_tag(),
        dims: prior.dims(),
        complex: prior.is_complex(),
        sigma_w,
        seed,
        noisy,
        clean: Some(clean.clone()),
    })
}

impl NoisyDataset {
    pub fn len(&self) -> usize {
        self.noisy.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.noisy.cols()
    }

    /// Per-coordinate noise standard deviation of the stored real vectors.
    pub fn coordinate_sigma(&self) -> f64 {
        coordinate_sigma(self.sigma_w, self.complex)
    }

    /// Number of training rows; the remainder is the test split.
    pub fn train_len(&self) -> usize {
        let n = self.len();
        let test = ((n as f64) * TEST_FRACTION).round() as usize;
        if n > 1 {
            n - test.clamp(1, n - 1)
        } else {
            n
        }
    }

    fn rows(t: &Tensor, range: std::ops::Range<usize>) -> Tensor {
        t.select_rows(&range.collect::<Vec<_>>())
    }

    pub fn noisy_train(&self) -> Tensor {
        Self::rows(&self.noisy, 0..self.train_len())
    }

    pub fn noisy_test(&self) -> Tensor {
        Self::rows(&self.noisy, self.train_len()..self.len())
    }

    pub fn clean_train(&self) -> Result<Tensor> {
        Ok(Self::rows(self.require_clean()?, 0..self.train_len()))
    }

    pub fn clean_test(&self) -> Result<Tensor> {
        Ok(Self::rows(self.require_clean()?, self.train_len()..self.len()))
    }

    fn require_clean(&self) -> Result<&Tensor> {
        self.clean
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset was exported noisy-only and has no clean samples"))
    }

    /// Copy without the clean payload.
    pub fn noisy_only(&self) -> NoisyDataset {
        NoisyDataset {
            clean: None,
            ..self.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.kind_tag.to_le_bytes());
        let mut flags = 0;
        if self.complex {
            flags |= FLAG_COMPLEX;
        }
        if self.clean.is_some() {
            flags |= FLAG_CLEAN;
        }
        buf.extend_from_slice(&flags.to_le_bytes());
        buf.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&self.sigma_w.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        let payloads = std::iter::once(&self.noisy).chain(self.clean.as_ref());
        for t in payloads {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_dataset(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

fn parse_dataset(bytes: &[u8]) -> std::result::Result<NoisyDataset, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != DATASET_MAGIC {
        return Err("bad magic (expected SSDS)".into());
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let kind_tag = cur.u32()?;
    if kind_tag > 3 {
        return Err(format!("unknown kind tag {kind_tag}"));
    }
    let flags = cur.u32()?;
    if flags & !(FLAG_COMPLEX | FLAG_CLEAN) != 0 {
        return Err(format!("unknown flags {flags:#x}"));
    }
    let ndims = cur.u32()? as usize;
    if ndims == 0 || ndims > 8 {
        return Err(format!("invalid dimension count {ndims}"));
    }
    let dims = (0..ndims)
        .map(|_| cur.u32().map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let count = usize::try_from(cur.u64()?).map_err(|_| "sample count overflows")?;
    let dim = cur.u32()? as usize;
    let complex = flags & FLAG_COMPLEX != 0;
    let expected_dim = dims.iter().product::<usize>() * if complex { 2 } else { 1 };
    if count == 0 || dim == 0 || dim != expected_dim {
        return Err(format!(
            "inconsistent header: {count} samples of length {dim}, dims {dims:?}"
        ));
    }
    let sigma_w = cur.f64()?;
    let seed = cur.u64()?;
    let len = count.checked_mul(dim).ok_or("payload size overflows")?;
    let noisy = Tensor::matrix(count, dim, cur.f64s(len)?).map_err(|e| e.to_string())?;
    let clean = if flags & FLAG_CLEAN != 0 {
        Some(Tensor::matrix(count, dim, cur.f64s(len)?).map_err(|e| e.to_string())?)
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    Ok(NoisyDataset {
        kind_tag,
        dims,
        complex,
        sigma_w,
        seed,
        noisy,
        clean,
    })
}
