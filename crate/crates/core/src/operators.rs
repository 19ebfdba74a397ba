//! Linear forward operators `A` and their adjoints for the channel-sensing and
//! multi-coil imaging problems.
//!
//! Operators act on complex vectors. A [`Domain::Real`] operator expects a
//! real signal; the sampler feeds it the signal as complex numbers with zero
//! imaginary part and keeps the real part of `A^H r`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss;
use crate::packing::ComplexPacking;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Real,
    Complex,
}

/// Operator metadata written to JSON sidecars.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorDescription {
    #[serde(rename = "type")]
    pub kind: String,
    pub dims: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_fraction: Option<f64>,
    pub sigma_n: f64,
}

pub trait LinearOperator: Send + Sync {
    /// Number of complex (or real, for [`Domain::Real`]) signal entries.
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn domain(&self) -> Domain;
    fn sigma_n(&self) -> f64;
    fn forward(&self, x: &[Complex64]) -> Result<Vec<Complex64>>;
    fn adjoint(&self, y: &[Complex64]) -> Result<Vec<Complex64>>;
    fn describe(&self) -> OperatorDescription;

    /// Prior-free estimate used as the linear baseline: minimum-norm least
    /// squares unless the operator overrides it.
    fn linear_estimate(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        least_squares(self, y, 4 * self.output_len())
    }

    /// Length of the signal as a real vector.
    fn signal_len(&self) -> usize {
        match self.domain() {
            Domain::Real => self.input_len(),
            Domain::Complex => 2 * self.input_len(),
        }
    }
}

fn check_len(op: &'static str, found: usize, expected: usize) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: vec![found],
            right: vec![expected],
        })
    }
}

/// Real signal vector to complex, or packed complex to complex.
pub fn signal_to_complex(op: &dyn LinearOperator, x: &[f64]) -> Result<Vec<Complex64>> {
    check_len("signal", x.len(), op.signal_len())?;
    match op.domain() {
        Domain::Real => Ok(x.iter().map(|&v| Complex64::new(v, 0.0)).collect()),
        Domain::Complex => ComplexPacking::new(op.input_len()).unpack(x),
    }
}

/// Inverse of [`signal_to_complex`]; real-domain signals keep the real part.
pub fn complex_to_signal(op: &dyn LinearOperator, z: &[Complex64]) -> Vec<f64> {
    match op.domain() {
        Domain::Real => z.iter().map(|c| c.re).collect(),
        Domain::Complex => ComplexPacking::new(op.input_len()).pack(z),
    }
}

/// `y = A x + n` with `n ~ N(0, sigma_n^2)` (real domain) or `CN(0, sigma_n^2)`.
pub fn measure<R: Rng + ?Sized>(op: &dyn LinearOperator, x: &[f64], rng: &mut R) -> Result<Vec<Complex64>> {
    let mut y = op.forward(&signal_to_complex(op, x)?)?;
    let s = op.sigma_n();
    if s > 0.0 {
        for v in &mut y {
            *v += match op.domain() {
                Domain::Real => Complex64::new(s * gauss(rng), 0.0),
                Domain::Complex => Complex64::new(gauss(rng), gauss(rng)) * (s * FRAC_1_SQRT_2),
            };
        }
    }
    Ok(y)
}

pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Minimum-norm least-squares estimate `A^H (A A^H)^-1 y`, by conjugate
/// gradients on `A A^H` with a fixed iteration cap.
pub fn least_squares<O: LinearOperator + ?Sized>(op: &O, y: &[Complex64], iterations: usize) -> Result<Vec<Complex64>> {
    check_len("least_squares", y.len(), op.output_len())?;
    let apply = |v: &[Complex64]| -> Result<Vec<Complex64>> { op.forward(&op.adjoint(v)?) };
    let mut u = vec![ZERO; y.len()];
    let mut r = y.to_vec();
    let mut p = r.clone();
    let mut rr = inner(&r, &r).re;
    let stop = 1e-24 * rr.max(f64::MIN_POSITIVE);
    for _ in 0..iterations {
        if rr <= stop {
            break;
        }
        let ap = apply(&p)?;
        let alpha = rr / inner(&p, &ap).re;
        u.iter_mut().zip(&p).for_each(|(a, b)| *a += b * alpha);
        r.iter_mut().zip(&ap).for_each(|(a, b)| *a -= b * alpha);
        let next = inner(&r, &r).re;
        let beta = next / rr;
        p.iter_mut().zip(&r).for_each(|(a, b)| *a = b + *a * beta);
        rr = next;
    }
    op.adjoint(&u)
}

/// Explicit matrix operator, row-major `rows x cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
    domain: Domain,
    sigma_n: f64,
}

impl DenseOperator {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>, domain: Domain, sigma_n: f64) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "dense operator needs {rows}x{cols} entries, got {}",
                data.len()
            )));
        }
        if domain == Domain::Real && data.iter().any(|c| c.im != 0.0) {
            return Err(Error::invalid("real-domain dense operator must have real entries"));
        }
        Ok(DenseOperator {
            rows,
            cols,
            data,
            domain,
            sigma_n,
        })
    }

    pub fn real(rows: usize, cols: usize, data: &[f64], sigma_n: f64) -> Result<Self> {
        Self::new(
            rows,
            cols,
            data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            Domain::Real,
            sigma_n,
        )
    }

    pub fn identity(n: usize, domain: Domain, sigma_n: f64) -> Self {
        let mut data = vec![ZERO; n * n];
        for i in 0..n {
            data[i * n + i] = Complex64::new(1.0, 0.0);
        }
        DenseOperator {
            rows: n,
            cols: n,
            data,
            domain,
            sigma_n,
        }
    }

    /// The zero map, which turns posterior sampling into prior sampling.
    pub fn zero(n: usize, domain: Domain) -> Self {
        DenseOperator {
            rows: 1,
            cols: n,
            data: vec![ZERO; n],
            domain,
            sigma_n: 1.0,
        }
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.data
    }
}

impl LinearOperator for DenseOperator {
    fn input_len(&self) -> usize {
        self.cols
    }

    fn output_len(&self) -> usize {
        self.rows
    }

    fn domain(&self) -> Domain {
        self.domain
    }

    fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    fn forward(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("dense forward", x.len(), self.cols)?;
        Ok(self
            .data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn adjoint(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("dense adjoint", y.len(), self.rows)?;
        let mut out = vec![ZERO; self.cols];
        for (row, yi) in self.data.chunks_exact(self.cols).zip(y) {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += a.conj() * yi);
        }
        Ok(out)
    }

    fn describe(&self) -> OperatorDescription {
        OperatorDescription {
            kind: "dense".into(),
            dims: vec![self.rows, self.cols],
            sigma_n: self.sigma_n,
            ..Default::default()
        }
    }
}

/// `y = vec(H P)` for a channel `H` (`nr x nt`, column-major) and pilots `P`
/// (`nt x np`, column-major).
#[derive(Clone, Debug, PartialEq)]
pub struct PilotOperator {
    nr: usize,
    nt: usize,
    np: usize,
    pilots: Vec<Complex64>,
    sigma_n: f64,
    seed: Option<u64>,
}

/// `round(alpha * nt)`, at least one.
pub fn pilots_for_alpha(nt: usize, alpha: f64) -> usize {
    ((alpha * nt as f64).round() as usize).max(1)
}

impl PilotOperator {
    /// Random QPSK pilots `(+-1 +-j)/sqrt(2)`.
    pub fn random(nr: usize, nt: usize, np: usize, sigma_n: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pilots = (0..nt * np)
            .map(|_| {
                let re = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let im = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Complex64::new(re, im) * FRAC_1_SQRT_2
            })
            .collect();
        let mut op = Self::with_pilots(nr, nt, np, pilots, sigma_n)?;
        op.seed = Some(seed);
        Ok(op)
    }

    pub fn with_pilots(nr: usize, nt: usize, np: usize, pilots: Vec<Complex64>, sigma_n: f64) -> Result<Self> {
        if nr == 0 || nt == 0 || np == 0 || np > nt {
            return Err(Error::invalid(format!(
                "need nr >= 1 and 1 <= np <= nt, got nr = {nr}, nt = {nt}, np = {np}"
            )));
        }
        if pilots.len() != nt * np {
            return Err(Error::invalid(format!("pilot matrix needs {} entries", nt * np)));
        }
        if !(sigma_n >= 0.0) {
            return Err(Error::invalid(format!("sigma_n must be nonnegative, got {sigma_n}")));
        }
        Ok(PilotOperator {
            nr,
            nt,
            np,
            pilots,
            sigma_n,
            seed: None,
        })
    }

    pub fn pilots(&self) -> &[Complex64] {
        &self.pilots
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nr, self.nt, self.np)
    }

    pub fn with_sigma_n(&self, sigma_n: f64) -> Self {
        PilotOperator {
            sigma_n,
            ..self.clone()
        }
    }

    fn p(&self, j: usize, q: usize) -> Complex64 {
        self.pilots[q * self.nt + j]
    }
}

impl LinearOperator for PilotOperator {
    fn input_len(&self) -> usize {
        self.nr * self.nt
    }

    fn output_len(&self) -> usize {
        self.nr * self.np
    }

    fn domain(&self) -> Domain {
        Domain::Complex
    }

    fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    fn forward(&self, h: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("pilot forward", h.len(), self.input_len())?;
        let nr = self.nr;
        let mut y = vec![ZERO; self.output_len()];
        for q in 0..self.np {
            let col = &mut y[q * nr..(q + 1) * nr];
            for j in 0..self.nt {
                let p = self.p(j, q);
                col.iter_mut()
                    .zip(&h[j * nr..(j + 1) * nr])
                    .for_each(|(o, hv)| *o += hv * p);
            }
        }
        Ok(y)
    }

    fn adjoint(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("pilot adjoint", y.len(), self.output_len())?;
        let nr = self.nr;
        let mut h = vec![ZERO; self.input_len()];
        for j in 0..self.nt {
            let col = &mut h[j * nr..(j + 1) * nr];
            for q in 0..self.np {
                let p = self.p(j, q).conj();
                col.iter_mut()
                    .zip(&y[q * nr..(q + 1) * nr])
                    .for_each(|(o, yv)| *o += yv * p);
            }
        }
        Ok(h)
    }

    fn describe(&self) -> OperatorDescription {
        OperatorDescription {
            kind: "pilot".into(),
            dims: vec![self.nr, self.nt, self.np],
            seed: self.seed,
            alpha: Some(self.np as f64 / self.nt as f64),
            sigma_n: self.sigma_n,
            ..Default::default()
        }
    }
}

/// Sampled k-space columns (full vertical lines) in natural DFT order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub lines: Vec<bool>,
}

impl Mask {
    pub fn width(&self) -> usize {
        self.lines.len()
    }

    pub fn count(&self) -> usize {
        self.lines.iter().filter(|&&b| b).count()
    }

    pub fn sampled(&self) -> Vec<usize> {
        (0..self.lines.len()).filter(|&i| self.lines[i]).collect()
    }

    /// Indices of the fully sampled low-frequency band around DC.
    pub fn center_band(width: usize, lines: usize) -> Vec<usize> {
        let half = lines / 2;
        (0..lines).map(|k| (k + width - half) % width).collect()
    }
}

/// Vertical-line mask keeping `round(width / accel)` lines, of which
/// `round(center_fraction * width)` form a band around DC and the rest are
/// drawn uniformly without replacement.
pub fn make_mask(width: usize, accel: f64, center_fraction: f64, seed: u64) -> Result<Mask> {
    if width == 0 || !(accel >= 1.0) || !(0.0..=1.0).contains(&center_fraction) {
        return Err(Error::invalid(format!(
            "need width >= 1, accel >= 1 and 0 <= center_fraction <= 1, got {width}, {accel}, {center_fraction}"
        )));
    }
    let total = ((width as f64 / accel).round() as usize).clamp(1, width);
    let center = (center_fraction * width as f64).round() as usize;
    if center > total {
        return Err(Error::invalid(format!(
            "center band of {center} lines exceeds the {total} lines allowed at accel {accel}"
        )));
    }
    let mut lines = vec![false; width];
    for i in Mask::center_band(width, center) {
        lines[i] = true;
    }
    let rest: Vec<usize> = (0..width).filter(|&i| !lines[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in index::sample(&mut rng, rest.len(), total - center) {
        lines[rest[k]] = true;
    }
    Ok(Mask { lines })
}

/// Smooth coil profiles normalized so that `sum_i |S_i|^2 = 1` pointwise.
/// Each coil is a Gaussian bump centred on a ring around the image with a
/// gentle linear phase; coil 0 has zero phase.
pub fn synthesize_coils(height: usize, width: usize, coils: usize, seed: u64) -> Result<Vec<Vec<Complex64>>> {
    if coils == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("need at least one coil and a nonempty image"));
    }
    let n = height * width;
    if coils == 1 {
        return Ok(vec![vec![Complex64::new(1.0, 0.0); n]]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let radius = 0.6 * height.max(width) as f64;
    let spread = 0.5 * height.max(width) as f64;
    let mut maps: Vec<Vec<Complex64>> = (0..coils)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / coils as f64 + rng.random_range(-0.2..0.2);
            let (py, px) = (cy + radius * theta.sin(), cx + radius * theta.cos());
            let (fy, fx) = if i == 0 {
                (0.0, 0.0)
            } else {
                (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))
            };
            (0..n)
                .map(|k| {
                    let (r, c) = ((k / width) as f64, (k % width) as f64);
                    let d2 = (r - py).powi(2) + (c - px).powi(2);
                    let mag = (-0.5 * d2 / (spread * spread)).exp();
                    let phase = PI * (fy * (r - cy) / height as f64 + fx * (c - cx) / width as f64);
                    Complex64::from_polar(mag, phase)
                })
                .collect()
        })
        .collect();
    for k in 0..n {
        let norm = maps.iter().map(|m| m[k].norm_sqr()).sum::<f64>().sqrt();
        maps.iter_mut().for_each(|m| m[k] /= norm);
    }
    Ok(maps)
}

/// Unitary 1D DFT matrix `exp(-2 pi j k l / n) / sqrt(n)`.
fn dft_matrix(n: usize) -> Vec<Complex64> {
    let s = 1.0 / (n as f64).sqrt();
    (0..n * n)
        .map(|i| {
            let (k, l) = (i / n, i % n);
            let angle = -2.0 * PI * ((k * l) % n) as f64 / n as f64;
            Complex64::from_polar(s, angle)
        })
        .collect()
}

/// Unitary 2D DFT of a row-major `h x w` array, or its inverse.
fn dft2(x: &[Complex64], h: usize, w: usize, fh: &[Complex64], fw: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let tw = |m: &[Complex64], n: usize, a: usize, b: usize| {
        let v = m[a * n + b];
        if inverse {
            v.conj()
        } else {
            v
        }
    };
    let mut rows = vec![ZERO; h * w];
    for r in 0..h {
        let src = &x[r * w..(r + 1) * w];
        for k in 0..w {
            rows[r * w + k] = src.iter().enumerate().map(|(c, v)| v * tw(fw, w, k, c)).sum();
        }
    }
    let mut out = vec![ZERO; h * w];
    for k in 0..h {
        for c in 0..w {
            out[k * w + c] = (0..h).map(|r| rows[r * w + c] * tw(fh, h, k, r)).sum();
        }
    }
    out
}

/// `y_i = M F (S_i x)` for each coil, with a unitary 2D DFT `F` and a mask
/// `M` that keeps the sampled columns. Output is coil-major; within a coil,
/// row-major over (row, sampled column).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCoilOperator {
    height: usize,
    width: usize,
    coils: Vec<Vec<Complex64>>,
    mask: Mask,
    sampled: Vec<usize>,
    fh: Vec<Complex64>,
    fw: Vec<Complex64>,
    sigma_n: f64,
    accel: Option<f64>,
    center_fraction: Option<f64>,
    seed: Option<u64>,
}

impl MultiCoilOperator {
    pub fn new(height: usize, width: usize, coils: Vec<Vec<Complex64>>, mask: Mask, sigma_n: f64) -> Result<Self> {
        let n = height * width;
        if n == 0 || coils.is_empty() || coils.iter().any(|c| c.len() != n) {
            return Err(Error::invalid(format!("coil maps must be nonempty and of length {n}")));
        }
        if mask.width() != width || mask.count() == 0 {
            return Err(Error::invalid(
                "mask width must match the image and keep at least one line",
            ));
        }
        for k in 0..n {
            if coils.iter().map(|c| c[k].norm_sqr()).sum::<f64>() <= 0.0 {
                return Err(Error::invalid(format!("coil sensitivities vanish at pixel {k}")));
            }
        }
        let sampled = mask.sampled();
        Ok(MultiCoilOperator {
            height,
            width,
            coils,
            mask,
            sampled,
            fh: dft_matrix(height),
            fw: dft_matrix(width),
            sigma_n,
            accel: None,
            center_fraction: None,
            seed: None,
        })
    }

    /// Synthetic coils and a random mask from one seed.
    pub fn synthetic(
        height: usize,
        width: usize,
        num_coils: usize,
        accel: f64,
        center_fraction: f64,
        sigma_n: f64,
        seed: u64,
    ) -> Result<Self> {
        let coils = synthesize_coils(height, width, num_coils, seed)?;
        let mask = make_mask(width, accel, center_fraction, seed.wrapping_add(1))?;
        let mut op = Self::new(height, width, coils, mask, sigma_n)?;
        op.accel = Some(accel);
        op.center_fraction = Some(center_fraction);
        op.seed = Some(seed);
        Ok(op)
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn coils(&self) -> &[Vec<Complex64>] {
        &self.coils
    }

    fn per_coil(&self) -> usize {
        self.height * self.sampled.len()
    }
}

impl LinearOperator for MultiCoilOperator {
    fn input_len(&self) -> usize {
        self.height * self.width
    }

    fn output_len(&self) -> usize {
        self.coils.len() * self.per_coil()
    }

    fn domain(&self) -> Domain {
        Domain::Complex
    }

    fn sigma_n(&self) -> f64 {
        self.sigma_n
    }

    fn forward(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("mri forward", x.len(), self.input_len())?;
        let (h, w) = (self.height, self.width);
        let mut y = Vec::with_capacity(self.output_len());
        for s in &self.coils {
            let weighted: Vec<Complex64> = x.iter().zip(s).map(|(a, b)| a * b).collect();
            let k = dft2(&weighted, h, w, &self.fh, &self.fw, false);
            for r in 0..h {
                y.extend(self.sampled.iter().map(|&c| k[r * w + c]));
            }
        }
        Ok(y)
    }

    fn adjoint(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("mri adjoint", y.len(), self.output_len())?;
        let (h, w) = (self.height, self.width);
        let mut x = vec![ZERO; h * w];
        for (s, yc) in self.coils.iter().zip(y.chunks_exact(self.per_coil())) {
            let mut k = vec![ZERO; h * w];
            for r in 0..h {
                for (j, &c) in self.sampled.iter().enumerate() {
                    k[r * w + c] = yc[r * self.sampled.len() + j];
                }
            }
            let img = dft2(&k, h, w, &self.fh, &self.fw, true);
            x.iter_mut()
                .zip(img.iter().zip(s))
                .for_each(|(o, (v, sv))| *o += sv.conj() * v);
        }
        Ok(x)
    }

    fn describe(&self) -> OperatorDescription {
        OperatorDescription {
            kind: "multicoil".into(),
            dims: vec![self.height, self.width, self.coils.len()],
            seed: self.seed,
            alpha: Some(self.mask.count() as f64 / self.width as f64),
            accel: self.accel,
            center_fraction: self.center_fraction,
            sigma_n: self.sigma_n,
        }
    }

    /// Zero-filled, coil-combined image `A^H y`. With unit-norm coil maps this
    /// is exact on the sampled lines; least squares would amplify noise on
    /// the nearly square systems that several coils produce.
    fn linear_estimate(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        self.adjoint(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_complex(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        (0..n).map(|_| Complex64::new(gauss(rng), gauss(rng))).collect()
    }

    fn norm(v: &[Complex64]) -> f64 {
        v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    fn adjoint_gap(op: &dyn LinearOperator, rng: &mut ChaCha8Rng) -> f64 {
        let x = random_complex(op.input_len(), rng);
        let y = random_complex(op.output_len(), rng);
        let lhs = inner(&op.forward(&x).unwrap(), &y);
        let rhs = inner(&x, &op.adjoint(&y).unwrap());
        (lhs - rhs).norm() / lhs.norm().max(1.0)
    }

    #[test]
    fn pilot_counts_and_alphabet() {
        assert_eq!(pilots_for_alpha(64, 0.6), 38);
        let op = PilotOperator::random(2, 8, 5, 0.1, 3).unwrap();
        for p in op.pilots() {
            assert!((p.norm() - 1.0).abs() < 1e-15);
            assert!((p.re.abs() - FRAC_1_SQRT_2).abs() < 1e-15);
            assert!((p.im.abs() - FRAC_1_SQRT_2).abs() < 1e-15);
        }
        assert_eq!(op, PilotOperator::random(2, 8, 5, 0.1, 3).unwrap());
        assert!(PilotOperator::random(2, 4, 5, 0.1, 3).is_err());
        assert!(PilotOperator::random(2, 4, 0, 0.1, 3).is_err());
    }

    #[test]
    fn single_pilot_identity() {
        let op = PilotOperator::with_pilots(3, 1, 1, vec![Complex64::new(1.0, 0.0)], 0.0).unwrap();
        let h = vec![
            Complex64::new(1.0, 2.0),
            Complex64::new(-3.0, 0.5),
            Complex64::new(0.0, 1.0),
        ];
        assert_eq!(op.forward(&h).unwrap(), h);
    }

    #[test]
    fn pilot_matches_dense_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (nr, nt, np) = (2, 3, 2);
        let op = PilotOperator::random(nr, nt, np, 0.0, 9).unwrap();
        // (P^T kron I_nr) acting on vec(H)
        let mut k = vec![ZERO; nr * np * nr * nt];
        for q in 0..np {
            for j in 0..nt {
                for i in 0..nr {
                    k[(q * nr + i) * (nr * nt) + j * nr + i] = op.pilots()[q * nt + j];
                }
            }
        }
        let dense = DenseOperator::new(nr * np, nr * nt, k, Domain::Complex, 0.0).unwrap();
        let h = random_complex(nr * nt, &mut rng);
        let a = op.forward(&h).unwrap();
        let b = dense.forward(&h).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).norm() < 1e-12);
        }
    }

    #[test]
    fn adjoints_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pilot = PilotOperator::random(3, 6, 4, 0.1, 1).unwrap();
        let mri = MultiCoilOperator::synthetic(8, 8, 3, 2.0, 0.25, 0.1, 4).unwrap();
        let dense = DenseOperator::new(3, 4, random_complex(12, &mut rng), Domain::Complex, 0.0).unwrap();
        for _ in 0..20 {
            assert!(adjoint_gap(&pilot, &mut rng) < 1e-12);
            assert!(adjoint_gap(&mri, &mut rng) < 1e-12);
            assert!(adjoint_gap(&dense, &mut rng) < 1e-12);
        }
    }

    #[test]
    fn orthogonal_pilots_give_identity_normal_operator() {
        // rows of a 4x4 Hadamard matrix scaled to be unitary
        let s = [
            1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0,
        ];
        let pilots = s.iter().map(|&v| Complex64::new(0.5 * v, 0.0)).collect();
        let op = PilotOperator::with_pilots(4, 4, 4, pilots, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_complex(16, &mut rng);
        let back = op.adjoint(&op.forward(&h).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&h) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(op.adjoint(&vec![ZERO; 16]).unwrap().iter().all(|c| *c == ZERO));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let op = PilotOperator::random(2, 4, 2, 0.1, 1).unwrap();
        assert!(op.forward(&[ZERO; 3]).is_err());
        assert!(op.adjoint(&[ZERO; 3]).is_err());
    }

    #[test]
    fn mask_examples() {
        assert!(make_mask(16, 1.0, 0.1, 0).unwrap().lines.iter().all(|&b| b));
        let m = make_mask(64, 5.0, 8.0 / 64.0, 3).unwrap();
        assert_eq!(m.count(), 13);
        for seed in 0..20 {
            let m = make_mask(64, 4.0, 0.08, seed).unwrap();
            assert!(Mask::center_band(64, 5).iter().all(|&i| m.lines[i]));
            assert!(m.lines[0]);
        }
        assert!(make_mask(64, 8.0, 0.5, 0).is_err());
        assert!(make_mask(64, 0.5, 0.1, 0).is_err());
    }

    #[test]
    fn coils_are_normalized_and_reproducible() {
        assert!(synthesize_coils(4, 4, 1, 0).unwrap()[0]
            .iter()
            .all(|c| *c == Complex64::new(1.0, 0.0)));
        let maps = synthesize_coils(8, 6, 4, 7).unwrap();
        for k in 0..48 {
            let s: f64 = maps.iter().map(|m| m[k].norm_sqr()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(maps[0].iter().all(|c| c.im.abs() < 1e-15 && c.re > 0.0));
        assert_eq!(maps, synthesize_coils(8, 6, 4, 7).unwrap());
    }

    #[test]
    fn linear_estimates_fit_the_measurements() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pilot = PilotOperator::random(2, 8, 5, 0.0, 4).unwrap();
        let y = random_complex(pilot.output_len(), &mut rng);
        let h = pilot.linear_estimate(&y).unwrap();
        for (a, b) in pilot.forward(&h).unwrap().iter().zip(&y) {
            assert!((a - b).norm() < 1e-9);
        }
        let mri = MultiCoilOperator::synthetic(8, 8, 4, 4.0, 0.25, 0.0, 5).unwrap();
        let y = random_complex(mri.output_len(), &mut rng);
        assert_eq!(mri.linear_estimate(&y).unwrap(), mri.adjoint(&y).unwrap());
    }

    #[test]
    fn full_mask_normalized_coils_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let full = Mask { lines: vec![true; 8] };
        let single = MultiCoilOperator::new(8, 8, synthesize_coils(8, 8, 1, 0).unwrap(), full.clone(), 0.0).unwrap();
        let multi = MultiCoilOperator::new(8, 8, synthesize_coils(8, 8, 4, 2).unwrap(), full, 0.0).unwrap();
        for op in [&single, &multi] {
            let x = random_complex(64, &mut rng);
            let y = op.forward(&x).unwrap();
            assert!((norm(&y) - norm(&x)).abs() < 1e-12 * norm(&x));
            let back = op.adjoint(&y).unwrap();
            for (a, b) in back.iter().zip(&x) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn least_squares_inverts_well_posed_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = PilotOperator::random(2, 4, 4, 0.0, 2).unwrap();
        let h = random_complex(8, &mut rng);
        let y = op.forward(&h).unwrap();
        let est = least_squares(&op, &y, 100).unwrap();
        for (a, b) in est.iter().zip(&h) {
            assert!((a - b).norm() < 1e-8, "{a} vs {b}");
        }
        // underdetermined: the estimate reproduces the data
        let op = PilotOperator::random(2, 6, 3, 0.0, 2).unwrap();
        let h = random_complex(12, &mut rng);
        let y = op.forward(&h).unwrap();
        let fit = op.forward(&least_squares(&op, &y, 100).unwrap()).unwrap();
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn measurement_noise_level() {
        let op = DenseOperator::identity(4, Domain::Complex, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut energy = 0.0;
        let n = 5000;
        for _ in 0..n {
            let y = measure(&op, &[0.0; 8], &mut rng).unwrap();
            energy += y.iter().map(|c| c.norm_sqr()).sum::<f64>();
        }
        let per_entry = energy / (4 * n) as f64;
        assert!((per_entry - 0.25).abs() < 0.01, "{per_entry}");
    }
}
