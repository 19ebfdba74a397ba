//! Noise-conditional score network and its Tweedie denoiser view.
//!
//! The network is a fully connected MLP `f` whose output is divided by the
//! noise level: `s(x; sigma) = f(x) / sigma`. With
//! [`Conditioning::LogSigmaInput`] the MLP additionally sees `ln sigma` as an
//! extra input feature and receives `x / sqrt(1 + sigma^2)`, which keeps the
//! input O(1) across the noise ladder.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

const WEIGHTS_MAGIC: &[u8; 4] = b"SSCR";
const WEIGHTS_VERSION: u32 = 1;

/// Anything that can evaluate a score field on a batch of rows.
pub trait ScoreModel {
    fn dim(&self) -> usize;

    /// Score of every row of `x` (`B x dim`) at the matching noise level.
    fn score_batch(&self, x: &Tensor, sigmas: &[f64]) -> Result<Tensor>;
}

/// Score field that is identically zero.
#[derive(Clone, Copy, Debug)]
pub struct ZeroScore(pub usize);

impl ScoreModel for ZeroScore {
    fn dim(&self) -> usize {
        self.0
    }

    fn score_batch(&self, x: &Tensor, _sigmas: &[f64]) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
}

/// How the noise level enters the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// `s = f(x) / sigma` only.
    #[default]
    OutputScale,
    /// `s = f(x / sqrt(1 + sigma^2), ln sigma) / sigma`.
    LogSigmaInput,
}

impl std::str::FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "output_scale" => Ok(Conditioning::OutputScale),
            "log_sigma_input" => Ok(Conditioning::LogSigmaInput),
            other => Err(Error::invalid(format!("unknown conditioning `{other}`"))),
        }
    }
}

impl std::fmt::Display for Conditioning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Conditioning::OutputScale => "output_scale",
            Conditioning::LogSigmaInput => "log_sigma_input",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`, applied as `x W`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetwork {
    input_dim: usize,
    layers: Vec<Dense>,
    activation: Activation,
    conditioning: Conditioning,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("noise level must be positive, got {sigma}")))
    }
}

impl ScoreNetwork {
    /// MLP `input_dim -> widths... -> input_dim` with `s = f(x) / sigma` output
    /// scaling and softplus hidden units.
    pub fn new(input_dim: usize, widths: &[usize], seed: u64) -> Result<Self> {
        Self::with_options(input_dim, widths, Activation::Softplus, Conditioning::OutputScale, seed)
    }

    pub fn with_options(
        input_dim: usize,
        widths: &[usize],
        activation: Activation,
        conditioning: Conditioning,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be at least 1"));
        }
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "hidden widths must be nonempty and positive, got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first_in = match conditioning {
            Conditioning::OutputScale => input_dim,
            Conditioning::LogSigmaInput => input_dim + 1,
        };
        let fans: Vec<usize> = std::iter::once(first_in)
            .chain(widths.iter().copied())
            .chain(std::iter::once(input_dim))
            .collect();
        let layers = fans
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| scale * crate::gauss(&mut rng))
                    .collect::<Vec<f64>>();
                Dense {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("layer shape"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(ScoreNetwork {
            input_dim,
            layers,
            activation,
            conditioning,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn set_activation(&mut self, activation: Activation) {
        self.activation = activation;
    }

    /// Hidden widths, in order.
    pub fn widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.cols())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in a fixed order: weight then bias for each layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Zero the last layer so the score is identically zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }

    /// Register the parameters on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundNetwork<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundNetwork {
            input_dim: self.input_dim,
            activation: self.activation,
            conditioning: self.conditioning,
            layers: self.layers.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect(),
        }
    }

    /// Score of a single vector (`[N]`) or a batch (`[B, N]`) at one level.
    pub fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        check_sigma(sigma)?;
        let batch = as_batch(x, self.input_dim)?;
        let sigmas = vec![sigma; batch.rows()];
        let out = self.score_batch(&batch, &sigmas)?;
        out.reshape(x.shape().to_vec())
    }

    /// `x + sigma_w^2 s(x; sigma_w)`.
    pub fn tweedie_denoise(&self, x_noisy: &Tensor, sigma_w: f64) -> Result<Tensor> {
        tweedie_denoise(self, &as_batch(x_noisy, self.input_dim)?, sigma_w)?.reshape(x_noisy.shape().to_vec())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.num_params());
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            buf.extend_from_slice(&(layer.weight.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.weight.cols() as u32).to_le_bytes());
            for v in layer.weight.data().iter().chain(layer.bias.data()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Read a weights file. The conditioning mode is recovered from the first
    /// layer's row count; the activation defaults to softplus.
    pub fn from_weights_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_weights(&bytes).map_err(|reason| Error::format(path, reason))
    }

    /// Replace this network's parameters with those in `path`. The file must
    /// describe the same architecture; on error `self` is untouched.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let loaded = Self::from_weights_file(path)?;
        if loaded.input_dim != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                found: loaded.input_dim,
            });
        }
        let shapes =
            |n: &ScoreNetwork| -> Vec<Vec<usize>> { n.layers.iter().map(|l| l.weight.shape().to_vec()).collect() };
        if shapes(&loaded) != shapes(self) {
            return Err(Error::format(
                path,
                format!(
                    "layer shapes {:?} do not match network {:?}",
                    shapes(&loaded),
                    shapes(self)
                ),
            ));
        }
        self.layers = loaded.layers;
        Ok(())
    }
}

fn parse_weights(bytes: &[u8]) -> std::result::Result<ScoreNetwork, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != WEIGHTS_MAGIC {
        return Err("bad magic (expected SSCR)".into());
    }
    let version = cur.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let input_dim = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    if input_dim == 0 || count < 2 {
        return Err(format!("invalid header: input_dim {input_dim}, {count} layers"));
    }
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(format!("layer {i} has an empty shape"));
        }
        let weight = cur.f64s(rows * cols)?;
        let bias = cur.f64s(cols)?;
        layers.push(Dense {
            weight: Tensor::matrix(rows, cols, weight).map_err(|e| e.to_string())?,
            bias: Tensor::vector(bias),
        });
    }
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    let conditioning = match layers[0].weight.rows() {
        r if r == input_dim => Conditioning::OutputScale,
        r if r == input_dim + 1 => Conditioning::LogSigmaInput,
        r => return Err(format!("first layer has {r} rows for input_dim {input_dim}")),
    };
    for (i, w) in layers.windows(2).enumerate() {
        if w[0].weight.cols() != w[1].weight.rows() {
            return Err(format!("layers {i} and {} do not chain", i + 1));
        }
    }
    if layers[count - 1].weight.cols() != input_dim {
        return Err("output layer width differs from input_dim".into());
    }
    Ok(ScoreNetwork {
        input_dim,
        layers,
        activation: Activation::Softplus,
        conditioning,
    })
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn as_batch(x: &Tensor, dim: usize) -> Result<Tensor> {
    match x.shape() {
        [n] if *n == dim => x.clone().reshape(vec![1, dim]),
        [_, n] if *n == dim => Ok(x.clone()),
        other => Err(Error::ShapeMismatch {
            op: "score",
            left: other.to_vec(),
            right: vec![dim],
        }),
    }
}

impl ScoreModel for ScoreNetwork {
    fn dim(&self) -> usize {
        self.input_dim
    }

    fn score_batch(&self, x: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        Ok(bound.score(xv, sigmas)?.value())
    }
}

/// Network parameters registered on a tape.
pub struct BoundNetwork<'t> {
    input_dim: usize,
    activation: Activation,
    conditioning: Conditioning,
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundNetwork<'t> {
    /// Bind `net`'s architecture to existing leaves, given in
    /// [`ScoreNetwork::params`] order.
    pub fn from_vars(net: &ScoreNetwork, params: &[Var<'t>]) -> Result<Self> {
        let expected: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape().to_vec()).collect();
        let found: Vec<Vec<usize>> = params.iter().map(|v| v.shape()).collect();
        if expected != found {
            return Err(Error::invalid(format!(
                "parameter shapes {found:?} do not match network {expected:?}"
            )));
        }
        Ok(BoundNetwork {
            input_dim: net.input_dim,
            activation: net.activation,
            conditioning: net.conditioning,
            layers: params.chunks(2).map(|c| (c[0], c[1])).collect(),
        })
    }

    /// Score of each row of `x` (`B x N`) at the matching entry of `sigmas`.
    pub fn score(&self, x: Var<'t>, sigmas: &[f64]) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim || shape[0] != sigmas.len() {
            return Err(Error::ShapeMismatch {
                op: "score",
                left: shape,
                right: vec![sigmas.len(), self.input_dim],
            });
        }
        for &s in sigmas {
            check_sigma(s)?;
        }
        let tape = x.tape();
        let n = self.input_dim;
        let mut h = match self.conditioning {
            Conditioning::OutputScale => x,
            Conditioning::LogSigmaInput => {
                let c_in: Vec<f64> = sigmas.iter().map(|s| 1.0 / (1.0 + s * s).sqrt()).collect();
                let scaled = x.mul(tape.constant(Tensor::row_constant(&c_in, n)))?;
                let log_sigma: Vec<f64> = sigmas.iter().map(|s| s.ln()).collect();
                scaled.concat_cols(tape.constant(Tensor::row_constant(&log_sigma, 1)))?
            }
        };
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add_bias(b)?;
            if i < last {
                h = h.activation(self.activation);
            }
        }
        let inv: Vec<f64> = sigmas.iter().map(|s| 1.0 / s).collect();
        h.mul(tape.constant(Tensor::row_constant(&inv, n)))
    }

    /// Tweedie denoiser `x + sigma_w^2 s(x; sigma_w)` at a single level.
    pub fn tweedie(&self, x: Var<'t>, sigma_w: f64) -> Result<Var<'t>> {
        let rows = x.shape()[0];
        let s = self.score(x, &vec![sigma_w; rows])?;
        x.add(s.scale(sigma_w * sigma_w))
    }

    /// Parameter leaves in [`ScoreNetwork::params`] order.
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Parameter gradients in [`ScoreNetwork::params`] order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.param_vars().into_iter().map(|v| grads.wrt(v)).collect()
    }
}

/// `x + sigma_w^2 s(x; sigma_w)` for any score model, on a `B x N` batch.
pub fn tweedie_denoise(model: &dyn ScoreModel, x: &Tensor, sigma_w: f64) -> Result<Tensor> {
    check_sigma(sigma_w)?;
    let s = model.score_batch(x, &vec![sigma_w; x.rows()])?;
    let k = sigma_w * sigma_w;
    let data = x.data().iter().zip(s.data()).map(|(a, b)| a + k * b).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Inverse of the Tweedie map: `(g - x) / sigma^2`.
pub fn score_from_denoised(denoised: &Tensor, x: &Tensor, sigma: f64) -> Result<Tensor> {
    check_sigma(sigma)?;
    if denoised.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "score_from_denoised",
            left: denoised.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let k = sigma * sigma;
    let data = denoised.data().iter().zip(x.data()).map(|(g, x)| (g - x) / k).collect();
    Tensor::new(x.shape().to_vec(), data)
}
