//! Mini-batch training of a score network with Adam.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::NoisyDataset;
use crate::error::{Error, Result};
use crate::losses::{dsm_loss, lambda_init, sure_score_loss, BatchDraw, LossConfig};
use crate::network::ScoreNetwork;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// DSM on clean samples.
    Supervised,
    /// DSM on noisy samples, treated as clean.
    Naive,
    SureScore,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Supervised, TrainMode::Naive, TrainMode::SureScore];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::Naive => "naive",
            TrainMode::SureScore => "sure_score",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(TrainMode::Supervised),
            "naive" => Ok(TrainMode::Naive),
            "sure_score" => Ok(TrainMode::SureScore),
            _ => Err(Error::invalid(format!(
                "unknown mode `{s}` (expected supervised, naive or sure_score)"
            ))),
        }
    }
}

/// The only place where a mode decides which samples it sees.
pub fn training_inputs(dataset: &NoisyDataset, mode: TrainMode) -> Result<Tensor> {
    match mode {
        TrainMode::Supervised => dataset.clean_train(),
        TrainMode::Naive | TrainMode::SureScore => Ok(dataset.noisy_train()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every`
    /// epochs; 0 disables decay.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_every: 0,
            decay_factor: 0.5,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam needs lr > 0 and betas in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::invalid("adam eps and decay_factor must be positive"));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_every {
            0 => self.lr,
            k => self.lr * self.decay_factor.powi((epoch / k) as i32),
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.cfg.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Fixed SURE-Score weight; `None` balances the terms on the first batch.
    pub lambda: Option<f64>,
    pub adam: AdamConfig,
    /// Decay of an exponential moving average of the parameters; when set,
    /// the averaged weights are written back at the end.
    pub ema: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::SureScore,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            loss: LossConfig::default(),
            lambda: None,
            adam: AdamConfig::default(),
            ema: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub mode: TrainMode,
    pub mean_loss: f64,
    pub lambda: f64,
    pub sigma_w: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_loss).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(TrainingLog { rows })
    }
}

/// Train `net` in place on the rows of `inputs` (already selected with
/// [`training_inputs`]). In SURE-Score mode `cfg.loss.sigma_w` is the
/// per-coordinate noise level of the inputs; a zero level means the inputs
/// are clean and plain DSM is used.
pub fn train(
    net: &mut ScoreNetwork,
    inputs: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    schedule.validate()?;
    cfg.adam.validate()?;
    if inputs.shape().len() != 2 || inputs.rows() == 0 {
        return Err(Error::invalid("training set must be a nonempty B x N matrix"));
    }
    if inputs.cols() != net.input_dim() {
        return Err(Error::Dimension {
            expected: net.input_dim(),
            found: inputs.cols(),
        });
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be positive"));
    }
    let sure = cfg.mode == TrainMode::SureScore && cfg.loss.sigma_w > 0.0;
    if sure {
        cfg.loss.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    let mut adam = Adam::new(cfg.adam.clone(), &net.params());
    let mut loss_cfg = cfg.loss.clone();
    let mut lambda_set = !sure || cfg.lambda.is_some();
    if let Some(l) = cfg.lambda {
        loss_cfg.lambda = l;
    }
    if let Some(d) = cfg.ema {
        if !(0.0..1.0).contains(&d) {
            return Err(Error::invalid(format!("ema decay must be in [0, 1), got {d}")));
        }
    }
    let mut ema: Option<Vec<Tensor>> = cfg.ema.map(|_| net.params().into_iter().cloned().collect());
    let mut log = TrainingLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.adam.lr_at(epoch);
        let (mut total, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch = inputs.select_rows(idx);
            let draw = BatchDraw::sample(schedule, idx.len(), inputs.cols(), &mut rng);
            if !lambda_set {
                loss_cfg.lambda = lambda_init(net, &batch, &draw, &loss_cfg)?;
                log::info!("SURE-Score lambda fixed at {}", loss_cfg.lambda);
                lambda_set = true;
            }
            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let x = tape.constant(batch);
            let loss = if sure {
                sure_score_loss(&bound, x, &draw, &loss_cfg)?.total
            } else {
                dsm_loss(&bound, x, &draw.sigmas, &draw.z)?
            };
            let value = loss.item();
            if !value.is_finite() {
                let lo = draw.sigmas.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = draw.sigmas.iter().copied().fold(0.0, f64::max);
                return Err(Error::NonFinite(format!(
                    "training loss at step {step} (epoch {epoch}, sigma drawn in [{lo}, {hi}])"
                )));
            }
            let grads = bound.gradients(&tape.backward(loss)?);
            adam.step(net.params_mut(), &grads, lr);
            if let (Some(avg), Some(d)) = (ema.as_mut(), cfg.ema) {
                for (a, p) in avg.iter_mut().zip(net.params()) {
                    a.data_mut()
                        .iter_mut()
                        .zip(p.data())
                        .for_each(|(a, &p)| *a = d * *a + (1.0 - d) * p);
                }
            }
            total += value * idx.len() as f64;
            count += idx.len();
            step += 1;
        }
        let row = LogRow {
            epoch,
            step,
            mode: cfg.mode,
            mean_loss: total / count as f64,
            lambda: if sure { loss_cfg.lambda } else { 0.0 },
            sigma_w: cfg.loss.sigma_w,
            seed: cfg.seed,
        };
        log::debug!("epoch {epoch}: loss {}", row.mean_loss);
        log.rows.push(row);
    }
    if let Some(avg) = ema {
        for (p, a) in net.params_mut().into_iter().zip(avg) {
            *p = a;
        }
    }
    Ok(log)
}
