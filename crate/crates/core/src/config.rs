//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key has a default,
//! unknown or repeated keys are errors, and [`ExperimentConfig::to_text`]
//! followed by [`ExperimentConfig::parse`] reproduces the config exactly.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::data::SyntheticPrior;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::Conditioning;
use crate::sampler::SamplerConfig;
use crate::schedule::NoiseSchedule;
use crate::train::{AdamConfig, TrainConfig, TrainMode};

/// Ordered raw key/value pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                reason: format!("line {} is not `key = value`", i + 1),
            })?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config {
                    key,
                    reason: "given more than once".into(),
                });
            }
        }
        Ok(KeyValues(map))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => parse_value(key, &v),
        }
    }

    /// Optional value where `word` (e.g. `auto`) means `None`.
    fn get_opt<T: FromStr>(&mut self, key: &str, word: &str, default: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) if v == word => Ok(None),
            Some(v) => parse_value(key, &v).map(Some),
        }
    }

    fn get_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => parse_list(key, &v, ','),
        }
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| Error::Config {
            key: key.to_string(),
            reason: "missing".into(),
        })
    }

    fn finish(self) -> Result<()> {
        match self.0.into_keys().next() {
            None => Ok(()),
            Some(key) => Err(Error::Config {
                key,
                reason: "unknown key".into(),
            }),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e: T::Err| Error::Config {
        key: key.to_string(),
        reason: format!("cannot parse `{v}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, v: &str, sep: char) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(sep).map(|p| parse_value(key, p.trim())).collect()
}

fn parse_matrix(key: &str, v: &str) -> Result<Vec<Vec<f64>>> {
    v.split(';').map(|row| parse_list(key, row, ',')).collect()
}

fn join<T: Display>(v: &[T], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn matrix_text(m: &[Vec<f64>]) -> String {
    m.iter().map(|r| join(r, ",")).collect::<Vec<_>>().join(";")
}

fn opt_text<T: Display>(v: &Option<T>, word: &str) -> String {
    v.as_ref().map_or(word.to_string(), |x| x.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    None,
    Pilots,
    Mri,
}

impl FromStr for OperatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(OperatorKind::None),
            "pilots" => Ok(OperatorKind::Pilots),
            "mri" => Ok(OperatorKind::Mri),
            _ => Err("expected none, pilots or mri".into()),
        }
    }
}

impl Display for OperatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OperatorKind::None => "none",
            OperatorKind::Pilots => "pilots",
            OperatorKind::Mri => "mri",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSettings {
    pub kind: OperatorKind,
    /// Pilot density `N_p / N_t`.
    pub alpha: f64,
    /// Pilot SNR sweep in dB; the measurement noise is `10^(-snr/20)`.
    pub pilot_snr_db: Vec<f64>,
    pub accel: f64,
    pub center_fraction: f64,
    pub coils: usize,
    /// Measurement noise for imaging operators.
    pub sigma_n: f64,
}

impl Default for OperatorSettings {
    fn default() -> Self {
        OperatorSettings {
            kind: OperatorKind::None,
            alpha: 0.6,
            pilot_snr_db: vec![-10.0, 0.0, 10.0, 20.0, 30.0],
            accel: 4.0,
            center_fraction: 0.08,
            coils: 4,
            sigma_n: 0.01,
        }
    }
}

/// Named seeds, all derived from the top-level `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub net: u64,
    pub train: u64,
    pub operator: u64,
    pub sampler: u64,
    pub measurement: u64,
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        Seeds {
            data: seed,
            net: seed.wrapping_add(1),
            train: seed.wrapping_add(2),
            operator: seed.wrapping_add(3),
            sampler: seed.wrapping_add(4),
            measurement: seed.wrapping_add(5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub prior: SyntheticPrior,
    /// Load this dataset file instead of generating one.
    pub dataset: Option<PathBuf>,
    pub samples: usize,
    pub snr_w_db: f64,
    /// Hidden widths; the output layer is added to match the data dimension.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub conditioning: Conditioning,
    /// `None` takes the largest pairwise distance in the noisy training data.
    pub sigma_max: Option<f64>,
    pub sigma_min: f64,
    pub levels: usize,
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub ema: Option<f64>,
    pub lambda: Option<f64>,
    pub epsilon: f64,
    pub detach_denoiser: bool,
    /// Train on at most this many samples of the training split.
    pub max_train_samples: Option<usize>,
    pub alpha0: f64,
    pub beta: f64,
    pub steps_per_level: usize,
    pub noise_free_levels: usize,
    pub final_denoise: bool,
    pub average: usize,
    pub prior_samples: usize,
    pub operator: OperatorSettings,
    /// Number of held-out samples to reconstruct (`None`: all).
    pub eval_count: Option<usize>,
    pub eval_modes: Vec<TrainMode>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("out"),
            prior: SyntheticPrior::toy_channel(4, 8),
            dataset: None,
            samples: 10000,
            snr_w_db: 0.0,
            widths: vec![128, 128],
            activation: Activation::Softplus,
            conditioning: Conditioning::OutputScale,
            sigma_max: None,
            sigma_min: 0.01,
            levels: 30,
            mode: TrainMode::SureScore,
            epochs: 100,
            batch_size: 64,
            lr: 1e-4,
            decay_every: 0,
            decay_factor: 0.5,
            ema: None,
            lambda: None,
            epsilon: 1e-3,
            detach_denoiser: false,
            max_train_samples: None,
            alpha0: 1e-5,
            beta: 1.0,
            steps_per_level: 3,
            noise_free_levels: 0,
            final_denoise: true,
            average: 1,
            prior_samples: 16,
            operator: OperatorSettings::default(),
            eval_count: None,
            eval_modes: TrainMode::ALL.to_vec(),
        }
    }
}

fn prior_from_kv(kv: &mut KeyValues) -> Result<Option<SyntheticPrior>> {
    let Some(kind) = kv.take("prior.kind") else {
        return Ok(None);
    };
    let prior = match kind.as_str() {
        "gaussian" => SyntheticPrior::Gaussian {
            mean: parse_list("prior.mean", &kv.require("prior.mean")?, ',')?,
            cov: parse_matrix("prior.cov", &kv.require("prior.cov")?)?,
        },
        "gmm" => SyntheticPrior::Gmm {
            weights: parse_list("prior.weights", &kv.require("prior.weights")?, ',')?,
            means: parse_matrix("prior.means", &kv.require("prior.means")?)?,
            covs: kv
                .require("prior.covs")?
                .split('|')
                .map(|m| parse_matrix("prior.covs", m))
                .collect::<Result<_>>()?,
        },
        "toy_channel" => SyntheticPrior::ToyChannel {
            nr: parse_value("prior.nr", &kv.require("prior.nr")?)?,
            nt: parse_value("prior.nt", &kv.require("prior.nt")?)?,
            paths: kv.get("prior.paths", 3)?,
            angle_spread: kv.get_opt("prior.angle_spread", "none", Some(0.1))?,
            cluster_seed: kv.get("prior.cluster_seed", 123)?,
        },
        "toy_image" => SyntheticPrior::ToyImage {
            height: parse_value("prior.height", &kv.require("prior.height")?)?,
            width: parse_value("prior.width", &kv.require("prior.width")?)?,
            smoothness: kv.get("prior.smoothness", 2.0)?,
        },
        other => {
            return Err(Error::Config {
                key: "prior.kind".into(),
                reason: format!("unknown prior `{other}`"),
            })
        }
    };
    prior.validate().map_err(|e| Error::Config {
        key: "prior.kind".into(),
        reason: e.to_string(),
    })?;
    Ok(Some(prior))
}

fn prior_lines(prior: &SyntheticPrior) -> Vec<(&'static str, String)> {
    match prior {
        SyntheticPrior::Gaussian { mean, cov } => vec![
            ("prior.kind", "gaussian".into()),
            ("prior.mean", join(mean, ",")),
            ("prior.cov", matrix_text(cov)),
        ],
        SyntheticPrior::Gmm { weights, means, covs } => vec![
            ("prior.kind", "gmm".into()),
            ("prior.weights", join(weights, ",")),
            ("prior.means", matrix_text(means)),
            (
                "prior.covs",
                covs.iter().map(|c| matrix_text(c)).collect::<Vec<_>>().join("|"),
            ),
        ],
        SyntheticPrior::ToyChannel {
            nr,
            nt,
            paths,
            angle_spread,
            cluster_seed,
        } => vec![
            ("prior.kind", "toy_channel".into()),
            ("prior.nr", nr.to_string()),
            ("prior.nt", nt.to_string()),
            ("prior.paths", paths.to_string()),
            ("prior.angle_spread", opt_text(angle_spread, "none")),
            ("prior.cluster_seed", cluster_seed.to_string()),
        ],
        SyntheticPrior::ToyImage {
            height,
            width,
            smoothness,
        } => vec![
            ("prior.kind", "toy_image".into()),
            ("prior.height", height.to_string()),
            ("prior.width", width.to_string()),
            ("prior.smoothness", smoothness.to_string()),
        ],
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = ExperimentConfig::default();
        let od = OperatorSettings::default();
        let cfg = ExperimentConfig {
            seed: kv.get("seed", d.seed)?,
            out: kv.get("out", d.out)?,
            prior: prior_from_kv(&mut kv)?.unwrap_or(d.prior),
            dataset: kv.get_opt("data.path", "none", d.dataset)?,
            samples: kv.get("data.samples", d.samples)?,
            snr_w_db: kv.get("data.snr_w_db", d.snr_w_db)?,
            widths: kv.get_list("net.widths", d.widths)?,
            activation: kv.get("net.activation", d.activation)?,
            conditioning: kv.get("net.conditioning", d.conditioning)?,
            sigma_max: kv.get_opt("schedule.sigma_max", "auto", d.sigma_max)?,
            sigma_min: kv.get("schedule.sigma_min", d.sigma_min)?,
            levels: kv.get("schedule.levels", d.levels)?,
            mode: kv.get("train.mode", d.mode)?,
            epochs: kv.get("train.epochs", d.epochs)?,
            batch_size: kv.get("train.batch_size", d.batch_size)?,
            lr: kv.get("train.lr", d.lr)?,
            decay_every: kv.get("train.decay_every", d.decay_every)?,
            decay_factor: kv.get("train.decay_factor", d.decay_factor)?,
            ema: kv.get_opt("train.ema", "none", d.ema)?,
            lambda: kv.get_opt("train.lambda", "auto", d.lambda)?,
            epsilon: kv.get("train.epsilon", d.epsilon)?,
            detach_denoiser: kv.get("train.detach_denoiser", d.detach_denoiser)?,
            max_train_samples: kv.get_opt("train.max_samples", "all", d.max_train_samples)?,
            alpha0: kv.get("sampler.alpha0", d.alpha0)?,
            beta: kv.get("sampler.beta", d.beta)?,
            steps_per_level: kv.get("sampler.steps_per_level", d.steps_per_level)?,
            noise_free_levels: kv.get("sampler.noise_free_levels", d.noise_free_levels)?,
            final_denoise: kv.get("sampler.final_denoise", d.final_denoise)?,
            average: kv.get("sampler.average", d.average)?,
            prior_samples: kv.get("sampler.count", d.prior_samples)?,
            operator: OperatorSettings {
                kind: kv.get("op.kind", od.kind)?,
                alpha: kv.get("op.alpha", od.alpha)?,
                pilot_snr_db: kv.get_list("op.pilot_snr_db", od.pilot_snr_db)?,
                accel: kv.get("op.accel", od.accel)?,
                center_fraction: kv.get("op.center_fraction", od.center_fraction)?,
                coils: kv.get("op.coils", od.coils)?,
                sigma_n: kv.get("op.sigma_n", od.sigma_n)?,
            },
            eval_count: kv.get_opt("eval.count", "all", d.eval_count)?,
            eval_modes: kv.get_list("eval.modes", d.eval_modes)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key = value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut kv = KeyValues::parse(&self.to_text())?;
        for (k, v) in overrides {
            kv.set(k, v);
        }
        Self::from_kv(kv)
    }

    pub fn to_text(&self) -> String {
        let o = &self.operator;
        let mut lines: Vec<(&str, String)> =
            vec![("seed", self.seed.to_string()), ("out", self.out.display().to_string())];
        lines.extend(prior_lines(&self.prior));
        lines.extend([
            (
                "data.path",
                self.dataset.as_ref().map_or("none".into(), |p| p.display().to_string()),
            ),
            ("data.samples", self.samples.to_string()),
            ("data.snr_w_db", self.snr_w_db.to_string()),
            ("net.widths", join(&self.widths, ",")),
            ("net.activation", self.activation.to_string()),
            ("net.conditioning", self.conditioning.to_string()),
            ("schedule.sigma_max", opt_text(&self.sigma_max, "auto")),
            ("schedule.sigma_min", self.sigma_min.to_string()),
            ("schedule.levels", self.levels.to_string()),
            ("train.mode", self.mode.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.decay_every", self.decay_every.to_string()),
            ("train.decay_factor", self.decay_factor.to_string()),
            ("train.ema", opt_text(&self.ema, "none")),
            ("train.lambda", opt_text(&self.lambda, "auto")),
            ("train.epsilon", self.epsilon.to_string()),
            ("train.detach_denoiser", self.detach_denoiser.to_string()),
            ("train.max_samples", opt_text(&self.max_train_samples, "all")),
            ("sampler.alpha0", self.alpha0.to_string()),
            ("sampler.beta", self.beta.to_string()),
            ("sampler.steps_per_level", self.steps_per_level.to_string()),
            ("sampler.noise_free_levels", self.noise_free_levels.to_string()),
            ("sampler.final_denoise", self.final_denoise.to_string()),
            ("sampler.average", self.average.to_string()),
            ("sampler.count", self.prior_samples.to_string()),
            ("op.kind", o.kind.to_string()),
            ("op.alpha", o.alpha.to_string()),
            ("op.pilot_snr_db", join(&o.pilot_snr_db, ",")),
            ("op.accel", o.accel.to_string()),
            ("op.center_fraction", o.center_fraction.to_string()),
            ("op.coils", o.coils.to_string()),
            ("op.sigma_n", o.sigma_n.to_string()),
            ("eval.count", opt_text(&self.eval_count, "all")),
            ("eval.modes", join(&self.eval_modes, ",")),
        ]);
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.samples < 10 {
            return bad("data.samples", "need at least 10 samples for a train/test split");
        }
        if self.snr_w_db.is_nan() {
            return bad("data.snr_w_db", "must be a number or inf");
        }
        if self.widths.contains(&0) {
            return bad("net.widths", "widths must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs", "epochs and batch size must be positive");
        }
        if self.eval_modes.is_empty() {
            return bad("eval.modes", "at least one mode");
        }
        if !(self.operator.alpha > 0.0) {
            return bad("op.alpha", "must be positive");
        }
        if !(self.operator.accel >= 1.0) {
            return bad("op.accel", "must be at least 1");
        }
        self.loss_config(1.0).validate().map_err(|e| Error::Config {
            key: "train.epsilon".into(),
            reason: e.to_string(),
        })?;
        if self.steps_per_level == 0 || self.average == 0 || self.noise_free_levels > self.levels {
            return bad(
                "sampler.steps_per_level",
                "steps and average must be positive and noise-free levels at most the level count",
            );
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    pub fn schedule(&self, sigma_max: f64) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.sigma_min, sigma_max, self.levels, self.alpha0, self.beta)
    }

    pub fn loss_config(&self, sigma_w: f64) -> LossConfig {
        LossConfig {
            lambda: self.lambda.unwrap_or(1.0),
            epsilon: self.epsilon,
            sigma_w,
            detach_denoiser_in_dsm: self.detach_denoiser,
        }
    }

    pub fn train_config(&self, mode: TrainMode, sigma_w: f64) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seeds().train,
            loss: self.loss_config(sigma_w),
            lambda: self.lambda,
            adam: AdamConfig {
                lr: self.lr,
                decay_every: self.decay_every,
                decay_factor: self.decay_factor,
                ..AdamConfig::default()
            },
            ema: self.ema,
        }
    }

    pub fn sampler_config(&self, schedule: NoiseSchedule) -> SamplerConfig {
        SamplerConfig {
            schedule,
            steps_per_level: self.steps_per_level,
            seed: self.seeds().sampler,
            final_denoise: self.final_denoise,
            noise_free_levels: self.noise_free_levels,
            average: self.average,
        }
    }
}
