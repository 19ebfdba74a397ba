//! Experiment orchestration: data generation, training per mode, denoising
//! and reconstruction evaluation, and the files each step writes.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::{ExperimentConfig, OperatorKind, Seeds};
use crate::data::{corrupt, NoisyDataset, SyntheticPrior};
use crate::error::{Error, Result};
use crate::metrics::{nmse_db, nrmse, MetricRow};
use crate::network::{tweedie_denoise, Cursor, ScoreModel, ScoreNetwork};
use crate::operators::{
    complex_to_signal, measure, pilots_for_alpha, LinearOperator, MultiCoilOperator, OperatorDescription, PilotOperator,
};
use crate::sampler::{posterior_sample, prior_sample};
use crate::schedule::{max_pairwise_distance, NoiseSchedule};
use crate::train::{train, training_inputs, TrainMode, TrainingLog};

/// Rows used to estimate `sigma_max` from data.
const PAIRWISE_LIMIT: usize = 1000;

pub fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.ssds")
}

pub fn weights_path(out: &Path, mode: TrainMode) -> PathBuf {
    out.join(format!("weights_{mode}.sscr"))
}

pub fn train_log_path(out: &Path, mode: TrainMode) -> PathBuf {
    out.join(format!("train_{mode}.csv"))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generate the configured dataset, or load `data.path` when set.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<NoisyDataset> {
    match &cfg.dataset {
        Some(path) => NoisyDataset::load(path),
        None => generate_data(cfg),
    }
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<NoisyDataset> {
    let seeds = cfg.seeds();
    let clean = cfg.prior.sample(cfg.samples, seeds.data)?;
    corrupt(&cfg.prior, &clean, cfg.snr_w_db, seeds.data)
}

/// The configured `sigma_max`, or the largest pairwise distance among the
/// noisy training rows (shared by every mode).
pub fn resolve_sigma_max(cfg: &ExperimentConfig, ds: &NoisyDataset) -> Result<f64> {
    if let Some(s) = cfg.sigma_max {
        return Ok(s);
    }
    let x = ds.noisy_train();
    let rows: Vec<&[f64]> = (0..x.rows()).map(|i| x.row(i)).collect();
    let d = max_pairwise_distance(&rows, PAIRWISE_LIMIT);
    if d > cfg.sigma_min {
        Ok(d)
    } else {
        Err(Error::Config {
            key: "schedule.sigma_max".into(),
            reason: format!("data spread {d} is below sigma_min; set sigma_max explicitly"),
        })
    }
}

pub fn schedule_for(cfg: &ExperimentConfig, ds: &NoisyDataset) -> Result<NoiseSchedule> {
    cfg.schedule(resolve_sigma_max(cfg, ds)?)
}

pub fn new_network(cfg: &ExperimentConfig, dim: usize) -> Result<ScoreNetwork> {
    let mut widths = cfg.widths.clone();
    widths.push(dim);
    ScoreNetwork::with_options(dim, &widths, cfg.activation, cfg.conditioning, cfg.seeds().net)
}

/// Train a fresh network in `mode`.
pub fn train_mode(cfg: &ExperimentConfig, ds: &NoisyDataset, mode: TrainMode) -> Result<(ScoreNetwork, TrainingLog)> {
    let mut inputs = training_inputs(ds, mode)?;
    if let Some(max) = cfg.max_train_samples {
        if max < inputs.rows() {
            inputs = inputs.select_rows(&(0..max).collect::<Vec<_>>());
        }
    }
    let schedule = schedule_for(cfg, ds)?;
    let mut net = new_network(cfg, ds.dim())?;
    let log = train(
        &mut net,
        &inputs,
        &schedule,
        &cfg.train_config(mode, ds.coordinate_sigma()),
    )?;
    Ok((net, log))
}

pub fn load_model(cfg: &ExperimentConfig, mode: TrainMode) -> Result<ScoreNetwork> {
    let path = weights_path(&cfg.out, mode);
    if !path.exists() {
        return Err(Error::invalid(format!(
            "no weights for mode {mode} at {}",
            path.display()
        )));
    }
    let mut net = ScoreNetwork::from_weights_file(&path)?;
    net.set_activation(cfg.activation);
    Ok(net)
}

/// Denoised held-out samples, `x + sigma_w^2 s(x; sigma_w)`; identity when
/// the data are clean.
pub fn denoise(model: &dyn ScoreModel, ds: &NoisyDataset) -> Result<Tensor> {
    let x = ds.noisy_test();
    let sigma = ds.coordinate_sigma();
    if sigma > 0.0 {
        tweedie_denoise(model, &x, sigma)
    } else {
        Ok(x)
    }
}

fn per_row(est: &Tensor, truth: &Tensor, f: fn(&[f64], &[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    (0..truth.rows()).map(|r| f(est.row(r), truth.row(r))).collect()
}

/// NRMSE of Tweedie denoising per mode on the test split, plus the noisy
/// input itself as a reference row (`mode = noisy`).
pub fn denoising_eval(
    cfg: &ExperimentConfig,
    ds: &NoisyDataset,
    models: &[(TrainMode, &dyn ScoreModel)],
) -> Result<Vec<MetricRow>> {
    let clean = ds.clean_test()?;
    let seed = cfg.seed;
    let mut rows = vec![MetricRow::summarize(
        "noisy",
        cfg.snr_w_db,
        None,
        "nrmse",
        &per_row(&ds.noisy_test(), &clean, nrmse)?,
        seed,
    )];
    for &(mode, model) in models {
        let est = denoise(model, ds)?;
        rows.push(MetricRow::summarize(
            mode.as_str(),
            cfg.snr_w_db,
            None,
            "nrmse",
            &per_row(&est, &clean, nrmse)?,
            seed,
        ));
    }
    Ok(rows)
}

/// Operators of the reconstruction sweep with their sweep value (pilot SNR
/// in dB for channels, acceleration for images).
pub fn build_operators(cfg: &ExperimentConfig) -> Result<Vec<(f64, Box<dyn LinearOperator>)>> {
    let o = &cfg.operator;
    let seed = cfg.seeds().operator;
    match (&o.kind, &cfg.prior) {
        (OperatorKind::Pilots, SyntheticPrior::ToyChannel { nr, nt, .. }) => {
            let np = pilots_for_alpha(*nt, o.alpha);
            let base = PilotOperator::random(*nr, *nt, np, 0.0, seed)?;
            Ok(o.pilot_snr_db
                .iter()
                .map(|&snr| {
                    let op: Box<dyn LinearOperator> = Box::new(base.with_sigma_n(10f64.powf(-snr / 20.0)));
                    (snr, op)
                })
                .collect())
        }
        (OperatorKind::Mri, SyntheticPrior::ToyImage { height, width, .. }) => {
            let op =
                MultiCoilOperator::synthetic(*height, *width, o.coils, o.accel, o.center_fraction, o.sigma_n, seed)?;
            Ok(vec![(o.accel, Box::new(op))])
        }
        (OperatorKind::None, _) => Err(Error::Config {
            key: "op.kind".into(),
            reason: "reconstruction needs op.kind = pilots or mri".into(),
        }),
        (kind, prior) => Err(Error::Config {
            key: "op.kind".into(),
            reason: format!("operator {kind} does not apply to a {} prior", prior.kind_name()),
        }),
    }
}

/// Noisy measurements of each row of `x`; row `i` uses its own stream so
/// every mode and sweep point sees the same noise draw.
pub fn measurements(op: &dyn LinearOperator, x: &Tensor, seed: u64) -> Result<Vec<Vec<Complex64>>> {
    (0..x.rows())
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            measure(op, x.row(i), &mut rng)
        })
        .collect()
}

/// Linear baseline for each measurement (see [`LinearOperator::linear_estimate`]).
pub fn linear_estimates(op: &dyn LinearOperator, ys: &[Vec<Complex64>]) -> Result<Tensor> {
    let rows = ys
        .iter()
        .map(|y| Ok(complex_to_signal(op, &op.linear_estimate(y)?)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Estimates of one reconstruction run.
pub struct Reconstruction {
    pub mode: String,
    pub sweep: f64,
    pub operator: OperatorDescription,
    pub estimates: Tensor,
}

/// Posterior-sampling reconstruction of the held-out samples for each mode
/// and sweep point, plus the linear baseline (`mode = linear`).
pub fn reconstruction_eval(
    cfg: &ExperimentConfig,
    ds: &NoisyDataset,
    models: &[(TrainMode, &dyn ScoreModel)],
) -> Result<(Vec<MetricRow>, Vec<Reconstruction>)> {
    let mut truth = ds.clean_test()?;
    if let Some(n) = cfg.eval_count {
        if n < truth.rows() {
            truth = truth.select_rows(&(0..n).collect::<Vec<_>>());
        }
    }
    let sampler = cfg.sampler_config(schedule_for(cfg, ds)?);
    let seeds = cfg.seeds();
    let mut rows = Vec::new();
    let mut recon = Vec::new();
    for (sweep, op) in build_operators(cfg)? {
        let ys = measurements(op.as_ref(), &truth, seeds.measurement)?;
        let mut runs: Vec<(String, Tensor)> = vec![("linear".into(), linear_estimates(op.as_ref(), &ys)?)];
        for &(mode, model) in models {
            log::info!("reconstructing with {mode} at sweep value {sweep}");
            runs.push((mode.to_string(), posterior_sample(model, op.as_ref(), &ys, &sampler)?));
        }
        for (mode, est) in runs {
            for (metric, f) in [
                ("nmse_db", nmse_db as fn(&[f64], &[f64]) -> Result<f64>),
                ("nrmse", nrmse),
            ] {
                rows.push(MetricRow::summarize(
                    &mode,
                    cfg.snr_w_db,
                    Some(sweep),
                    metric,
                    &per_row(&est, &truth, f)?,
                    cfg.seed,
                ));
            }
            recon.push(Reconstruction {
                mode,
                sweep,
                operator: op.describe(),
                estimates: est,
            });
        }
    }
    Ok((rows, recon))
}

pub fn sample_from_prior(cfg: &ExperimentConfig, ds: &NoisyDataset, model: &dyn ScoreModel) -> Result<Tensor> {
    prior_sample(model, &cfg.sampler_config(schedule_for(cfg, ds)?), cfg.prior_samples)
}

const TENSOR_MAGIC: &[u8; 4] = b"SSTN";
const TENSOR_VERSION: u32 = 1;

/// Binary tensor file: magic `SSTN`, version u32, rank u32, each dimension
/// as u64, then the values as f64, all little-endian.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse = || -> std::result::Result<Tensor, String> {
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != TENSOR_MAGIC {
            return Err("bad magic (expected SSTN)".into());
        }
        let version = cur.u32()?;
        if version != TENSOR_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(format!("invalid rank {rank}"));
        }
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("size overflows")?;
        let data = cur.f64s(len)?;
        if cur.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Tensor::new(shape, data).map_err(|e| e.to_string())
    };
    parse().map_err(|reason| Error::format(path, reason))
}

/// JSON sidecar written next to a tensor file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub mode: String,
    pub seed: u64,
    pub shape: Vec<usize>,
    pub complex: bool,
    pub schedule: Option<NoiseSchedule>,
    pub steps_per_level: Option<usize>,
    pub operator: Option<OperatorDescription>,
    pub metrics: Vec<MetricRow>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Write `t` to `path` and its sidecar to `path.json`.
pub fn write_tensor_with_sidecar(path: &Path, t: &Tensor, sidecar: &TensorSidecar) -> Result<()> {
    write_tensor(path, t)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    write_json(Path::new(&side), sidecar)
}

/// Everything needed to rerun a command: the full config text, the derived
/// seeds and the files produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: String,
    pub seeds: Seeds,
    pub sigma_w: Option<f64>,
    pub sigma_max: Option<f64>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.to_text(),
            seeds: cfg.seeds(),
            sigma_w: None,
            sigma_max: None,
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(format!("manifest_{}.json", self.command));
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
