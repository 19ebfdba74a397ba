use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sscore::config::{ExperimentConfig, OperatorKind};
use sscore::experiment::{self as exp, Manifest, TensorSidecar};
use sscore::metrics::{write_metrics_csv, MetricRow};
use sscore::network::{Conditioning, ScoreModel, ScoreNetwork};
use sscore::train::TrainMode;

#[derive(Parser)]
#[command(
    name = "sscore",
    version,
    about = "Score models from noisy data, and posterior sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Training mode: supervised, naive or sure_score
    #[arg(long, global = true, value_name = "MODE")]
    mode: Option<TrainMode>,
    /// Training-data SNR in dB (`inf` for clean data)
    #[arg(long = "snr-w", global = true, value_name = "DB", allow_negative_numbers = true)]
    snr_w: Option<f64>,
    /// Pilot density N_p / N_t
    #[arg(long, global = true, value_name = "FLOAT")]
    alpha: Option<f64>,
    /// Imaging acceleration factor
    #[arg(long, global = true, value_name = "FLOAT")]
    accel: Option<f64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Sample a synthetic dataset and corrupt it at the configured SNR
    GenerateData,
    /// Train a score network in the selected mode
    Train,
    /// Tweedie-denoise the held-out split with each trained model
    Denoise,
    /// Draw unconditional samples by annealed Langevin dynamics
    SamplePrior,
    /// Posterior-sampling reconstruction over the operator sweep
    Reconstruct,
    /// Denoising and reconstruction metrics for every trained mode
    Eval,
    /// Compare loss gradients with finite differences
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenerateData => "generate-data",
            Command::Train => "train",
            Command::Denoise => "denoise",
            Command::SamplePrior => "sample-prior",
            Command::Reconstruct => "reconstruct",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
        }
    }
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn load_config(c: &Common) -> AnyResult<ExperimentConfig> {
    let base = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut o: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: String| o.push((k.to_string(), v));
    if let Some(s) = c.seed {
        push("seed", s.to_string());
    }
    if let Some(m) = c.mode {
        push("train.mode", m.to_string());
        push("eval.modes", m.to_string());
    }
    if let Some(s) = c.snr_w {
        push("data.snr_w_db", s.to_string());
    }
    if let Some(a) = c.alpha {
        push("op.alpha", a.to_string());
    }
    if let Some(a) = c.accel {
        push("op.accel", a.to_string());
    }
    if let Some(d) = &c.out {
        push("out", d.display().to_string());
    }
    Ok(base.with_overrides(&o)?)
}

fn configure_threads() -> AnyResult<()> {
    if let Ok(v) = std::env::var("SSCORE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("SSCORE_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn models(cfg: &ExperimentConfig) -> AnyResult<Vec<(TrainMode, ScoreNetwork)>> {
    cfg.eval_modes
        .iter()
        .map(|&m| Ok((m, exp::load_model(cfg, m)?)))
        .collect()
}

fn as_models(nets: &[(TrainMode, ScoreNetwork)]) -> Vec<(TrainMode, &dyn ScoreModel)> {
    nets.iter().map(|(m, n)| (*m, n as &dyn ScoreModel)).collect()
}

fn tensor_name(out: &Path, stem: &str) -> PathBuf {
    out.join(format!("{stem}.sstn"))
}

fn run(cmd: Command, cfg: &ExperimentConfig) -> AnyResult<()> {
    let out = &cfg.out;
    exp::ensure_dir(out)?;
    let mut manifest = Manifest::new(cmd.name(), cfg);
    match cmd {
        Command::GenerateData => {
            let ds = exp::generate_data(cfg)?;
            let path = exp::dataset_path(out);
            ds.save(&path)?;
            manifest.sigma_w = Some(ds.sigma_w);
            manifest.output(&path);
            println!("wrote {} samples to {}", ds.len(), path.display());
        }
        Command::Train => {
            let ds = exp::load_or_generate(cfg)?;
            manifest.sigma_w = Some(ds.sigma_w);
            manifest.sigma_max = Some(exp::resolve_sigma_max(cfg, &ds)?);
            let (net, log) = exp::train_mode(cfg, &ds, cfg.mode)?;
            let weights = exp::weights_path(out, cfg.mode);
            let log_path = exp::train_log_path(out, cfg.mode);
            net.save_weights(&weights)?;
            log.write_csv(&log_path)?;
            manifest.output(&weights);
            manifest.output(&log_path);
            let last = log.rows.last().map_or(f64::NAN, |r| r.mean_loss);
            println!("trained {} for {} epochs, final loss {last}", cfg.mode, cfg.epochs);
        }
        Command::Denoise => {
            let ds = exp::load_or_generate(cfg)?;
            manifest.sigma_w = Some(ds.sigma_w);
            let nets = models(cfg)?;
            let rows = exp::denoising_eval(cfg, &ds, &as_models(&nets))?;
            for (mode, net) in &nets {
                let est = exp::denoise(net, &ds)?;
                let path = tensor_name(out, &format!("denoised_{mode}"));
                let sidecar = TensorSidecar {
                    mode: mode.to_string(),
                    seed: cfg.seed,
                    shape: est.shape().to_vec(),
                    complex: ds.complex,
                    schedule: None,
                    steps_per_level: None,
                    operator: None,
                    metrics: rows.iter().filter(|r| r.mode == mode.as_str()).cloned().collect(),
                };
                exp::write_tensor_with_sidecar(&path, &est, &sidecar)?;
                manifest.output(&path);
            }
            finish_metrics(out, "denoise_metrics.csv", &rows, &mut manifest)?;
        }
        Command::SamplePrior => {
            let ds = exp::load_or_generate(cfg)?;
            let net = exp::load_model(cfg, cfg.mode)?;
            let schedule = exp::schedule_for(cfg, &ds)?;
            manifest.sigma_max = Some(schedule.sigma_max);
            let samples = exp::sample_from_prior(cfg, &ds, &net)?;
            let path = tensor_name(out, &format!("prior_samples_{}", cfg.mode));
            let sidecar = TensorSidecar {
                mode: cfg.mode.to_string(),
                seed: cfg.seeds().sampler,
                shape: samples.shape().to_vec(),
                complex: ds.complex,
                schedule: Some(schedule),
                steps_per_level: Some(cfg.steps_per_level),
                operator: None,
                metrics: Vec::new(),
            };
            exp::write_tensor_with_sidecar(&path, &samples, &sidecar)?;
            manifest.output(&path);
            println!("wrote {} samples to {}", cfg.prior_samples, path.display());
        }
        Command::Reconstruct | Command::Eval => {
            let ds = exp::load_or_generate(cfg)?;
            manifest.sigma_w = Some(ds.sigma_w);
            let nets = models(cfg)?;
            let m = as_models(&nets);
            let mut rows = Vec::new();
            if cmd == Command::Eval {
                rows.extend(exp::denoising_eval(cfg, &ds, &m)?);
            }
            if cmd == Command::Reconstruct || cfg.operator.kind != OperatorKind::None {
                let schedule = exp::schedule_for(cfg, &ds)?;
                manifest.sigma_max = Some(schedule.sigma_max);
                let (recon_rows, recon) = exp::reconstruction_eval(cfg, &ds, &m)?;
                if cmd == Command::Reconstruct {
                    for r in &recon {
                        let path = tensor_name(out, &format!("recon_{}_{}", r.mode, r.sweep));
                        let sidecar = TensorSidecar {
                            mode: r.mode.clone(),
                            seed: cfg.seeds().sampler,
                            shape: r.estimates.shape().to_vec(),
                            complex: ds.complex,
                            schedule: Some(schedule.clone()),
                            steps_per_level: Some(cfg.steps_per_level),
                            operator: Some(r.operator.clone()),
                            metrics: recon_rows
                                .iter()
                                .filter(|m| m.mode == r.mode && m.pilot_snr_db_or_accel == Some(r.sweep))
                                .cloned()
                                .collect(),
                        };
                        exp::write_tensor_with_sidecar(&path, &r.estimates, &sidecar)?;
                        manifest.output(&path);
                    }
                }
                rows.extend(recon_rows);
            }
            let name = if cmd == Command::Eval {
                "metrics.csv"
            } else {
                "reconstruct_metrics.csv"
            };
            finish_metrics(out, name, &rows, &mut manifest)?;
        }
        Command::Gradcheck => {
            let mut worst = 0.0_f64;
            for cond in [Conditioning::OutputScale, Conditioning::LogSigmaInput] {
                for (name, err) in sscore::losses::loss_gradient_errors(cfg.seed, 4, 8, cond)? {
                    println!("{name:<11} {cond:<16} max rel err {err:.3e}");
                    worst = worst.max(err);
                }
            }
            println!("max rel err {worst:.3e}");
            if worst >= 1e-4 {
                return Err(format!("gradient check failed: {worst:.3e} >= 1e-4").into());
            }
            return Ok(());
        }
    }
    let path = manifest.write(out)?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn finish_metrics(out: &Path, name: &str, rows: &[MetricRow], manifest: &mut Manifest) -> AnyResult<()> {
    let path = out.join(name);
    write_metrics_csv(&path, rows)?;
    manifest.output(&path);
    for r in rows {
        let sweep = r.pilot_snr_db_or_accel.map_or(String::new(), |v| format!(" @ {v}"));
        println!(
            "{:<11} {:<8}{sweep} {:.4} +- {:.4} (n = {})",
            r.mode, r.metric, r.mean, r.std, r.n
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 and the usage text on unknown flags
    let cli = Cli::parse();
    let result = configure_threads()
        .and_then(|_| load_config(&cli.common))
        .and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
