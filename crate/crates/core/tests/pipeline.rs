use sscore::config::{ExperimentConfig, OperatorKind};
use sscore::data::NoisyDataset;
use sscore::experiment::{self as exp};
use sscore::network::{ScoreModel, ScoreNetwork};
use sscore::train::{TrainMode, TrainingLog};

fn small(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        "prior.kind = toy_channel\nprior.nr = 2\nprior.nt = 4\ndata.samples = 300\n\
         net.widths = 32,32\nschedule.levels = 8\ntrain.epochs = 3\ntrain.batch_size = 32\n\
         train.lr = 1e-3\nsampler.steps_per_level = 3\nop.kind = pilots\nop.pilot_snr_db = 10\neval.count = 5\n",
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

#[test]
fn files_round_trip_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let ds = exp::generate_data(&cfg).unwrap();
    let ds_path = exp::dataset_path(dir.path());
    ds.save(&ds_path).unwrap();
    assert_eq!(NoisyDataset::load(&ds_path).unwrap(), ds);

    let (net, log) = exp::train_mode(&cfg, &ds, TrainMode::SureScore).unwrap();
    let w = exp::weights_path(dir.path(), TrainMode::SureScore);
    net.save_weights(&w).unwrap();
    let back = exp::load_model(&cfg, TrainMode::SureScore).unwrap();
    let x = ds.noisy_test();
    let sig = vec![0.3; x.rows()];
    assert_eq!(net.score_batch(&x, &sig).unwrap(), back.score_batch(&x, &sig).unwrap());

    let lp = exp::train_log_path(dir.path(), TrainMode::SureScore);
    log.write_csv(&lp).unwrap();
    assert_eq!(TrainingLog::read_csv(&lp).unwrap(), log);
    assert!(log.rows.iter().all(|r| r.lambda > 0.0 && r.mean_loss.is_finite()));
}

#[test]
fn evaluation_covers_every_mode_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    assert_eq!(cfg.operator.kind, OperatorKind::Pilots);
    let ds = exp::generate_data(&cfg).unwrap();
    let nets: Vec<(TrainMode, ScoreNetwork)> = TrainMode::ALL
        .iter()
        .map(|&m| (m, exp::train_mode(&cfg, &ds, m).unwrap().0))
        .collect();
    let models: Vec<(TrainMode, &dyn ScoreModel)> = nets.iter().map(|(m, n)| (*m, n as &dyn ScoreModel)).collect();
    let den = exp::denoising_eval(&cfg, &ds, &models).unwrap();
    assert_eq!(den.len(), 4);
    let (rows, recon) = exp::reconstruction_eval(&cfg, &ds, &models).unwrap();
    for mode in ["linear", "supervised", "naive", "sure_score"] {
        assert!(
            rows.iter().any(|r| r.mode == mode && r.metric == "nmse_db" && r.n == 5),
            "{mode}"
        );
    }
    assert!(recon
        .iter()
        .all(|r| r.estimates.rows() == 5 && r.estimates.all_finite()));

    // same config, same numbers
    let (again, _) = exp::reconstruction_eval(&cfg, &ds, &models).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "conf") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 3);
}
