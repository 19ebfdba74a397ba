//! Error metrics and the metrics CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn error_and_energy(x_est: &[f64], x_true: &[f64]) -> Result<(f64, f64)> {
    if x_est.len() != x_true.len() {
        return Err(Error::Dimension {
            expected: x_true.len(),
            found: x_est.len(),
        });
    }
    let energy: f64 = x_true.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::invalid("reference signal has zero norm"));
    }
    let err = x_est.iter().zip(x_true).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((err, energy))
}

/// `10 log10(||x_est - x_true||^2 / ||x_true||^2)`; an exact match gives
/// negative infinity.
pub fn nmse_db(x_est: &[f64], x_true: &[f64]) -> Result<f64> {
    let (err, energy) = error_and_energy(x_est, x_true)?;
    Ok(if err == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (err / energy).log10()
    })
}

/// `||x_est - x_true|| / ||x_true||`.
pub fn nrmse(x_est: &[f64], x_true: &[f64]) -> Result<f64> {
    let (err, energy) = error_and_energy(x_est, x_true)?;
    Ok((err / energy).sqrt())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 || !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// One line of the metrics CSV. `pilot_snr_db_or_accel` is the sweep value
/// of a reconstruction run (empty for denoising).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mode: String,
    pub snr_w_db: f64,
    pub pilot_snr_db_or_accel: Option<f64>,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub seed: u64,
}

impl MetricRow {
    pub fn summarize(mode: &str, snr_w_db: f64, sweep: Option<f64>, metric: &str, values: &[f64], seed: u64) -> Self {
        let (mean, std) = mean_std(values);
        MetricRow {
            mode: mode.to_string(),
            snr_w_db,
            pilot_snr_db_or_accel: sweep,
            metric: metric.to_string(),
            mean,
            std,
            n: values.len(),
            seed,
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nmse_examples() {
        assert_eq!(nmse_db(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(nmse_db(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), f64::NEG_INFINITY);
        let db = nmse_db(&[1.1, 0.0], &[1.0, 0.0]).unwrap();
        assert!((db + 20.0).abs() < 1e-9, "{db}");
        assert!(nmse_db(&[1.0], &[0.0]).is_err());
        assert!(nmse_db(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nrmse_examples() {
        assert_eq!(nrmse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(nrmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert!(nrmse(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_schema_and_infinity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            MetricRow::summarize("supervised", 0.0, None, "nrmse", &[0.5, 0.7], 3),
            MetricRow::summarize("linear", f64::INFINITY, Some(10.0), "nmse_db", &[f64::NEG_INFINITY], 3),
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("mode,snr_w_db,pilot_snr_db_or_accel,metric,mean,std,n,seed")
        );
        assert!(lines.next().unwrap().starts_with("supervised,0.0,,nrmse,"));
        assert_eq!(lines.next(), Some("linear,inf,10.0,nmse_db,-inf,0.0,1,3"));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn nmse_db_is_twenty_log_nrmse(
            t in prop::collection::vec(-3.0f64..3.0, 4),
            e in prop::collection::vec(-1.0f64..1.0, 4),
        ) {
            prop_assume!(t.iter().any(|v| v.abs() > 0.1));
            let est: Vec<f64> = t.iter().zip(&e).map(|(a, b)| a + b).collect();
            let r = nrmse(&est, &t).unwrap();
            prop_assume!(r > 0.0);
            let db = nmse_db(&est, &t).unwrap();
            prop_assert!((db - 20.0 * r.log10()).abs() < 1e-9);
        }
    }
}
