//! Per-video HR error statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SD, MAE, RMSE and Pearson R over paired per-video heart rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Population standard deviation of the signed errors.
    pub sd: f64,
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either side has zero variance.
    pub r: Option<f64>,
    pub n: usize,
}

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "predicted vs true heart rates",
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heart rates"));
    }
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| (cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Error statistics, leaving `r` empty instead of failing on constant input.
pub fn summarize(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    check(pred, truth)?;
    let n = pred.len() as f64;
    let e: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let mean = e.iter().sum::<f64>() / n;
    let sd = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mae = e.iter().map(|v| v.abs()).sum::<f64>() / n;
    let rmse = (e.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let r = if pred.len() >= 2 { pearson(pred, truth) } else { None };
    Ok(MetricsReport {
        sd,
        mae,
        rmse,
        r,
        n: pred.len(),
    })
}

/// As [`summarize`], but R is required.
pub fn compute_metrics(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    check(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::TooShort {
            len: pred.len(),
            needed: 2,
        });
    }
    let report = summarize(pred, truth)?;
    if report.r.is_none() {
        return Err(Error::DegenerateVariance("heart rates"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn analytic_examples() {
        let m = compute_metrics(&[70.0, 72.0], &[72.0, 70.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.sd, m.r), (2.0, 2.0, 2.0, Some(-1.0)));

        let t = [60.0, 75.0, 90.0];
        let m = compute_metrics(&t, &t).unwrap();
        assert_eq!((m.mae, m.rmse, m.sd, m.r), (0.0, 0.0, 0.0, Some(1.0)));

        let p: Vec<f64> = t.iter().map(|v| v + 5.0).collect();
        let m = compute_metrics(&p, &t).unwrap();
        assert!((m.mae - 5.0).abs() < 1e-12 && m.sd.abs() < 1e-12);
        assert!((m.r.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(compute_metrics(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(
            compute_metrics(&[70.0, 70.0], &[60.0, 80.0]),
            Err(Error::DegenerateVariance(_))
        ));
        assert!(summarize(&[70.0, 70.0], &[60.0, 80.0]).unwrap().r.is_none());
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(pairs in proptest::collection::vec((40.0f64..200.0, 40.0f64..200.0), 1..20)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = summarize(&p, &t).unwrap();
            prop_assert!(m.mae <= m.rmse + 1e-9);
            if let Some(r) = m.r {
                prop_assert!(r.abs() <= 1.0);
            }
        }
    }
}
