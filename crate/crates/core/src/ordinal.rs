//! Ordinal regression codec for PPG windows.
//!
//! A window is min-max normalized to `[0, 1]`, then each sample `v` becomes
//! `S` binary labels `1{v > (s - 1) / S}` for `s = 1..=S`. Predictions are
//! decoded back by counting heads with probability above one half.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::OrdinalTarget;

/// Probabilities are clipped to `[EPS, 1 - EPS]` inside the loss.
pub const EPS: f64 = 1e-7;

/// Per-frame, per-rank probabilities `[T, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankProbabilities(pub Array2<f64>);

impl RankProbabilities {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::NonFinite("rank probabilities"));
        }
        Ok(Self(p))
    }

    /// Hard 0/1 probabilities reproducing a target exactly.
    pub fn from_target(target: &OrdinalTarget) -> Self {
        Self(target.as_f64())
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn num_ranks(&self) -> usize {
        self.0.ncols()
    }
}

/// Min-max normalizes a window. A flat window maps to 0.5 everywhere.
pub fn normalize_segment(window: &[f64]) -> Result<Vec<f64>> {
    if window.len() < 2 {
        return Err(Error::TooShort {
            len: window.len(),
            needed: 2,
        });
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ppg window"));
    }
    let lo = window.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return Ok(vec![0.5; window.len()]);
    }
    Ok(window
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect())
}

/// Threshold of rank `s` (zero-based): `s / S`.
#[inline]
pub fn threshold(s: usize, ranks: usize) -> f64 {
    s as f64 / ranks as f64
}

pub fn encode_ordinal(values: &[f64], ranks: usize) -> Result<OrdinalTarget> {
    if ranks < 2 {
        return Err(Error::BadConfig("at least two ranks required".into()));
    }
    if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::BadRange { value: v });
    }
    let mut out = Array2::<u8>::zeros((values.len(), ranks));
    for (t, &v) in values.iter().enumerate() {
        for s in 0..ranks {
            if v > threshold(s, ranks) {
                out[[t, s]] = 1;
            }
        }
    }
    OrdinalTarget::new(out)
}

/// Normalizes a raw PPG window and encodes it.
pub fn window_target(ppg_window: &[f64], ranks: usize) -> Result<OrdinalTarget> {
    encode_ordinal(&normalize_segment(ppg_window)?, ranks)
}

#[inline]
fn clip(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Mean-over-time, summed-over-ranks binary cross-entropy.
pub fn ordinal_loss(p: &RankProbabilities, target: &OrdinalTarget) -> Result<f64> {
    check_shapes(p, target)?;
    let t_len = p.len() as f64;
    let mut total = 0.0;
    for (&pv, &tv) in p.0.iter().zip(target.ranks().iter()) {
        let pc = clip(pv);
        total += if tv == 1 { pc.ln() } else { (1.0 - pc).ln() };
    }
    Ok(-total / t_len)
}

/// Loss and its gradient with respect to the pre-sigmoid logits.
///
/// Entries whose probability was clipped have zero gradient.
pub fn ordinal_loss_and_logit_grad(
    logits: &Array2<f64>,
    target: &OrdinalTarget,
) -> Result<(f64, Array2<f64>)> {
    let p = RankProbabilities(logits.mapv(sigmoid));
    let loss = ordinal_loss(&p, target)?;
    let t_len = p.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    for ((g, &pv), &tv) in grad.iter_mut().zip(p.0.iter()).zip(target.ranks().iter()) {
        if pv > EPS && pv < 1.0 - EPS {
            *g = (pv - tv as f64) / t_len;
        }
    }
    Ok((loss, grad))
}

/// Counts heads above one half and divides by `S`.
pub fn decode_ordinal(p: &RankProbabilities) -> Vec<f64> {
    let s = p.num_ranks() as f64;
    p.0.outer_iter()
        .map(|row| row.iter().filter(|&&v| v > 0.5).count() as f64 / s)
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_shapes(p: &RankProbabilities, target: &OrdinalTarget) -> Result<()> {
    if p.0.dim() != target.ranks().dim() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs target {:?}",
            p.0.dim(),
            target.ranks().dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_segment(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_segment(&[5.0, 5.0, 5.0]).unwrap(), vec![0.5; 3]);
        assert_eq!(normalize_segment(&[1.0, 0.0, 1.0]).unwrap(), vec![1.0, 0.0, 1.0]);
        assert!(matches!(
            normalize_segment(&[1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn encode_examples() {
        let zero = encode_ordinal(&[0.0], 40).unwrap();
        assert_eq!(zero.counts(), vec![0]);
        let one = encode_ordinal(&[1.0], 40).unwrap();
        assert_eq!(one.counts(), vec![40]);
        let half = encode_ordinal(&[0.5], 40).unwrap();
        let row: Vec<u8> = half.ranks().row(0).to_vec();
        assert_eq!(&row[..20], &[1u8; 20]);
        assert_eq!(&row[20..], &[0u8; 20]);
        assert!(matches!(
            encode_ordinal(&[1.2], 40),
            Err(Error::BadRange { .. })
        ));
    }

    #[test]
    fn loss_examples() {
        let target = encode_ordinal(&[0.3, 0.8], 40).unwrap();
        let perfect = RankProbabilities::from_target(&target);
        assert!(ordinal_loss(&perfect, &target).unwrap() < 1e-4);

        let half = RankProbabilities(Array2::from_elem((2, 40), 0.5));
        assert_abs_diff_eq!(
            ordinal_loss(&half, &target).unwrap(),
            40.0 * std::f64::consts::LN_2,
            epsilon = 1e-12
        );

        let one = encode_ordinal(&[0.5], 40).unwrap();
        let worst = RankProbabilities(one.as_f64().mapv(|v| 1.0 - v));
        let expected = 40.0 * (1.0 / EPS).ln();
        assert_abs_diff_eq!(ordinal_loss(&worst, &one).unwrap(), expected, epsilon = 1e-3);
        assert!((ordinal_loss(&worst, &one).unwrap() - 644.7).abs() < 0.1);
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let target = encode_ordinal(&[0.3], 40).unwrap();
        let p = RankProbabilities(Array2::from_elem((2, 40), 0.5));
        assert!(matches!(ordinal_loss(&p, &target), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn decode_examples() {
        let hi = RankProbabilities(Array2::from_elem((1, 40), 0.9));
        assert_eq!(decode_ordinal(&hi), vec![1.0]);
        let lo = RankProbabilities(Array2::from_elem((1, 40), 0.1));
        assert_eq!(decode_ordinal(&lo), vec![0.0]);
        let half = encode_ordinal(&[0.5], 40).unwrap();
        assert_eq!(decode_ordinal(&RankProbabilities::from_target(&half)), vec![0.5]);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let target = encode_ordinal(&[0.2, 0.7, 0.45], 8).unwrap();
        let logits = Array2::from_shape_fn((3, 8), |(t, s)| ((t * 8 + s) as f64 * 0.37).sin() * 2.0);
        let (_, grad) = ordinal_loss_and_logit_grad(&logits, &target).unwrap();
        let h = 1e-6;
        for t in 0..3 {
            for s in 0..8 {
                let mut up = logits.clone();
                up[[t, s]] += h;
                let mut dn = logits.clone();
                dn[[t, s]] -= h;
                let fd = (ordinal_loss_and_logit_grad(&up, &target).unwrap().0
                    - ordinal_loss_and_logit_grad(&dn, &target).unwrap().0)
                    / (2.0 * h);
                assert_abs_diff_eq!(fd, grad[[t, s]], epsilon = 1e-7);
            }
        }
    }

    proptest! {
        #[test]
        fn grid_values_roundtrip(k in 0usize..=40) {
            let v = k as f64 / 40.0;
            let target = encode_ordinal(&[v], 40).unwrap();
            prop_assert_eq!(decode_ordinal(&RankProbabilities::from_target(&target)), vec![v]);
        }

        #[test]
        fn encoded_rows_are_prefixes(v in 0.0f64..=1.0, ranks in 2usize..64) {
            let target = encode_ordinal(&[v], ranks).unwrap();
            let row: Vec<u8> = target.ranks().row(0).to_vec();
            prop_assert!(crate::types::is_prefix_row(&row));
        }

        #[test]
        fn decode_is_monotone(row in proptest::collection::vec(0.0f64..1.0, 10), idx in 0usize..10, bump in 0.0f64..1.0) {
            let p = RankProbabilities(Array2::from_shape_vec((1, 10), row.clone()).unwrap());
            let mut raised = row;
            raised[idx] = (raised[idx] + bump).min(1.0);
            let q = RankProbabilities(Array2::from_shape_vec((1, 10), raised).unwrap());
            prop_assert!(decode_ordinal(&q)[0] >= decode_ordinal(&p)[0]);
        }

        #[test]
        fn perturbing_a_perfect_prediction_raises_the_loss(v in 0.0f64..=1.0, s in 0usize..40, delta in 0.01f64..0.99) {
            let target = encode_ordinal(&[v], 40).unwrap();
            let best = RankProbabilities::from_target(&target);
            let mut worse = best.clone();
            let cur = worse.0[[0, s]];
            worse.0[[0, s]] = if cur > 0.5 { 1.0 - delta } else { delta };
            prop_assert!(ordinal_loss(&worse, &target).unwrap() > ordinal_loss(&best, &target).unwrap());
        }
    }
}
