//! Casts a PPG window as 40 ordinal ranks, scores a noisy prediction with
//! the ordinal loss and decodes it back.

use anyhow::Result;
use ndarray::Array2;
use rppg_meta::ordinal::{decode_ordinal, ordinal_loss, threshold, window_target, RankProbabilities};

fn main() -> Result<()> {
    let ranks = 40;
    let ppg: Vec<f64> = (0..60).map(|i| (i as f64 * 0.2).sin() + 0.3 * (i as f64 * 0.4).sin()).collect();
    let target = window_target(&ppg, ranks)?;
    println!("thresholds: first {:.4}, last {:.4}", threshold(1, ranks), threshold(ranks, ranks));
    println!("ranks per step (first 10): {:?}", &target.counts()[..10]);

    let exact = RankProbabilities::from_target(&target);
    let decoded = decode_ordinal(&exact);
    println!("decoded (first 5): {:?}", &decoded[..5]);

    // soften the one-hot prefix codes and score them
    let soft = RankProbabilities::new(Array2::from_shape_fn((60, ranks), |(t, s)| {
        let v = target.ranks()[[t, s]] as f64;
        0.1 + 0.8 * v
    }))?;
    println!("loss exact {:.3e}, softened {:.3}", ordinal_loss(&exact, &target)?, ordinal_loss(&soft, &target)?);
    Ok(())
}
