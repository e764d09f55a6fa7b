//! Renders the desk task pool and checks that each face's skin pixels carry
//! the pulse: the masked spatial mean correlates with the PPG.

use anyhow::Result;
use rppg_meta::eval::spectral_hr;
use rppg_meta::synthdata::{face_model, gen_task_specs, masked_means, render_session, PoolConfig};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn main() -> Result<()> {
    let mut cfg = PoolConfig::desk(7);
    cfg.duration_s = 20.0;
    let specs = gen_task_specs(&cfg)?;
    println!("{} train / {} val / {} test (+ shifted twins)", specs.train.len(), specs.val.len(), specs.test.len());
    for spec in specs.test.iter().chain(&specs.test_shifted) {
        let s = render_session(spec)?;
        let mask = face_model(spec).mask;
        let r = pearson(&masked_means(&s.frames, &mask), s.ppg.samples());
        println!(
            "{:16} mean {:5.1} bpm, spectral {:5.1} bpm, masked-mean r {:.3}",
            s.id,
            spec.mean_bpm(),
            spectral_hr(s.ppg.samples(), s.fps())?,
            r
        );
    }
    Ok(())
}
