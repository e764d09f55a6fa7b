//! Heart rate from a pulse trace: band-pass, peak picking, peak-interval
//! average and a periodogram cross-check.

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rppg_meta::eval::{bandpass, detect_peaks, estimate_hr, hr_from_peaks, spectral_hr, HrOptions, DEFAULT_MAX_HR, DEFAULT_MIN_HR};

fn main() -> Result<()> {
    let fps = 30.0;
    let clean: Vec<f64> = (0..900)
        .map(|i| (2.0 * std::f64::consts::PI * 1.2 * (i as f64 / fps - 0.5)).cos())
        .collect();
    let peaks = detect_peaks(&clean, fps, DEFAULT_MIN_HR, DEFAULT_MAX_HR)?;
    let hr = hr_from_peaks(&peaks, fps)?;
    println!("clean 1.2 Hz: {} peaks, {:.2} bpm", hr.n_peaks, hr.bpm);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.4)?;
    let noisy: Vec<f64> = clean
        .iter()
        .enumerate()
        .map(|(i, v)| v + 0.5 * (i as f64 / 300.0) + noise.sample(&mut rng))
        .collect();
    let filtered = bandpass(&noisy, fps, 0.7, 4.0)?;
    println!(
        "noisy with drift: {:.2} bpm (band-passed), spectral {:.2} bpm",
        estimate_hr(&noisy, fps, HrOptions::rppg())?.bpm,
        spectral_hr(&filtered, fps)?
    );
    Ok(())
}
