//! Heart rate from a pulse signal: band-pass, peak picking, peak spacing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_HR: f64 = 40.0;
pub const DEFAULT_MAX_HR: f64 = 240.0;
/// Peaks must rise this fraction of the signal's inter-quartile range above
/// their surroundings.
pub const PROMINENCE_IQR_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrEstimate {
    pub bpm: f64,
    pub n_peaks: usize,
    pub window_s: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

fn iqr(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.75) - quantile(&s, 0.25)
}

/// Strict local maxima; a flat top counts once, at its (floored) middle.
fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < x.len() {
        if x[i - 1] < x[i] {
            let mut j = i;
            while j + 1 < x.len() && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < x.len() && x[j + 1] < x[i] {
                peaks.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

fn prominence(x: &[f64], p: usize) -> f64 {
    let h = x[p];
    let mut left = h;
    for &v in x[..p].iter().rev() {
        if v > h {
            break;
        }
        left = left.min(v);
    }
    let mut right = h;
    for &v in &x[p + 1..] {
        if v > h {
            break;
        }
        right = right.min(v);
    }
    h - left.max(right)
}

/// Local maxima at least `rate * 60 / max_hr` samples apart whose
/// prominence exceeds half the inter-quartile range. Taller peaks win
/// distance conflicts.
pub fn detect_peaks(signal: &[f64], rate: f64, min_hr: f64, max_hr: f64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::BadRate(rate));
    }
    if !(min_hr > 0.0 && max_hr > min_hr) {
        return Err(Error::BadConfig(format!("heart-rate band {min_hr}..{max_hr}")));
    }
    let needed = (2.0 * rate / (max_hr / 60.0)).ceil() as usize;
    if signal.len() < needed.max(3) {
        return Err(Error::TooShort {
            len: signal.len(),
            needed: needed.max(3),
        });
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("signal"));
    }
    let threshold = PROMINENCE_IQR_FRACTION * iqr(signal);
    if threshold <= 0.0 {
        return Ok(Vec::new());
    }
    let candidates: Vec<usize> = local_maxima(signal)
        .into_iter()
        .filter(|&p| prominence(signal, p) > threshold)
        .collect();
    let distance = rate * 60.0 / max_hr;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| signal[candidates[b]].total_cmp(&signal[candidates[a]]).then(a.cmp(&b)));
    let mut keep = vec![true; candidates.len()];
    for &k in &order {
        if !keep[k] {
            continue;
        }
        for (j, kj) in keep.iter_mut().enumerate() {
            if j != k && ((candidates[j] as f64) - (candidates[k] as f64)).abs() < distance {
                *kj = false;
            }
        }
    }
    Ok(candidates
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect())
}

/// `60 * rate / mean(successive distances)`.
pub fn hr_from_peaks(peaks: &[usize], rate: f64) -> Result<HrEstimate> {
    if peaks.len() < 2 {
        return Err(Error::TooFewPeaks(peaks.len()));
    }
    let span = (peaks[peaks.len() - 1] - peaks[0]) as f64;
    let mean_gap = span / (peaks.len() - 1) as f64;
    Ok(HrEstimate {
        bpm: 60.0 * rate / mean_gap,
        n_peaks: peaks.len(),
        window_s: span / rate,
    })
}

/// RBJ biquad coefficients `(b, a)` with `a0` normalized to 1.
fn biquad(rate: f64, cutoff: f64, high: bool) -> ([f64; 3], [f64; 2]) {
    let w = 2.0 * PI * cutoff / rate;
    let (sin, cos) = w.sin_cos();
    let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
    let a0 = 1.0 + alpha;
    let b = if high {
        [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
    } else {
        [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
    };
    ([b[0] / a0, b[1] / a0, b[2] / a0], [-2.0 * cos / a0, (1.0 - alpha) / a0])
}

fn run_biquad(x: &[f64], (b, a): ([f64; 3], [f64; 2])) -> Vec<f64> {
    // transposed direct form II, state started at the steady response to x[0]
    let x0 = x[0];
    let gain = (b[0] + b[1] + b[2]) / (1.0 + a[0] + a[1]);
    let y0 = gain * x0;
    let mut s2 = b[2] * x0 - a[1] * y0;
    let mut s1 = b[1] * x0 - a[0] * y0 + s2;
    let mut y = Vec::with_capacity(x.len());
    for &v in x {
        let out = b[0] * v + s1;
        s1 = b[1] * v - a[0] * out + s2;
        s2 = b[2] * v - a[1] * out;
        y.push(out);
    }
    y
}

/// Zero-phase 0.7-4 Hz band-pass (second-order high- and low-pass sections
/// run forward and backward over a reflected extension).
pub fn bandpass(signal: &[f64], rate: f64, low_hz: f64, high_hz: f64) -> Result<Vec<f64>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::BadRate(rate));
    }
    if !(0.0 < low_hz && low_hz < high_hz) {
        return Err(Error::BadConfig(format!("band {low_hz}..{high_hz} Hz")));
    }
    let n = signal.len();
    if n < 3 {
        return Err(Error::TooShort { len: n, needed: 3 });
    }
    let pad = ((3.0 * rate / low_hz) as usize).min(n - 1);
    let first = signal[0];
    let last = signal[n - 1];
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));
    let mut sections = vec![biquad(rate, low_hz, true)];
    if high_hz < rate / 2.0 {
        sections.push(biquad(rate, high_hz, false));
    }
    let mut y = ext;
    for &sec in &sections {
        y = run_biquad(&y, sec);
        y.reverse();
        y = run_biquad(&y, sec);
        y.reverse();
    }
    Ok(y[pad..pad + n].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrOptions {
    pub bandpass: bool,
    pub low_hz: f64,
    pub high_hz: f64,
    pub min_hr: f64,
    pub max_hr: f64,
}

impl HrOptions {
    /// For decoded rPPG: band-pass on.
    pub fn rppg() -> Self {
        Self {
            bandpass: true,
            low_hz: 0.7,
            high_hz: 4.0,
            min_hr: DEFAULT_MIN_HR,
            max_hr: DEFAULT_MAX_HR,
        }
    }

    /// For ground-truth PPG: band-pass off.
    pub fn reference() -> Self {
        Self {
            bandpass: false,
            ..Self::rppg()
        }
    }
}

/// Average heart rate over a whole signal.
pub fn estimate_hr(signal: &[f64], rate: f64, opts: HrOptions) -> Result<HrEstimate> {
    let filtered;
    let x = if opts.bandpass {
        filtered = bandpass(signal, rate, opts.low_hz, opts.high_hz)?;
        &filtered[..]
    } else {
        signal
    };
    let peaks = detect_peaks(x, rate, opts.min_hr, opts.max_hr)?;
    hr_from_peaks(&peaks, rate)
}

/// Periodogram argmax over the 40-240 bpm band, in bpm. A cross-check only.
pub fn spectral_hr(signal: &[f64], rate: f64) -> Result<f64> {
    let n = signal.len();
    if n < 4 {
        return Err(Error::TooShort { len: n, needed: 4 });
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let lo = (DEFAULT_MIN_HR / 60.0 * n as f64 / rate).ceil() as usize;
    let hi = ((DEFAULT_MAX_HR / 60.0 * n as f64 / rate).floor() as usize).min(n / 2);
    let mut best = (lo.max(1), f64::NEG_INFINITY);
    for k in lo.max(1)..=hi {
        let w = 2.0 * PI * k as f64 / n as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in signal.iter().enumerate() {
            let (s, c) = (w * i as f64).sin_cos();
            re += (v - mean) * c;
            im -= (v - mean) * s;
        }
        let power = re * re + im * im;
        if power > best.1 {
            best = (k, power);
        }
    }
    Ok(best.0 as f64 * rate / n as f64 * 60.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sine(freq: f64, rate: f64, seconds: f64) -> Vec<f64> {
        // phase chosen so maxima fall on whole samples
        let n = (rate * seconds) as usize;
        (0..n)
            .map(|i| (2.0 * PI * freq * (i as f64 / rate - 0.5)).cos())
            .collect()
    }

    #[test]
    fn one_hertz_sine_has_ten_evenly_spaced_peaks() {
        let x = sine(1.0, 30.0, 10.0);
        let p = detect_peaks(&x, 30.0, DEFAULT_MIN_HR, DEFAULT_MAX_HR).unwrap();
        assert_eq!(p.len(), 10);
        assert!(p.windows(2).all(|w| w[1] - w[0] == 30));
    }

    #[test]
    fn constant_signal_has_no_peaks() {
        assert!(detect_peaks(&[0.3; 300], 30.0, 40.0, 240.0).unwrap().is_empty());
    }

    #[test]
    fn noisy_sine_peak_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let x: Vec<f64> = sine(1.0, 30.0, 10.0).into_iter().map(|v| v + noise.sample(&mut rng)).collect();
        let n = detect_peaks(&x, 30.0, 40.0, 240.0).unwrap().len();
        assert!((9..=11).contains(&n), "{n} peaks");
    }

    #[test]
    fn too_short_signal() {
        assert!(matches!(detect_peaks(&[0.0; 5], 30.0, 40.0, 240.0), Err(Error::TooShort { .. })));
    }

    #[test]
    fn hr_from_peak_examples() {
        assert_eq!(hr_from_peaks(&[0, 30, 60], 30.0).unwrap().bpm, 60.0);
        assert_eq!(hr_from_peaks(&[0, 25, 50, 75], 30.0).unwrap().bpm, 72.0);
        assert!(matches!(hr_from_peaks(&[3], 30.0), Err(Error::TooFewPeaks(1))));
    }

    #[test]
    fn pure_tone_gives_exact_rate() {
        for f in [1.0, 1.2, 1.5, 2.0] {
            let x = sine(f, 30.0, 20.0);
            let hr = estimate_hr(&x, 30.0, HrOptions::reference()).unwrap();
            assert!((hr.bpm - 60.0 * f).abs() < 1e-9, "{f}: {}", hr.bpm);
        }
    }

    #[test]
    fn bandpass_keeps_pulse_and_removes_drift() {
        let rate = 30.0;
        let x: Vec<f64> = (0..900)
            .map(|i| {
                let t = i as f64 / rate;
                (2.0 * PI * 1.2 * t).sin() + 0.5 * t + 2.0
            })
            .collect();
        let y = bandpass(&x, rate, 0.7, 4.0).unwrap();
        let mid = &y[150..750];
        let mean = mid.iter().sum::<f64>() / mid.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        let amp = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((0.7..1.1).contains(&amp), "amplitude {amp}");
        let hr = estimate_hr(&x, rate, HrOptions::rppg()).unwrap();
        assert!((hr.bpm - 72.0).abs() < 1.0, "{}", hr.bpm);
    }

    #[test]
    fn spectral_cross_check() {
        let x = sine(1.2, 30.0, 30.0);
        assert!((spectral_hr(&x, 30.0).unwrap() - 72.0).abs() <= 2.0);
    }
}
