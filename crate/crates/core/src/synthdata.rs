//! Synthetic recordings with known ground truth.
//!
//! A task is a face-like oval whose skin pixels are modulated by a
//! synthetic pulse waveform. Everything is determined by the task seed, and
//! the shift knobs change only appearance, never the pulse, so shifted
//! variants share their ground-truth heart rate with the originals.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FrameSequence, PpgTrace, SessionStream};

pub const MIN_BPM: f64 = 45.0;
pub const MAX_BPM: f64 = 180.0;

/// Pulse shape: fundamental plus second harmonic plus a notch-like bump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub harmonic2: f64,
    pub harmonic2_phase: f64,
    pub notch_amplitude: f64,
    /// Phase (radians) of the bump within a beat.
    pub notch_phase: f64,
    pub notch_width: f64,
}

impl Default for Waveform {
    fn default() -> Self {
        Self {
            harmonic2: 0.3,
            harmonic2_phase: 0.5,
            notch_amplitude: 0.15,
            notch_phase: 2.2,
            notch_width: 0.3,
        }
    }
}

impl Waveform {
    pub fn value(&self, phase: f64) -> f64 {
        let wrapped = (phase - self.notch_phase + PI).rem_euclid(2.0 * PI) - PI;
        phase.sin()
            + self.harmonic2 * (2.0 * phase + self.harmonic2_phase).sin()
            + self.notch_amplitude * (-(wrapped * wrapped) / (2.0 * self.notch_width * self.notch_width)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    /// Mean skin colour (RGB, unit interval).
    pub skin_rgb: [f64; 3],
    /// Amplitude of the smooth shading field over the face.
    pub shading: f64,
    /// Oval centre and radii, as fractions of the frame side.
    pub oval: [f64; 4],
    /// Pulse modulation amplitude per unit of PPG.
    pub gain: f64,
    /// Per-channel weighting of the modulation (green strongest in skin).
    pub channel_gain: [f64; 3],
    /// Per-pixel additive Gaussian noise.
    pub noise_sigma: f64,
    /// Seed of the smooth spatial fields (shading and gain texture).
    pub texture_seed: u64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            skin_rgb: [0.62, 0.45, 0.36],
            shading: 0.15,
            oval: [0.5, 0.52, 0.36, 0.44],
            gain: 0.03,
            channel_gain: [0.4, 1.0, 0.6],
            noise_sigma: 0.02,
            texture_seed: 0,
        }
    }
}

/// Distribution-shift knobs applied on top of an appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftKnobs {
    /// Added to skin pixels.
    pub brightness: f64,
    pub gain_multiplier: f64,
    /// Relative per-channel scaling of the skin colour.
    pub channel_imbalance: [f64; 3],
    pub noise_multiplier: f64,
}

impl Default for ShiftKnobs {
    fn default() -> Self {
        Self::none()
    }
}

impl ShiftKnobs {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            gain_multiplier: 1.0,
            channel_imbalance: [0.0; 3],
            noise_multiplier: 1.0,
        }
    }

    /// Darker-skin / different-camera shift used for the held-out pool.
    pub fn test_shift() -> Self {
        Self {
            brightness: 0.2,
            gain_multiplier: 0.5,
            channel_imbalance: [0.0; 3],
            noise_multiplier: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub id: String,
    pub seed: u64,
    pub duration_s: f64,
    pub fps: f64,
    pub frame_size: usize,
    /// Piecewise-constant heart rate: `(start second, bpm)`, sorted, first at 0.
    pub hr_profile: Vec<(f64, f64)>,
    pub waveform: Waveform,
    pub appearance: Appearance,
    pub shift: ShiftKnobs,
    /// Additive Gaussian noise on the PPG itself.
    pub ppg_noise: f64,
}

impl SynthTaskSpec {
    /// A constant-rate task with default appearance.
    pub fn constant(id: impl Into<String>, bpm: f64, duration_s: f64, fps: f64, frame_size: usize, seed: u64) -> Self {
        Self {
            id: id.into(),
            seed,
            duration_s,
            fps,
            frame_size,
            hr_profile: vec![(0.0, bpm)],
            waveform: Waveform::default(),
            appearance: Appearance {
                texture_seed: seed,
                ..Appearance::default()
            },
            shift: ShiftKnobs::none(),
            ppg_noise: 0.0,
        }
    }

    /// Draws a random task: rate, waveform and appearance all from `seed`.
    pub fn random(id: impl Into<String>, seed: u64, duration_s: f64, fps: f64, frame_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a5c);
        let base: f64 = rng.random_range(55.0..110.0);
        let segments = rng.random_range(1..=3usize);
        let mut hr_profile = vec![(0.0, base)];
        for k in 1..segments {
            let start = duration_s * k as f64 / segments as f64;
            let bpm = (base + rng.random_range(-8.0..8.0)).clamp(MIN_BPM, MAX_BPM);
            hr_profile.push((start, bpm));
        }
        let waveform = Waveform {
            harmonic2: rng.random_range(0.15..0.45),
            harmonic2_phase: rng.random_range(0.0..PI),
            notch_amplitude: rng.random_range(0.05..0.25),
            notch_phase: rng.random_range(1.8..2.6),
            notch_width: rng.random_range(0.2..0.4),
        };
        let tone: f64 = rng.random_range(-0.15..0.15);
        let appearance = Appearance {
            skin_rgb: [
                (0.60 + tone + rng.random_range(-0.04..0.04)).clamp(0.2, 0.8),
                (0.44 + tone + rng.random_range(-0.04..0.04)).clamp(0.15, 0.7),
                (0.36 + tone + rng.random_range(-0.04..0.04)).clamp(0.1, 0.6),
            ],
            shading: rng.random_range(0.05..0.2),
            oval: [
                rng.random_range(0.46..0.54),
                rng.random_range(0.48..0.56),
                rng.random_range(0.30..0.40),
                rng.random_range(0.38..0.46),
            ],
            gain: rng.random_range(0.02..0.04),
            channel_gain: [
                rng.random_range(0.3..0.5),
                1.0,
                rng.random_range(0.4..0.7),
            ],
            noise_sigma: rng.random_range(0.01..0.03),
            texture_seed: rng.random(),
        };
        Self {
            id: id.into(),
            seed,
            duration_s,
            fps,
            frame_size,
            hr_profile,
            waveform,
            appearance,
            shift: ShiftKnobs::none(),
            ppg_noise: 0.0,
        }
    }

    pub fn with_shift(mut self, shift: ShiftKnobs) -> Self {
        self.shift = shift;
        self
    }

    pub fn num_frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps {}", self.fps));
        }
        if self.num_frames() < 2 {
            return bad("duration shorter than two frames".into());
        }
        if self.frame_size < crate::types::MIN_FRAME_SIZE {
            return bad(format!("frame size {}", self.frame_size));
        }
        if self.hr_profile.is_empty() || self.hr_profile[0].0 != 0.0 {
            return bad("heart-rate profile must start at t = 0".into());
        }
        if self.hr_profile.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("heart-rate profile must be sorted".into());
        }
        if let Some((_, bpm)) = self.hr_profile.iter().find(|(_, b)| !(MIN_BPM..=MAX_BPM).contains(b)) {
            return bad(format!("{bpm} bpm outside {MIN_BPM}..{MAX_BPM}"));
        }
        if self.appearance.noise_sigma < 0.0 || self.ppg_noise < 0.0 || self.shift.noise_multiplier < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    /// Pulse phase in radians at time `t`, continuous across rate changes.
    pub fn phase_at(&self, t: f64) -> f64 {
        let mut phase = 0.0;
        for (k, &(start, bpm)) in self.hr_profile.iter().enumerate() {
            let end = self.hr_profile.get(k + 1).map_or(f64::INFINITY, |s| s.0);
            if t <= start {
                break;
            }
            phase += 2.0 * PI * bpm / 60.0 * (t.min(end) - start);
        }
        phase
    }

    /// Duration-weighted mean heart rate over the whole task.
    pub fn mean_bpm(&self) -> f64 {
        self.phase_at(self.duration_s) / (2.0 * PI) * 60.0 / self.duration_s
    }
}

/// Samples the pulse at the frame rate.
pub fn synth_ppg(spec: &SynthTaskSpec) -> Result<PpgTrace> {
    spec.validate()?;
    let n = spec.num_frames();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9);
    let noise = Normal::new(0.0, spec.ppg_noise.max(0.0)).map_err(|e| Error::BadSpec(e.to_string()))?;
    let samples = (0..n)
        .map(|i| {
            let v = spec.waveform.value(spec.phase_at(i as f64 / spec.fps));
            if spec.ppg_noise > 0.0 {
                v + noise.sample(&mut rng)
            } else {
                v
            }
        })
        .collect();
    PpgTrace::new(samples, spec.fps)
}

/// Oval skin mask, base image and per-pixel modulation gain.
#[derive(Debug, Clone)]
pub struct FaceModel {
    pub mask: Array2<bool>,
    pub base: Array3<f64>,
    pub gain: Array3<f64>,
}

/// Builds the static appearance of a task, with shift knobs applied.
pub fn face_model(spec: &SynthTaskSpec) -> FaceModel {
    let k = spec.frame_size;
    let a = &spec.appearance;
    let mut rng = ChaCha8Rng::seed_from_u64(a.texture_seed);
    // a few random low-frequency cosines for shading and gain texture
    let mut field = || {
        let terms: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        move |u: f64, v: f64| terms.iter().map(|(fx, fy, ph)| (PI * (fx * u + fy * v) + ph).cos()).sum::<f64>() / 4.0
    };
    let shading = field();
    let texture = field();
    let mut mask = Array2::from_elem((k, k), false);
    let mut base = Array3::zeros((k, k, 3));
    let mut gain = Array3::zeros((k, k, 3));
    let [cx, cy, rx, ry] = a.oval;
    for y in 0..k {
        for x in 0..k {
            let u = (x as f64 + 0.5) / k as f64;
            let v = (y as f64 + 0.5) / k as f64;
            let r = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
            if r > 1.0 {
                continue;
            }
            mask[[y, x]] = true;
            let shade = 1.0 + a.shading * shading(u, v) - 0.1 * r;
            let tex = 0.7 + 0.3 * texture(u, v);
            for c in 0..3 {
                let skin = a.skin_rgb[c] * (1.0 + spec.shift.channel_imbalance[c]);
                base[[y, x, c]] = skin * shade + spec.shift.brightness;
                gain[[y, x, c]] = a.gain * a.channel_gain[c] * tex * spec.shift.gain_multiplier;
            }
        }
    }
    FaceModel { mask, base, gain }
}

/// Renders frames `clamp(base + gain * (ppg_t - mean) + noise_t)` on the
/// skin mask; background pixels stay zero.
pub fn synth_video(ppg: &PpgTrace, spec: &SynthTaskSpec) -> Result<FrameSequence> {
    spec.validate()?;
    if ppg.len() != spec.num_frames() {
        return Err(Error::LengthMismatch {
            what: "ppg samples vs spec frames",
            left: ppg.len(),
            right: spec.num_frames(),
        });
    }
    let k = spec.frame_size;
    let face = face_model(spec);
    let mean = ppg.samples().iter().sum::<f64>() / ppg.len() as f64;
    let sigma = spec.appearance.noise_sigma * spec.shift.noise_multiplier;
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::BadSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x00c0_ffee ^ spec.shift.noise_multiplier.to_bits());
    let mut frames = Array4::<f32>::zeros((ppg.len(), k, k, 3));
    for (t, mut frame) in frames.outer_iter_mut().enumerate() {
        let pulse = ppg.samples()[t] - mean;
        for y in 0..k {
            for x in 0..k {
                if !face.mask[[y, x]] {
                    continue;
                }
                for c in 0..3 {
                    let mut v = face.base[[y, x, c]] + face.gain[[y, x, c]] * pulse;
                    if sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    frame[[y, x, c]] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    FrameSequence::new(frames, spec.fps)
}

/// Renders a complete session.
pub fn render_session(spec: &SynthTaskSpec) -> Result<SessionStream> {
    let ppg = synth_ppg(spec)?;
    let frames = synth_video(&ppg, spec)?;
    SessionStream::new(spec.id.clone(), frames, ppg)
}

/// Split sizes of a task pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSplit {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl PoolSplit {
    pub fn desk() -> Self {
        Self {
            train: 12,
            val: 2,
            test: 4,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub split: PoolSplit,
    pub duration_s: f64,
    pub fps: f64,
    pub frame_size: usize,
    pub seed: u64,
    /// Applied to the test tasks to build their shifted twins.
    pub shift: ShiftKnobs,
}

impl PoolConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            split: PoolSplit::desk(),
            duration_s: 120.0,
            fps: 30.0,
            frame_size: 32,
            seed,
            shift: ShiftKnobs::test_shift(),
        }
    }
}

/// Task specifications of a pool; cheap to build, rendered on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpecs {
    pub train: Vec<SynthTaskSpec>,
    pub val: Vec<SynthTaskSpec>,
    pub test: Vec<SynthTaskSpec>,
    /// Same pulse and appearance seeds as `test`, with the shift applied.
    pub test_shifted: Vec<SynthTaskSpec>,
}

impl PoolSpecs {
    pub fn all(&self) -> impl Iterator<Item = &SynthTaskSpec> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .chain(&self.test_shifted)
    }
}

fn derive_seed(pool_seed: u64, split: u64, index: u64) -> u64 {
    // splitmix64 over the packed triple; distinct inputs give distinct seeds
    let mut z = pool_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(split << 32 | index);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn gen_task_specs(cfg: &PoolConfig) -> Result<PoolSpecs> {
    if cfg.split.train == 0 {
        return Err(Error::BadSplit("at least one training task required".into()));
    }
    let make = |split: u64, tag: &str, n: usize| -> Vec<SynthTaskSpec> {
        (0..n)
            .map(|i| {
                SynthTaskSpec::random(
                    format!("{tag}-{i:02}"),
                    derive_seed(cfg.seed, split, i as u64),
                    cfg.duration_s,
                    cfg.fps,
                    cfg.frame_size,
                )
            })
            .collect()
    };
    let train = make(1, "train", cfg.split.train);
    let val = make(2, "val", cfg.split.val);
    let test = make(3, "test", cfg.split.test);
    let test_shifted = test
        .iter()
        .map(|s| {
            let mut shifted = s.clone().with_shift(cfg.shift.clone());
            shifted.id = format!("{}-shifted", s.id);
            shifted
        })
        .collect();
    let specs = PoolSpecs {
        train,
        val,
        test,
        test_shifted,
    };
    for s in specs.all() {
        s.validate()?;
    }
    Ok(specs)
}

/// Rendered sessions of a pool.
#[derive(Debug, Clone)]
pub struct TaskPool {
    pub specs: PoolSpecs,
    pub train: Vec<SessionStream>,
    pub val: Vec<SessionStream>,
    pub test: Vec<SessionStream>,
    pub test_shifted: Vec<SessionStream>,
}

pub fn gen_task_pool(cfg: &PoolConfig) -> Result<TaskPool> {
    let specs = gen_task_specs(cfg)?;
    let render = |v: &[SynthTaskSpec]| v.iter().map(render_session).collect::<Result<Vec<_>>>();
    Ok(TaskPool {
        train: render(&specs.train)?,
        val: render(&specs.val)?,
        test: render(&specs.test)?,
        test_shifted: render(&specs.test_shifted)?,
        specs,
    })
}

/// Spatial mean of the skin pixels of each frame (green-weighted average of
/// all channels).
pub fn masked_means(frames: &FrameSequence, mask: &Array2<bool>) -> Vec<f64> {
    let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
    frames
        .frames()
        .outer_iter()
        .map(|f| {
            let mut s = 0.0;
            for ((y, x, _), &v) in f.indexed_iter() {
                if mask[[y, x]] {
                    s += v as f64;
                }
            }
            s / (3.0 * count)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::spectral_hr;
    use std::collections::HashSet;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn ppg_peak_frequency_matches_rate() {
        let spec = SynthTaskSpec::constant("a", 72.0, 30.0, 30.0, 16, 1);
        let ppg = synth_ppg(&spec).unwrap();
        let bin = 1.0 / 30.0;
        let f = spectral_hr(ppg.samples(), 30.0).unwrap() / 60.0;
        assert!((f - 1.2).abs() <= bin, "peak at {f} Hz");
    }

    #[test]
    fn noiseless_60_bpm_is_periodic_in_30_samples() {
        let spec = SynthTaskSpec::constant("a", 60.0, 10.0, 30.0, 16, 1);
        let s = synth_ppg(&spec).unwrap();
        for i in 0..s.len() - 30 {
            assert!((s.samples()[i] - s.samples()[i + 30]).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let mut spec = SynthTaskSpec::random("a", 11, 10.0, 30.0, 16);
        spec.ppg_noise = 0.05;
        assert_eq!(synth_ppg(&spec).unwrap(), synth_ppg(&spec).unwrap());
    }

    #[test]
    fn zero_gain_zero_noise_gives_static_frames() {
        let mut spec = SynthTaskSpec::constant("a", 70.0, 2.0, 30.0, 16, 2);
        spec.appearance.gain = 0.0;
        spec.appearance.noise_sigma = 0.0;
        let v = synth_video(&synth_ppg(&spec).unwrap(), &spec).unwrap();
        let first = v.frame(0).to_owned();
        for t in 1..v.len() {
            assert_eq!(v.frame(t), first.view());
        }
    }

    #[test]
    fn masked_mean_tracks_ppg_and_survives_brightness_shift() {
        let mut spec = SynthTaskSpec::random("a", 5, 10.0, 30.0, 32);
        spec.appearance.noise_sigma = 0.0;
        let ppg = synth_ppg(&spec).unwrap();
        let face = face_model(&spec);
        let means = masked_means(&synth_video(&ppg, &spec).unwrap(), &face.mask);
        let r = pearson(&means, ppg.samples());
        assert!(r > 0.99, "r = {r}");

        let bright = spec.clone().with_shift(ShiftKnobs {
            brightness: 0.2,
            ..ShiftKnobs::none()
        });
        let video = synth_video(&ppg, &bright).unwrap();
        let shifted = masked_means(&video, &face.mask);
        assert!(shifted[0] > means[0] + 0.1);
        let r2 = pearson(&shifted, ppg.samples());
        assert!((r2 - r).abs() < 1e-3, "{r2} vs {r}");
    }

    #[test]
    fn pool_split_sizes_and_disjoint_seeds() {
        let mut cfg = PoolConfig::desk(3);
        cfg.split = PoolSplit { train: 18, val: 1, test: 0 };
        let specs = gen_task_specs(&cfg).unwrap();
        assert_eq!(specs.train.len(), 18);
        assert_eq!(specs.val.len(), 1);

        let specs = gen_task_specs(&PoolConfig::desk(3)).unwrap();
        let seeds: Vec<u64> = specs.train.iter().chain(&specs.val).chain(&specs.test).map(|s| s.seed).collect();
        let unique: HashSet<_> = seeds.iter().collect();
        assert_eq!(unique.len(), seeds.len());

        let mut bad = PoolConfig::desk(0);
        bad.split.train = 0;
        assert!(matches!(gen_task_specs(&bad), Err(Error::BadSplit(_))));
    }

    #[test]
    fn shifted_twin_keeps_the_pulse() {
        let mut cfg = PoolConfig::desk(9);
        cfg.split = PoolSplit { train: 1, val: 0, test: 2 };
        cfg.duration_s = 6.0;
        let pool = gen_task_pool(&cfg).unwrap();
        for (a, b) in pool.test.iter().zip(&pool.test_shifted) {
            assert_eq!(a.ppg, b.ppg);
            assert_ne!(a.frames, b.frames);
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = SynthTaskSpec::constant("a", 200.0, 5.0, 30.0, 16, 0);
        assert!(matches!(synth_ppg(&spec), Err(Error::BadSpec(_))));
        spec.hr_profile = vec![(0.0, 70.0)];
        let short = PpgTrace::new(vec![0.0; 10], 30.0).unwrap();
        assert!(matches!(synth_video(&short, &spec), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn piecewise_rate_has_continuous_phase() {
        let mut spec = SynthTaskSpec::constant("a", 60.0, 20.0, 30.0, 16, 0);
        spec.hr_profile = vec![(0.0, 60.0), (10.0, 90.0)];
        let before = spec.phase_at(10.0 - 1e-9);
        let after = spec.phase_at(10.0 + 1e-9);
        assert!((after - before).abs() < 1e-6);
        assert!((spec.mean_bpm() - 75.0).abs() < 1e-9);
    }
}
