//! Domain value types shared by every stage of the pipeline.
//!
//! All types here are plain immutable values: they hold no learning logic,
//! validate their invariants on construction, and are `Send + Sync`.

use ndarray::{s, Array1, Array2, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum accepted frame side length.
pub const MIN_FRAME_SIZE: usize = 8;

/// `T` consecutive pre-cropped face frames, channel-last `[T, K, K, 3]`,
/// intensities in the unit interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Array4<f32>,
    fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Array4<f32>, fps: f64) -> Result<Self> {
        let (t, h, w, c) = frames.dim();
        if t == 0 {
            return Err(Error::ShapeMismatch("frame sequence is empty".into()));
        }
        if h != w || h < MIN_FRAME_SIZE || c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "frames must be [T, K, K, 3] with K >= {MIN_FRAME_SIZE}, got [{t}, {h}, {w}, {c}]"
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::BadRate(fps));
        }
        if let Some(&v) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::BadRange { value: v as f64 });
        }
        Ok(Self { frames, fps })
    }

    /// Converts 8-bit frames to the unit interval by dividing by 255.
    pub fn from_u8(frames: &Array4<u8>, fps: f64) -> Result<Self> {
        Self::new(frames.mapv(|v| v as f32 / 255.0), fps)
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame side length `K`.
    pub fn size(&self) -> usize {
        self.frames.dim().1
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), index)
    }

    /// Copies frames `start..end` into a new sequence.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::ShapeMismatch(format!(
                "window {start}..{end} out of range for {} frames",
                self.len()
            )));
        }
        Ok(Self {
            frames: self.frames.slice(s![start..end, .., .., ..]).to_owned(),
            fps: self.fps,
        })
    }

    /// Mean intensity of every frame, averaged over pixels and channels.
    pub fn frame_means(&self) -> Array1<f64> {
        self.frames
            .outer_iter()
            .map(|f| f.iter().map(|&v| v as f64).sum::<f64>() / f.len() as f64)
            .collect()
    }
}

/// A one-dimensional physiological signal and its sampling rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpgTrace {
    samples: Vec<f64>,
    rate: f64,
}

impl PpgTrace {
    pub fn new(samples: Vec<f64>, rate: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::TooShort {
                len: samples.len(),
                needed: 2,
            });
        }
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::BadRate(rate));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ppg samples"));
        }
        Ok(Self { samples, rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.rate
    }

    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::ShapeMismatch(format!(
                "window {start}..{end} out of range for {} samples",
                self.len()
            )));
        }
        Self::new(self.samples[start..end].to_vec(), self.rate)
    }
}

/// Checks that a frame sequence and a PPG trace describe the same time axis.
///
/// The PPG must already be sampled at the frame rate; use
/// [`crate::ingest::resample_ppg`] first otherwise.
pub fn validate_alignment(
    frames: FrameSequence,
    ppg: PpgTrace,
) -> Result<(FrameSequence, PpgTrace)> {
    if (frames.fps() - ppg.rate()).abs() > 1e-9 * frames.fps().max(1.0) {
        return Err(Error::RateMismatch {
            fps: frames.fps(),
            rate: ppg.rate(),
        });
    }
    if frames.len() != ppg.len() {
        return Err(Error::LengthMismatch {
            what: "frames vs ppg samples",
            left: frames.len(),
            right: ppg.len(),
        });
    }
    Ok((frames, ppg))
}

/// A loaded recording: frames and a frame-aligned PPG of equal length.
#[derive(Debug, Clone)]
pub struct SessionStream {
    pub id: String,
    pub frames: FrameSequence,
    pub ppg: PpgTrace,
}

impl SessionStream {
    pub fn new(id: impl Into<String>, frames: FrameSequence, ppg: PpgTrace) -> Result<Self> {
        let (frames, ppg) = validate_alignment(frames, ppg)?;
        Ok(Self {
            id: id.into(),
            frames,
            ppg,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.frames.fps()
    }
}

/// One half of an episode: a frame window with an optional aligned target.
#[derive(Debug, Clone)]
pub struct EpisodeWindow {
    pub start: usize,
    pub frames: FrameSequence,
    pub target: Option<PpgTrace>,
}

impl EpisodeWindow {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn end(&self) -> usize {
        self.start + self.len()
    }

    /// Drops the target, as at deployment.
    pub fn unlabeled(&self) -> Self {
        Self {
            target: None,
            ..self.clone()
        }
    }
}

/// A task's support window (adaptation) and the later, longer query window.
#[derive(Debug, Clone)]
pub struct Episode {
    pub task_id: String,
    pub support: EpisodeWindow,
    pub query: EpisodeWindow,
}

impl Episode {
    pub fn new(task_id: impl Into<String>, support: EpisodeWindow, query: EpisodeWindow) -> Result<Self> {
        if query.len() <= support.len() {
            return Err(Error::BadSplit(format!(
                "query ({}) must be longer than support ({})",
                query.len(),
                support.len()
            )));
        }
        let disjoint = support.end() <= query.start || query.end() <= support.start;
        if !disjoint {
            return Err(Error::BadSplit("support and query windows overlap".into()));
        }
        if (support.frames.fps() - query.frames.fps()).abs() > 1e-9 {
            return Err(Error::RateMismatch {
                fps: support.frames.fps(),
                rate: query.frames.fps(),
            });
        }
        for w in [&support, &query] {
            if let Some(t) = &w.target {
                if t.len() != w.len() {
                    return Err(Error::LengthMismatch {
                        what: "episode window target",
                        left: w.len(),
                        right: t.len(),
                    });
                }
            }
        }
        Ok(Self {
            task_id: task_id.into(),
            support,
            query,
        })
    }

    pub fn is_labeled(&self) -> bool {
        self.support.target.is_some() && self.query.target.is_some()
    }
}

/// Per-frame latent codes `[T, D]` produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence(pub Array2<f64>);

impl LatentSequence {
    pub fn new(z: Array2<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent sequence"));
        }
        Ok(Self(z))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ndarray::ArrayView2<'_, f64> {
        self.0.view()
    }
}

/// Binary threshold-exceedance targets `[T, S]`; every row is a run of ones
/// followed by zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrdinalTarget(Array2<u8>);

impl OrdinalTarget {
    pub fn new(ranks: Array2<u8>) -> Result<Self> {
        for row in ranks.outer_iter() {
            if !is_prefix_row(row.as_slice().unwrap_or(&row.to_vec())) {
                return Err(Error::ShapeMismatch(
                    "ordinal target row is not a prefix pattern".into(),
                ));
            }
        }
        Ok(Self(ranks))
    }

    pub fn ranks(&self) -> &Array2<u8> {
        &self.0
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

    /// Number of exceeded thresholds per row.
    pub fn counts(&self) -> Vec<usize> {
        self.0
            .outer_iter()
            .map(|r| r.iter().map(|&b| b as usize).sum())
            .collect()
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.0.mapv(|b| b as f64)
    }
}

/// True when `row` is ones followed by zeros (either run may be empty).
pub fn is_prefix_row(row: &[u8]) -> bool {
    let ones = row.iter().take_while(|&&b| b == 1).count();
    row[ones..].iter().all(|&b| b == 0)
}

/// Learning hyper-parameters shared by training and deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Learning-phase step size.
    pub eta: f64,
    /// Adaptation-phase step size.
    pub alpha: f64,
    /// Prototype EMA weight on the old value.
    pub gamma: f64,
    /// Adaptation steps per episode / stream.
    pub adapt_steps: usize,
    /// Frames per estimator window.
    pub window: usize,
    /// Ordinal ranks.
    pub ranks: usize,
    /// Support frames per episode.
    pub support: usize,
    /// Query frames per episode.
    pub query: usize,
    /// End-to-end pretraining epochs before meta-training.
    pub pretrain_epochs: usize,
    /// Tasks sampled per meta-batch.
    pub tasks_per_batch: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            alpha: 1e-5,
            gamma: 0.8,
            adapt_steps: 10,
            window: 60,
            ranks: 40,
            support: 60,
            query: 120,
            pretrain_epochs: 5,
            tasks_per_batch: 4,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if self.ranks < 2 {
            return bad("ranks must be at least 2");
        }
        if self.window == 0 {
            return bad("window must be positive");
        }
        if self.query <= self.support {
            return bad("query must be longer than support");
        }
        if !self.support.is_multiple_of(self.window) || !self.query.is_multiple_of(self.window) {
            return bad("support and query must be whole multiples of the window");
        }
        if self.tasks_per_batch == 0 {
            return bad("tasks_per_batch must be at least 1");
        }
        Ok(())
    }

    /// Checks the split against a session of `len` frames.
    pub fn validate_for_session(&self, len: usize) -> Result<()> {
        self.validate()?;
        if self.support + self.query > len {
            return Err(Error::TooShort {
                len,
                needed: self.support + self.query,
            });
        }
        Ok(())
    }
}

/// Arithmetic mean along rows of a `[T, D]` array.
pub(crate) fn row_mean(a: &Array2<f64>) -> Array1<f64> {
    a.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(a.ncols()))
}
