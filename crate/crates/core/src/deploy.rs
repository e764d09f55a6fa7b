//! Label-free inference on a new stream: adapt the encoder on the first two
//! seconds, then decode the rest window by window.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{estimate_hr, HrOptions};
use crate::network::{covering_windows, encode_frames, generate_head_gradient, ModelParams, Network, ParamBlock};
use crate::ordinal::{decode_ordinal, sigmoid, RankProbabilities};
use crate::trainer::{adaptation_grad_at_z, adaptation_phase, AdaptTerms};
use crate::types::{EpisodeWindow, FrameSequence};

pub const ADAPT_SECONDS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub steps: usize,
    pub alpha: f64,
    pub proto: bool,
    pub synth: bool,
    /// Also adapt the estimator through the head-side generator.
    pub joint: bool,
}

impl InferOptions {
    pub fn transductive(steps: usize, alpha: f64) -> Self {
        Self {
            steps,
            alpha,
            proto: true,
            synth: true,
            joint: false,
        }
    }

    pub fn terms(&self) -> AdaptTerms {
        AdaptTerms::deployment(self.proto, self.synth)
    }
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    /// Decoded values for frames `start_frame..start_frame + rppg.len()`.
    pub rppg: Vec<f64>,
    pub start_frame: usize,
    pub theta: ParamBlock,
    pub phi: ParamBlock,
    /// Adaptation produced a non-finite gradient and was abandoned.
    pub fell_back: bool,
}

/// Frames used for adaptation at a frame rate: `round(2 * fps)`.
pub fn adaptation_len(fps: f64) -> usize {
    (ADAPT_SECONDS * fps).round() as usize
}

/// Decodes hop-`T` windows; trailing frames that do not fill a window are
/// dropped.
pub fn decode_stream(net: &Network, theta: &ParamBlock, phi: &ParamBlock, frames: &FrameSequence) -> Result<Vec<f64>> {
    let t = net.window();
    let n = frames.len() / t * t;
    if n == 0 {
        return Err(Error::StreamTooShort {
            len: frames.len(),
            needed: t,
        });
    }
    let mut out = Vec::with_capacity(n);
    for w in 0..n / t {
        let z = encode_frames(net, theta, &frames.window(w * t, (w + 1) * t)?)?;
        let (logits, _) = net.estimator.forward(phi, &z.0)?;
        out.extend(decode_ordinal(&RankProbabilities(logits.mapv(sigmoid))));
    }
    Ok(out)
}

/// Pure forward pass over the whole stream.
pub fn inductive_infer(net: &Network, params: &ModelParams, frames: &FrameSequence) -> Result<Vec<f64>> {
    decode_stream(net, &params.theta, &params.phi, frames)
}

/// Encoder and estimator adapted together: the encoder step is the usual
/// label-free one, the estimator follows the head-side synthetic gradient.
fn joint_adaptation(
    net: &Network,
    params: &ModelParams,
    support: &FrameSequence,
    opts: &InferOptions,
) -> Result<(ParamBlock, ParamBlock)> {
    let mut current = params.clone();
    let t = net.window();
    for _ in 0..opts.steps {
        let (z, cache) = net
            .encoder
            .forward(&current.theta, support, crate::network::Mode::Eval)?;
        let dz = adaptation_grad_at_z(net, &current, &z, None, opts.terms())?;
        let mut dphi = vec![0.0; current.phi.len()];
        for start in covering_windows(z.nrows(), t)? {
            let zw = z.slice(s![start..start + t, ..]).to_owned();
            let (logits, ecache) = net.estimator.forward(&current.phi, &zw)?;
            let dlogits: Array2<f64> = generate_head_gradient(net, &current, &logits)?;
            let (gp, _) = net.estimator.backward(&current.phi, &ecache, &dlogits)?;
            for (a, b) in dphi.iter_mut().zip(gp) {
                *a += b;
            }
        }
        let dtheta = net.encoder.backward(&current.theta, &cache, &dz)?;
        current.theta.descend(&dtheta, opts.alpha)?;
        current.phi.descend(&dphi, opts.alpha)?;
    }
    Ok((current.theta, current.phi))
}

/// Adapts a private copy of the encoder on the first `round(2 * fps)`
/// frames without labels, then decodes the remainder. The estimator,
/// generators and prototype are never modified (unless `joint` is set, in
/// which case only the returned copy of the estimator changes).
pub fn transductive_infer(
    net: &Network,
    params: &ModelParams,
    frames: &FrameSequence,
    opts: &InferOptions,
) -> Result<InferOutput> {
    let n_adapt = adaptation_len(frames.fps());
    let needed = n_adapt + net.window();
    if frames.len() < needed || n_adapt < net.window() {
        return Err(Error::StreamTooShort {
            len: frames.len(),
            needed: needed.max(2 * net.window()),
        });
    }
    let support = frames.window(0, n_adapt)?;
    let rest = frames.window(n_adapt, frames.len())?;
    let adapted = if opts.joint {
        joint_adaptation(net, params, &support, opts)
    } else {
        let window = EpisodeWindow {
            start: 0,
            frames: support,
            target: None,
        };
        adaptation_phase(net, params, &window, opts.alpha, opts.steps, opts.terms()).map(|th| (th, params.phi.clone()))
    };
    let (theta, phi, fell_back) = match adapted {
        Ok((theta, phi)) => (theta, phi, false),
        Err(e) if e.is_numeric() => (params.theta.clone(), params.phi.clone(), true),
        Err(e) => return Err(e),
    };
    let rppg = match decode_stream(net, &theta, &phi, &rest) {
        Ok(r) => r,
        Err(e) if e.is_numeric() && !fell_back => {
            return transductive_infer(net, params, frames, &InferOptions { steps: 0, ..*opts }).map(|mut o| {
                o.fell_back = true;
                o
            })
        }
        Err(e) => return Err(e),
    };
    Ok(InferOutput {
        rppg,
        start_frame: n_adapt,
        theta,
        phi,
        fell_back,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub id: String,
    pub predicted_hr: Option<f64>,
    pub n_peaks: usize,
    pub windows: usize,
    pub start_frame: usize,
    pub fps: f64,
    pub steps: usize,
    pub alpha: f64,
    pub proto: bool,
    pub synth: bool,
    pub joint: bool,
    pub fell_back: bool,
}

impl InferSummary {
    pub fn new(id: &str, out: &InferOutput, fps: f64, window: usize, opts: &InferOptions) -> Self {
        let hr = estimate_hr(&out.rppg, fps, HrOptions::rppg()).ok();
        Self {
            id: id.to_string(),
            predicted_hr: hr.map(|h| h.bpm),
            n_peaks: hr.map_or(0, |h| h.n_peaks),
            windows: out.rppg.len() / window.max(1),
            start_frame: out.start_frame,
            fps,
            steps: opts.steps,
            alpha: opts.alpha,
            proto: opts.proto,
            synth: opts.synth,
            joint: opts.joint,
            fell_back: out.fell_back,
        }
    }
}

/// Writes `frame<TAB>value` rows.
pub fn write_trace(path: impl AsRef<Path>, start_frame: usize, values: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "frame\tvalue")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{}\t{v}", start_frame + i)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trace written by [`write_trace`]; returns the first frame index
/// and the values.
pub fn read_trace(path: impl AsRef<Path>) -> Result<(usize, Vec<f64>)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut start = None;
    let mut values = Vec::new();
    for line in fs::read_to_string(path)?.lines().skip(1) {
        let mut f = line.split('\t');
        let (Some(i), Some(v)) = (f.next(), f.next()) else {
            continue;
        };
        let i: usize = i.parse().map_err(|_| Error::DecodeError(format!("frame index {i:?}")))?;
        start.get_or_insert(i);
        values.push(v.parse().map_err(|_| Error::DecodeError(format!("value {v:?}")))?);
    }
    Ok((start.ok_or_else(|| Error::DecodeError(format!("{} is empty", path.display())))?, values))
}
