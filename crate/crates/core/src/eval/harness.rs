//! Per-video evaluation of a trained model on a pool of sessions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::metrics::{summarize, MetricsReport};
use super::signal::{estimate_hr, spectral_hr, HrOptions};
use crate::deploy::{adaptation_len, inductive_infer, transductive_infer, InferOptions};
use crate::error::{Error, Result};
use crate::network::{encode_frames, generate_synthetic_gradient, ModelParams, Network};
use crate::trainer::window_targets;
use crate::transduction::cosine_similarity;
use crate::types::SessionStream;

/// The five evaluation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalConfig {
    /// End-to-end trained model, no adaptation.
    Baseline,
    /// Meta-trained model, no adaptation.
    Inductive,
    ProtoOnly,
    SynthOnly,
    ProtoSynth,
}

impl EvalConfig {
    pub const ALL: [EvalConfig; 5] = [
        EvalConfig::Baseline,
        EvalConfig::Inductive,
        EvalConfig::ProtoOnly,
        EvalConfig::SynthOnly,
        EvalConfig::ProtoSynth,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EvalConfig::Baseline => "baseline",
            EvalConfig::Inductive => "inductive",
            EvalConfig::ProtoOnly => "proto-only",
            EvalConfig::SynthOnly => "synth-only",
            EvalConfig::ProtoSynth => "proto+synth",
        }
    }

    /// Adaptation options at `steps`; `None` for the non-adapting configs.
    pub fn options(&self, steps: usize, alpha: f64) -> Option<InferOptions> {
        let (proto, synth) = match self {
            EvalConfig::Baseline | EvalConfig::Inductive => return None,
            EvalConfig::ProtoOnly => (true, false),
            EvalConfig::SynthOnly => (false, true),
            EvalConfig::ProtoSynth => (true, true),
        };
        Some(InferOptions {
            steps,
            alpha,
            proto,
            synth,
            joint: false,
        })
    }
}

impl std::str::FromStr for EvalConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalConfig::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::BadConfig(format!("unknown configuration {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HrMethod {
    Peaks,
    /// Too few peaks; the periodogram maximum was used instead.
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoResult {
    pub id: String,
    pub predicted: f64,
    pub truth: f64,
    pub method: HrMethod,
    pub fell_back: bool,
}

/// Heart rate of a decoded trace; peaks first, periodogram if that fails.
pub fn predicted_hr(rppg: &[f64], fps: f64) -> Result<(f64, HrMethod)> {
    match estimate_hr(rppg, fps, HrOptions::rppg()) {
        Ok(h) => Ok((h.bpm, HrMethod::Peaks)),
        Err(Error::TooFewPeaks(_)) => Ok((spectral_hr(rppg, fps)?, HrMethod::Spectral)),
        Err(e) => Err(e),
    }
}

/// Ground-truth heart rate over frames `start..start + len`.
pub fn reference_hr(session: &SessionStream, start: usize, len: usize) -> Result<f64> {
    let seg = &session.ppg.samples()[start..start + len];
    Ok(estimate_hr(seg, session.fps(), HrOptions::reference())?.bpm)
}

/// Evaluates one session. Every configuration is scored on the same frames:
/// everything after the adaptation window.
pub fn evaluate_video(
    net: &Network,
    params: &ModelParams,
    session: &SessionStream,
    opts: Option<&InferOptions>,
) -> Result<VideoResult> {
    let start = adaptation_len(session.fps());
    let (rppg, fell_back) = match opts {
        Some(o) => {
            let out = transductive_infer(net, params, &session.frames, o)?;
            (out.rppg, out.fell_back)
        }
        None => {
            let rest = session.frames.window(start, session.len())?;
            (inductive_infer(net, params, &rest)?, false)
        }
    };
    let (predicted, method) = predicted_hr(&rppg, session.fps())?;
    Ok(VideoResult {
        id: session.id.clone(),
        predicted,
        truth: reference_hr(session, start, rppg.len())?,
        method,
        fell_back,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolResult {
    pub report: MetricsReport,
    pub videos: Vec<VideoResult>,
}

static WORKERS: AtomicUsize = AtomicUsize::new(1);

/// Threads used to evaluate videos of a pool concurrently (at least 1).
pub fn set_workers(n: usize) {
    WORKERS.store(n.max(1), Ordering::Relaxed);
}

pub fn workers() -> usize {
    WORKERS.load(Ordering::Relaxed)
}

pub fn evaluate_pool(
    net: &Network,
    params: &ModelParams,
    pool: &[SessionStream],
    opts: Option<&InferOptions>,
) -> Result<PoolResult> {
    let chunk = pool.len().div_ceil(workers()).max(1);
    let videos = std::thread::scope(|scope| {
        let handles: Vec<_> = pool
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| evaluate_video(net, params, s, opts))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect::<Vec<_>>();
    let pred: Vec<f64> = videos.iter().map(|v| v.predicted).collect();
    let truth: Vec<f64> = videos.iter().map(|v| v.truth).collect();
    Ok(PoolResult {
        report: summarize(&pred, &truth)?,
        videos,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub config: EvalConfig,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn get(&self, steps: usize, config: EvalConfig) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .find(|r| r.steps == steps && r.config == config)
            .map(|r| &r.report)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("L\tconfig\tMAE\tRMSE\tSD\tR\tn\n");
        for r in &self.rows {
            let rr = r.report.r.map_or("nan".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{rr}\t{}",
                r.steps,
                r.config.name(),
                r.report.mae,
                r.report.rmse,
                r.report.sd,
                r.report.n
            );
        }
        s
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Metrics for every `(L, config)` pair. The baseline row uses
/// `baseline` params when given (the meta-trained ones otherwise); the
/// non-adapting rows are computed once and repeated for every `L`.
pub fn sweep_adaptation_steps(
    net: &Network,
    params: &ModelParams,
    baseline: Option<&ModelParams>,
    pool: &[SessionStream],
    steps: &[usize],
    alpha: f64,
    configs: &[EvalConfig],
) -> Result<SweepTable> {
    let mut rows = Vec::new();
    let mut fixed: Vec<(EvalConfig, MetricsReport)> = Vec::new();
    for &cfg in configs {
        match cfg {
            EvalConfig::Baseline => fixed.push((cfg, evaluate_pool(net, baseline.unwrap_or(params), pool, None)?.report)),
            EvalConfig::Inductive => fixed.push((cfg, evaluate_pool(net, params, pool, None)?.report)),
            _ => {}
        }
    }
    for &l in steps {
        for &cfg in configs {
            let report = match fixed.iter().find(|(c, _)| *c == cfg) {
                Some((_, r)) => *r,
                None => {
                    let opts = cfg.options(l, alpha).expect("adapting configuration");
                    evaluate_pool(net, params, pool, Some(&opts))?.report
                }
            };
            rows.push(SweepRow {
                steps: l,
                config: cfg,
                report,
            });
        }
    }
    Ok(SweepTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointComparison {
    pub extractor_only: PoolResult,
    pub joint: PoolResult,
}

/// Adapting the encoder only against adapting encoder and estimator.
pub fn compare_joint_vs_extractor(
    net: &Network,
    params: &ModelParams,
    pool: &[SessionStream],
    steps: usize,
    alpha: f64,
) -> Result<JointComparison> {
    let extractor = InferOptions::transductive(steps, alpha);
    let joint = InferOptions {
        joint: true,
        ..extractor
    };
    Ok(JointComparison {
        extractor_only: evaluate_pool(net, params, pool, Some(&extractor))?,
        joint: evaluate_pool(net, params, pool, Some(&joint))?,
    })
}

/// Mean cosine similarity between the generated and the true latent
/// gradient over `windows_per_session` labeled windows of `len` frames from
/// each session, spread evenly along it.
pub fn gradient_fidelity(
    net: &Network,
    params: &ModelParams,
    sessions: &[SessionStream],
    len: usize,
    windows_per_session: usize,
) -> Result<f64> {
    let t = net.window();
    if len == 0 || !len.is_multiple_of(t) {
        return Err(Error::BadConfig(format!("fidelity window {len} is not a multiple of {t}")));
    }
    let mut sims = Vec::new();
    for s in sessions {
        if s.len() < len {
            return Err(Error::TooShort { len: s.len(), needed: len });
        }
        let room = s.len() - len;
        for k in 0..windows_per_session {
            let start = room * k / windows_per_session.max(1);
            let frames = s.frames.window(start, start + len)?;
            let targets = window_targets(&s.ppg.samples()[start..start + len], t, params.config.estimator.ranks)?;
            let z = encode_frames(net, &params.theta, &frames)?;
            let truth = net.ordinal_loss_grads(&params.phi, &z.0, &targets)?.dz;
            let generated = generate_synthetic_gradient(net, params, &z)?;
            sims.push(cosine_similarity(&generated, &truth));
        }
    }
    if sims.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Simple line chart of MAE, RMSE, SD and R against `L`, one panel per
/// metric and one line per configuration.
pub fn sweep_svg(table: &SweepTable) -> String {
    let mut steps: Vec<usize> = table.rows.iter().map(|r| r.steps).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut configs: Vec<EvalConfig> = Vec::new();
    for r in &table.rows {
        if !configs.contains(&r.config) {
            configs.push(r.config);
        }
    }
    let colours = ["#444444", "#1f77b4", "#2ca02c", "#ff7f0e", "#d62728"];
    let metrics: [(&str, fn(&MetricsReport) -> f64); 4] = [
        ("MAE", |m| m.mae),
        ("RMSE", |m| m.rmse),
        ("SD", |m| m.sd),
        ("R", |m| m.r.unwrap_or(f64::NAN)),
    ];
    let (pw, ph, pad) = (320.0, 220.0, 40.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        2.0 * pw,
        2.0 * ph + 30.0
    );
    let x_max = *steps.last().unwrap_or(&1) as f64;
    for (k, (name, get)) in metrics.iter().enumerate() {
        let ox = (k % 2) as f64 * pw;
        let oy = (k / 2) as f64 * ph;
        let vals: Vec<f64> = table.rows.iter().map(|r| get(&r.report)).filter(|v| v.is_finite()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
        let sx = |x: f64| ox + pad + (x / x_max.max(1.0)) * (pw - 2.0 * pad);
        let sy = |y: f64| oy + ph - pad - (y - lo) / (hi - lo) * (ph - 2.0 * pad);
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
            ox + pad,
            oy + pad,
            pw - 2.0 * pad,
            ph - 2.0 * pad
        );
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">{name} ({lo:.2} to {hi:.2})</text>", ox + pad, oy + pad - 6.0);
        for &l in &steps {
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">{l}</text>", sx(l as f64) - 4.0, oy + ph - pad + 14.0);
        }
        for (ci, cfg) in configs.iter().enumerate() {
            let pts: Vec<String> = steps
                .iter()
                .filter_map(|&l| table.get(l, *cfg).map(|m| (l, get(m))))
                .filter(|(_, v)| v.is_finite())
                .map(|(l, v)| format!("{:.1},{:.1}", sx(l as f64), sy(v)))
                .collect();
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
                colours[ci % colours.len()],
                pts.join(" ")
            );
        }
    }
    for (ci, cfg) in configs.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>",
            pad + ci as f64 * 110.0,
            2.0 * ph + 20.0,
            colours[ci % colours.len()],
            cfg.name()
        );
    }
    svg.push_str("</svg>\n");
    svg
}
