//! Episodic meta-training: end-to-end pretraining, then per task an
//! `L`-step adaptation of the encoder on the support window followed by a
//! labeled learning phase on the query window.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::checkpoint::Checkpoint;
use crate::network::{covering_windows, init_params, Mode, ModelConfig, ModelParams, Network, ParamBlock};
use crate::ordinal::window_target;
use crate::transduction::{proto_loss, syn_loss, task_prototype, update_global_prototype, Prototype};
use crate::types::{EpisodeWindow, HyperParams, LatentSequence, OrdinalTarget, SessionStream};

/// Which gradient sources drive an adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptTerms {
    pub proto: bool,
    pub synth: bool,
    /// Supervised ordinal gradient on the support targets (training only).
    pub labels: bool,
}

impl AdaptTerms {
    pub const NONE: Self = Self {
        proto: false,
        synth: false,
        labels: false,
    };

    /// All three sources, as in meta-training.
    pub fn training() -> Self {
        Self {
            proto: true,
            synth: true,
            labels: true,
        }
    }

    /// Label-free sources only.
    pub fn deployment(proto: bool, synth: bool) -> Self {
        Self {
            proto,
            synth,
            labels: false,
        }
    }

    pub fn any(&self) -> bool {
        self.proto || self.synth || self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Plain end-to-end supervised training of encoder and estimator.
    Baseline,
    /// Adaptation phase plus learning phase.
    Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub model: ModelConfig,
    pub epochs: usize,
    pub mode: TrainMode,
    /// Gradient sources used by the adaptation phase during training.
    pub adapt: AdaptTerms,
    /// Random episodes drawn per task each epoch; `None` walks every
    /// non-overlapping episode once.
    pub episodes_per_task: Option<usize>,
    /// Weight of the current batch in the normalization running moments.
    pub norm_momentum: f64,
    pub synth_scale: f64,
    /// Co-train the head-side generator used for joint adaptation.
    pub train_head_generator: bool,
    /// Write a checkpoint every this many epochs (and after the last).
    pub checkpoint_every: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// Full-size model with the default step sizes.
    pub fn full() -> Self {
        Self {
            hyper: HyperParams::default(),
            model: ModelConfig::full(),
            epochs: 20,
            mode: TrainMode::Meta,
            adapt: AdaptTerms::training(),
            episodes_per_task: None,
            norm_momentum: 0.05,
            synth_scale: crate::network::DEFAULT_SYNTH_SCALE,
            train_head_generator: true,
            checkpoint_every: 1,
            checkpoint: None,
        }
    }

    /// Shrunk model and episode budget for a single CPU core.
    pub fn desk() -> Self {
        Self {
            hyper: HyperParams {
                eta: DESK_ETA,
                alpha: DESK_ALPHA,
                ..HyperParams::default()
            },
            model: ModelConfig::desk(),
            episodes_per_task: Some(5),
            ..Self::full()
        }
    }

    /// End-to-end training with no adaptation phase and no pretraining split.
    pub fn into_baseline(mut self) -> Self {
        self.mode = TrainMode::Baseline;
        self.adapt = AdaptTerms::NONE;
        self.hyper.adapt_steps = 0;
        self.train_head_generator = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::BadConfig("epochs must be at least 1".into()));
        }
        if self.hyper.window != self.model.window() || self.hyper.ranks != self.model.ranks() {
            return Err(Error::BadConfig(format!(
                "hyper-parameters use T={} S={}, model T={} S={}",
                self.hyper.window,
                self.hyper.ranks,
                self.model.window(),
                self.model.ranks()
            )));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::BadConfig("norm_momentum outside [0, 1]".into()));
        }
        if !(self.synth_scale > 0.0 && self.synth_scale.is_finite()) {
            return Err(Error::BadConfig("synth_scale must be positive".into()));
        }
        if self.episodes_per_task == Some(0) || self.checkpoint_every == 0 {
            return Err(Error::BadConfig("episode and checkpoint counts must be positive".into()));
        }
        Ok(())
    }
}

pub const DESK_ETA: f64 = 1e-2;
pub const DESK_ALPHA: f64 = 1e-5;

/// Ordinal targets of consecutive `window`-sample chunks.
pub fn window_targets(samples: &[f64], window: usize, ranks: usize) -> Result<Vec<OrdinalTarget>> {
    if window == 0 || samples.is_empty() || !samples.len().is_multiple_of(window) {
        return Err(Error::ShapeMismatch(format!(
            "{} samples is not a whole number of {window}-sample windows",
            samples.len()
        )));
    }
    samples.chunks(window).map(|c| window_target(c, ranks)).collect()
}

fn targets_of(win: &EpisodeWindow, net: &Network) -> Result<Vec<OrdinalTarget>> {
    let ppg = win.target.as_ref().ok_or(Error::MissingLabels)?;
    window_targets(ppg.samples(), net.window(), net.config.ranks())
}

/// Latent-space gradient of one adaptation step at `z`.
pub(crate) fn adaptation_grad_at_z(
    net: &Network,
    params: &ModelParams,
    z: &Array2<f64>,
    targets: Option<&[OrdinalTarget]>,
    terms: AdaptTerms,
) -> Result<Array2<f64>> {
    let mut dz = Array2::<f64>::zeros(z.dim());
    if terms.proto {
        let (_, g) = proto_loss(&LatentSequence(z.clone()), &params.prototype)?;
        dz += &g;
    }
    if terms.labels {
        let targets = targets.ok_or(Error::MissingLabels)?;
        dz += &net.ordinal_loss_grads(&params.phi, z, targets)?.dz;
    }
    if terms.synth {
        dz += &crate::network::generate_synthetic_gradient(net, params, &LatentSequence(z.clone()))?;
    }
    if dz.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("adaptation gradient"));
    }
    Ok(dz)
}

/// `steps` descent steps on the encoder only, each re-encoding the support
/// with the current parameters. Returns the adapted encoder parameters;
/// everything else in `params` is read-only by construction.
pub fn adaptation_phase(
    net: &Network,
    params: &ModelParams,
    support: &EpisodeWindow,
    alpha: f64,
    steps: usize,
    terms: AdaptTerms,
) -> Result<ParamBlock> {
    let targets = if terms.labels {
        Some(targets_of(support, net)?)
    } else {
        None
    };
    let mut theta = params.theta.clone();
    if steps == 0 || !terms.any() || alpha == 0.0 {
        return Ok(theta);
    }
    let mut current = params.clone();
    for _ in 0..steps {
        let (z, cache) = net.encoder.forward(&theta, &support.frames, Mode::Eval)?;
        let dz = adaptation_grad_at_z(net, &current, &z, targets.as_deref(), terms)?;
        let grad = net.encoder.backward(&theta, &cache, &dz)?;
        theta.descend(&grad, alpha)?;
        current.theta = theta.clone();
    }
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnOptions {
    pub eta: f64,
    pub norm_momentum: f64,
    /// Regress the generator on the true latent gradient.
    pub generator: bool,
    pub head_generator: bool,
    /// Update encoder and estimator.
    pub backbone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnStats {
    pub l_ord: f64,
    pub l_syn: f64,
    pub l_proto: f64,
    /// Mean latent of the query, for the prototype update.
    pub task_mean: Array1<f64>,
}

/// Regresses a generator on a target gradient window by window; returns the
/// mean loss. Running moments are committed window by window.
fn regress_generator(
    gen: &crate::network::Generator,
    psi: &mut ParamBlock,
    input: &Array2<f64>,
    target: &Array2<f64>,
    eta: f64,
    momentum: f64,
) -> Result<f64> {
    let t = gen.config().window;
    let starts = covering_windows(input.nrows(), t)?;
    let n = starts.len() as f64;
    let mut grad = vec![0.0; psi.len()];
    let mut loss = 0.0;
    for start in starts {
        let x = input.slice(s![start..start + t, ..]).to_owned();
        let y = target.slice(s![start..start + t, ..]).to_owned();
        let (g, cache) = gen.forward(psi, &x, Mode::Train { momentum })?;
        let (l, dg) = syn_loss(&g, &y)?;
        loss += l / n;
        for (a, b) in grad.iter_mut().zip(gen.backward(psi, &cache, &(dg / n))?) {
            *a += b;
        }
        if let Some(b) = cache.new_buffers {
            psi.buffers = b;
        }
    }
    psi.descend(&grad, eta)?;
    Ok(loss)
}

/// Steps (1)-(3) of the learning phase on one labeled query: generator
/// regression against the frozen true gradient at the standardized query
/// latents, then
/// descent of encoder and estimator on the ordinal loss. All gradients are
/// taken at the same parameters.
pub fn learning_step(
    net: &Network,
    params: &mut ModelParams,
    query: &EpisodeWindow,
    opts: &LearnOptions,
) -> Result<LearnStats> {
    let targets = targets_of(query, net)?;
    let momentum = Mode::Train {
        momentum: opts.norm_momentum,
    };
    let (z, cache) = net.encoder.forward(&params.theta, &query.frames, momentum)?;
    let og = net.ordinal_loss_grads(&params.phi, &z, &targets)?;
    let zs = LatentSequence(z);
    let (l_proto, _) = proto_loss(&zs, &params.prototype)?;
    let task_mean = task_prototype(&zs)?;

    let mut l_syn = 0.0;
    if opts.generator {
        let target = &og.dx * params.synth_scale;
        l_syn = regress_generator(
            &net.generator,
            &mut params.psi,
            &og.x,
            &target,
            opts.eta,
            opts.norm_momentum,
        )?;
    }
    if opts.head_generator {
        let logits = ndarray::concatenate(ndarray::Axis(0), &og.logits.iter().map(|a| a.view()).collect::<Vec<_>>())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let dlogits =
            ndarray::concatenate(ndarray::Axis(0), &og.dlogits.iter().map(|a| a.view()).collect::<Vec<_>>())
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        regress_generator(
            &net.head_generator,
            &mut params.psi_head,
            &logits,
            &(dlogits * params.synth_scale),
            opts.eta,
            opts.norm_momentum,
        )?;
    }
    if opts.backbone {
        let dtheta = net.encoder.backward(&params.theta, &cache, &og.dz)?;
        if let Some(b) = cache.new_buffers {
            params.theta.buffers = b;
        }
        params.theta.descend(&dtheta, opts.eta)?;
        params.phi.descend(&og.dphi, opts.eta)?;
    }
    Ok(LearnStats {
        l_ord: og.loss,
        l_syn,
        l_proto,
        task_mean,
    })
}

/// The full learning phase on a single query: [`learning_step`] followed by
/// the prototype update with this query as the batch.
pub fn learning_phase(
    net: &Network,
    params: &mut ModelParams,
    query: &EpisodeWindow,
    opts: &LearnOptions,
    gamma: f64,
) -> Result<LearnStats> {
    let stats = learning_step(net, params, query, opts)?;
    params.prototype = update_global_prototype(&params.prototype, std::slice::from_ref(&stats.task_mean), gamma)?;
    Ok(stats)
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub l_ord: f64,
    pub l_syn: f64,
    pub l_proto: f64,
    pub wall_s: f64,
}

pub const LOG_HEADER: &str = "phase\tepoch\tl_ord\tl_syn\tl_proto\twall_s";

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.phase, self.epoch, self.l_ord, self.l_syn, self.l_proto, self.wall_s
        )
    }
}

pub fn write_metrics_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "{LOG_HEADER}")?;
    for row in log {
        writeln!(out, "{}", row.to_line())?;
    }
    Ok(())
}

/// Parses a metrics log written by [`write_metrics_log`].
pub fn read_metrics_log(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::DecodeError(format!("metrics row {l:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::DecodeError(e.to_string()));
            Ok(EpochLog {
                phase: f[0].to_string(),
                epoch: f[1].parse().map_err(|_| Error::DecodeError(format!("epoch {:?}", f[1])))?,
                l_ord: num(f[2])?,
                l_syn: num(f[3])?,
                l_proto: num(f[4])?,
                wall_s: num(f[5])?,
            })
        })
        .collect()
}

/// Episode `(task, start frame)` pairs for one epoch, shuffled.
pub fn epoch_plan(tasks: &[SessionStream], cfg: &TrainConfig, global_epoch: usize) -> Vec<(usize, usize)> {
    let span = cfg.hyper.support + cfg.hyper.query;
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.hyper
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(global_epoch as u64 + 1),
    );
    let mut plan = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let last = task.len() - span;
        match cfg.episodes_per_task {
            Some(k) => plan.extend((0..k).map(|_| (i, rng.random_range(0..=last)))),
            None => plan.extend((0..=last).step_by(span).map(|s| (i, s))),
        }
    }
    plan.shuffle(&mut rng);
    plan
}

fn episode_windows(task: &SessionStream, start: usize, hyper: &HyperParams) -> Result<(EpisodeWindow, EpisodeWindow)> {
    let part = |a: usize, len: usize| -> Result<EpisodeWindow> {
        Ok(EpisodeWindow {
            start: a,
            frames: task.frames.window(a, a + len)?,
            target: Some(task.ppg.window(a, a + len)?),
        })
    };
    Ok((part(start, hyper.support)?, part(start + hyper.support, hyper.query)?))
}

/// End-to-end descent on the ordinal loss over whole episodes.
pub fn pretrain(net: &Network, params: &mut ModelParams, dataset: &[SessionStream], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut log = Vec::new();
    for epoch in 0..cfg.hyper.pretrain_epochs {
        log.push(run_epoch(net, params, dataset, cfg, epoch, true)?);
    }
    Ok(log)
}

/// Sets every normalization running moment from one batch, so training
/// starts from data statistics rather than the identity.
pub fn warm_start_norms(net: &Network, params: &mut ModelParams, window: &EpisodeWindow) -> Result<()> {
    let targets = targets_of(window, net)?;
    let full = Mode::Train { momentum: 1.0 };
    let (_, cache) = net.encoder.forward(&params.theta, &window.frames, full)?;
    if let Some(b) = cache.new_buffers {
        params.theta.buffers = b;
    }
    let (z, _) = net.encoder.forward(&params.theta, &window.frames, Mode::Eval)?;
    let t = net.window();
    let st = crate::network::standardize(&z.slice(s![0..t, ..]).to_owned());
    let (_, gc) = net.generator.forward(&params.psi, &st.x, full)?;
    if let Some(b) = gc.new_buffers {
        params.psi.buffers = b;
    }
    let og = net.ordinal_loss_grads(&params.phi, &z, &targets)?;
    let (_, hc) = net.head_generator.forward(&params.psi_head, &og.logits[0], full)?;
    if let Some(b) = hc.new_buffers {
        params.psi_head.buffers = b;
    }
    Ok(())
}

/// Sets the prototype to the mean task latent over one episode per task.
pub fn seed_prototype(net: &Network, params: &mut ModelParams, dataset: &[SessionStream], cfg: &TrainConfig) -> Result<()> {
    let mut means = Vec::with_capacity(dataset.len());
    for task in dataset {
        let (_, query) = episode_windows(task, 0, &cfg.hyper)?;
        let z = crate::network::encode_frames(net, &params.theta, &query.frames)?;
        means.push(task_prototype(&z)?);
    }
    let seeded = update_global_prototype(&Prototype::zeros(params.prototype.dim()), &means, 0.0)?;
    params.prototype.value = seeded.value;
    Ok(())
}

fn run_epoch(
    net: &Network,
    params: &mut ModelParams,
    dataset: &[SessionStream],
    cfg: &TrainConfig,
    global_epoch: usize,
    pretraining: bool,
) -> Result<EpochLog> {
    let clock = Instant::now();
    let plan = epoch_plan(dataset, cfg, global_epoch);
    let meta = !pretraining && cfg.mode == TrainMode::Meta;
    let opts = LearnOptions {
        eta: cfg.hyper.eta,
        norm_momentum: cfg.norm_momentum,
        generator: meta,
        head_generator: meta && cfg.train_head_generator,
        backbone: true,
    };
    let (mut l_ord, mut l_syn, mut l_proto) = (0.0, 0.0, 0.0);
    for batch in plan.chunks(cfg.hyper.tasks_per_batch) {
        let mut means = Vec::with_capacity(batch.len());
        for &(task, start) in batch {
            let (support, query) = episode_windows(&dataset[task], start, &cfg.hyper)?;
            let stats = if pretraining {
                let whole = EpisodeWindow {
                    start,
                    frames: dataset[task]
                        .frames
                        .window(start, start + cfg.hyper.support + cfg.hyper.query)?,
                    target: Some(
                        dataset[task]
                            .ppg
                            .window(start, start + cfg.hyper.support + cfg.hyper.query)?,
                    ),
                };
                learning_step(net, params, &whole, &opts)?
            } else {
                if meta && cfg.hyper.adapt_steps > 0 {
                    params.theta =
                        adaptation_phase(net, params, &support, cfg.hyper.alpha, cfg.hyper.adapt_steps, cfg.adapt)?;
                }
                learning_step(net, params, &query, &opts)?
            };
            l_ord += stats.l_ord;
            l_syn += stats.l_syn;
            l_proto += stats.l_proto;
            means.push(stats.task_mean);
        }
        if meta {
            params.prototype = update_global_prototype(&params.prototype, &means, cfg.hyper.gamma)?;
        }
    }
    let n = plan.len().max(1) as f64;
    Ok(EpochLog {
        phase: if pretraining { "pretrain" } else { "train" }.to_string(),
        epoch: if pretraining {
            global_epoch + 1
        } else {
            global_epoch + 1 - cfg.hyper.pretrain_epochs
        },
        l_ord: l_ord / n,
        l_syn: l_syn / n,
        l_proto: l_proto / n,
        wall_s: clock.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Pretraining followed by `cfg.epochs` meta-training epochs.
pub fn meta_train(dataset: &[SessionStream], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut params = init_params(&cfg.model, cfg.hyper.seed)?;
    params.synth_scale = cfg.synth_scale;
    resume_training(dataset, cfg, params, 0, Vec::new(), |_| {})
}

/// Continues training from `completed` finished epochs (pretraining epochs
/// count first). `on_epoch` sees every new log row.
pub fn resume_training(
    dataset: &[SessionStream],
    cfg: &TrainConfig,
    mut params: ModelParams,
    completed: usize,
    mut log: Vec<EpochLog>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    for task in dataset {
        cfg.hyper.validate_for_session(task.len())?;
    }
    if params.config != cfg.model {
        return Err(Error::BadConfig("checkpoint model differs from the configured model".into()));
    }
    let net = Network::new(&cfg.model)?;
    let pre = cfg.hyper.pretrain_epochs;
    let total = pre + cfg.epochs;
    if completed == 0 {
        let first = epoch_plan(dataset, cfg, 0)[0];
        let (_, query) = episode_windows(&dataset[first.0], first.1, &cfg.hyper)?;
        warm_start_norms(&net, &mut params, &query)?;
    }
    for g in completed..total {
        let pretraining = g < pre;
        if g == pre && cfg.mode == TrainMode::Meta && params.prototype.update_count == 0 {
            seed_prototype(&net, &mut params, dataset, cfg)?;
        }
        let row = run_epoch(&net, &mut params, dataset, cfg, g, pretraining)?;
        on_epoch(&row);
        log.push(row);
        if let Some(path) = &cfg.checkpoint {
            if (g + 1) % cfg.checkpoint_every == 0 || g + 1 == total {
                let mut ckpt = Checkpoint::new(params.clone(), cfg.hyper.clone());
                ckpt.completed_epochs = g + 1;
                ckpt.notes = format!("{:?}", cfg.mode).to_lowercase();
                ckpt.save(path)?;
            }
        }
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::GeneratorConfig;
    use crate::network::{EncoderConfig, EstimatorConfig};
    use crate::synthdata::{render_session, SynthTaskSpec};

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: 8,
                widths: vec![4, 6, 8],
            },
            estimator: EstimatorConfig {
                input_dim: 8,
                hidden: 6,
                mlp_width: 8,
                ranks: 8,
            },
            generator: GeneratorConfig::hourglass(8, 12),
            head_generator: GeneratorConfig::hourglass(8, 12),
        }
    }

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            hyper: HyperParams {
                eta: 1e-2,
                alpha: 1e-3,
                window: 12,
                ranks: 8,
                support: 12,
                query: 24,
                pretrain_epochs: 1,
                adapt_steps: 2,
                tasks_per_batch: 2,
                ..HyperParams::default()
            },
            model: tiny_model(),
            epochs: 2,
            episodes_per_task: Some(2),
            ..TrainConfig::desk()
        }
    }

    fn tiny_tasks(n: usize) -> Vec<SessionStream> {
        (0..n)
            .map(|i| render_session(&SynthTaskSpec::random(format!("t{i}"), i as u64 + 10, 4.0, 30.0, 8)).unwrap())
            .collect()
    }

    fn episode(task: &SessionStream, cfg: &TrainConfig) -> (EpisodeWindow, EpisodeWindow) {
        episode_windows(task, 0, &cfg.hyper).unwrap()
    }

    fn fresh(cfg: &TrainConfig) -> (Network, ModelParams) {
        let net = Network::new(&cfg.model).unwrap();
        let mut p = init_params(&cfg.model, 1).unwrap();
        for (i, v) in p.prototype.value.iter_mut().enumerate() {
            *v = 0.1 * i as f64;
        }
        // a non-trivial generator output layer
        let n = p.psi.values.len();
        for (k, v) in p.psi.values[n - 8 - 8 * 8 * 3..n].iter_mut().enumerate() {
            *v = (k as f64 * 0.37).sin() * 0.1;
        }
        (net, p)
    }

    #[test]
    fn zero_steps_or_zero_rate_leave_theta_alone() {
        let cfg = tiny_config();
        let (net, p) = fresh(&cfg);
        let (support, _) = episode(&tiny_tasks(1)[0], &cfg);
        let a = adaptation_phase(&net, &p, &support, 1e-2, 0, AdaptTerms::training()).unwrap();
        assert_eq!(a, p.theta);
        let b = adaptation_phase(&net, &p, &support, 0.0, 10, AdaptTerms::training()).unwrap();
        assert_eq!(b, p.theta);
        let c = adaptation_phase(&net, &p, &support, 1e-2, 10, AdaptTerms::NONE).unwrap();
        assert_eq!(c, p.theta);
    }

    #[test]
    fn labels_required_when_requested() {
        let cfg = tiny_config();
        let (net, p) = fresh(&cfg);
        let (support, _) = episode(&tiny_tasks(1)[0], &cfg);
        assert!(matches!(
            adaptation_phase(&net, &p, &support.unlabeled(), 1e-2, 1, AdaptTerms::training()),
            Err(Error::MissingLabels)
        ));
    }

    #[test]
    fn one_step_is_the_sum_of_its_parts() {
        let cfg = tiny_config();
        let (net, p) = fresh(&cfg);
        let (support, _) = episode(&tiny_tasks(1)[0], &cfg);
        let alpha = 1e-2;
        let joint = adaptation_phase(&net, &p, &support, alpha, 1, AdaptTerms::training()).unwrap();
        let mut summed = p.theta.values.clone();
        for terms in [
            AdaptTerms { proto: true, ..AdaptTerms::NONE },
            AdaptTerms { synth: true, ..AdaptTerms::NONE },
            AdaptTerms { labels: true, ..AdaptTerms::NONE },
        ] {
            let single = adaptation_phase(&net, &p, &support, alpha, 1, terms).unwrap();
            for ((s, a), b) in summed.iter_mut().zip(&single.values).zip(&p.theta.values) {
                *s += a - b;
            }
        }
        let diff = joint
            .values
            .iter()
            .zip(&summed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
        assert_ne!(joint.values, p.theta.values);
    }

    #[test]
    fn learning_phase_partitions_and_descent() {
        let cfg = tiny_config();
        let (net, p0) = fresh(&cfg);
        let (_, query) = episode(&tiny_tasks(1)[0], &cfg);
        let targets = targets_of(&query, &net).unwrap();
        let loss = |p: &ModelParams| {
            let z = crate::network::encode_frames(&net, &p.theta, &query.frames).unwrap();
            net.ordinal_loss_grads(&p.phi, &z.0, &targets).unwrap().loss
        };

        // eta = 0: parameters keep their values, the prototype still moves
        let mut p = p0.clone();
        let opts = LearnOptions {
            eta: 0.0,
            norm_momentum: 0.0,
            generator: true,
            head_generator: true,
            backbone: true,
        };
        learning_phase(&net, &mut p, &query, &opts, 0.8).unwrap();
        assert_eq!(p.theta, p0.theta);
        assert_eq!(p.phi, p0.phi);
        assert_eq!(p.psi, p0.psi);
        assert_eq!(p.prototype.update_count, 1);

        // gamma = 1: prototype value fixed
        let mut p = p0.clone();
        learning_phase(&net, &mut p, &query, &LearnOptions { eta: 1e-4, ..opts }, 1.0).unwrap();
        assert_eq!(p.prototype.value, p0.prototype.value);
        assert!(loss(&p) < loss(&p0));

        // generator-only step never touches theta or phi
        let mut p = p0.clone();
        learning_step(
            &net,
            &mut p,
            &query,
            &LearnOptions {
                eta: 1e-2,
                backbone: false,
                ..opts
            },
        )
        .unwrap();
        assert_eq!(p.theta.fingerprint(), p0.theta.fingerprint());
        assert_eq!(p.phi.fingerprint(), p0.phi.fingerprint());
        assert_ne!(p.psi.fingerprint(), p0.psi.fingerprint());
    }

    #[test]
    fn pretraining_leaves_generator_and_prototype() {
        let mut cfg = tiny_config();
        let tasks = tiny_tasks(2);
        let (net, p0) = fresh(&cfg);
        cfg.hyper.pretrain_epochs = 0;
        let mut p = p0.clone();
        assert!(pretrain(&net, &mut p, &tasks, &cfg).unwrap().is_empty());
        assert_eq!(p, p0);
        cfg.hyper.pretrain_epochs = 1;
        let log = pretrain(&net, &mut p, &tasks, &cfg).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(p.psi, p0.psi);
        assert_eq!(p.prototype, p0.prototype);
        assert_ne!(p.theta, p0.theta);
        assert!(matches!(pretrain(&net, &mut p, &[], &cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn seeded_training_is_deterministic_and_resumable() {
        let tasks = tiny_tasks(2);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.checkpoint = Some(dir.path().join("ckpt.json"));
        let a = meta_train(&tasks, &cfg).unwrap();
        let b = meta_train(&tasks, &cfg).unwrap();
        let strip = |l: &[EpochLog]| {
            l.iter()
                .map(|r| (r.phase.clone(), r.epoch, r.l_ord, r.l_syn, r.l_proto))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), 3);

        // stop after two epochs, then resume from the checkpoint
        let mut short = cfg.clone();
        short.epochs = 1;
        short.checkpoint = Some(dir.path().join("short.json"));
        let part = meta_train(&tasks, &short).unwrap();
        let ckpt = Checkpoint::load(dir.path().join("short.json")).unwrap();
        assert_eq!(ckpt.completed_epochs, 2);
        let mut resume_cfg = cfg.clone();
        resume_cfg.checkpoint = None;
        let rest = resume_training(&tasks, &resume_cfg, ckpt.params, ckpt.completed_epochs, part.log, |_| {}).unwrap();
        assert_eq!(strip(&rest.log), strip(&a.log));
        assert_eq!(rest.params, a.params);
    }

    #[test]
    fn baseline_with_no_pretraining_is_plain_supervised_training() {
        let tasks = tiny_tasks(2);
        let mut cfg = tiny_config().into_baseline();
        cfg.hyper.pretrain_epochs = 0;
        let out = meta_train(&tasks, &cfg).unwrap();

        let net = Network::new(&cfg.model).unwrap();
        let mut p = init_params(&cfg.model, cfg.hyper.seed).unwrap();
        p.synth_scale = cfg.synth_scale;
        let first = epoch_plan(&tasks, &cfg, 0)[0];
        warm_start_norms(&net, &mut p, &episode_windows(&tasks[first.0], first.1, &cfg.hyper).unwrap().1).unwrap();
        let opts = LearnOptions {
            eta: cfg.hyper.eta,
            norm_momentum: cfg.norm_momentum,
            generator: false,
            head_generator: false,
            backbone: true,
        };
        for epoch in 0..cfg.epochs {
            for (task, start) in epoch_plan(&tasks, &cfg, epoch) {
                let (_, q) = episode_windows(&tasks[task], start, &cfg.hyper).unwrap();
                learning_step(&net, &mut p, &q, &opts).unwrap();
            }
        }
        assert_eq!(out.params.theta, p.theta);
        assert_eq!(out.params.phi, p.phi);
        assert_eq!(out.params.psi, p.psi);
    }

    #[test]
    fn window_targets_cover_whole_windows() {
        let samples: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        assert_eq!(window_targets(&samples, 12, 8).unwrap().len(), 2);
        assert!(window_targets(&samples[..20], 12, 8).is_err());
    }
}
