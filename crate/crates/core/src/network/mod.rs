//! The three parametric models and the gradient plumbing between them.
//!
//! * encoder `f_theta`: per-frame CNN, frames `[T, K, K, 3]` to latents `[T, D]`
//! * estimator `h_phi`: BiLSTM + MLP, latents to `[T, S]` rank probabilities
//! * generator `g_psi`: temporal hourglass, latents to a predicted
//!   `dL_ord/dz` of the same shape
//!
//! Parameters live in flat [`ParamBlock`]s, one per partition, so updates,
//! hashing and serialization treat every model the same way.

pub mod checkpoint;
pub mod encoder;
pub mod estimator;
pub mod generator;
pub mod ops;
pub mod params;

use std::ops::Range;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{Encoder, EncoderCache, EncoderConfig};
pub use estimator::{standardize, Estimator, EstimatorCache, EstimatorConfig, Standardized};
pub use generator::{Generator, GeneratorCache, GeneratorConfig};
pub use params::ParamBlock;

use crate::error::{Error, Result};
use crate::ordinal::{self, RankProbabilities};
use crate::transduction::Prototype;
use crate::types::{FrameSequence, LatentSequence, OrdinalTarget};

/// Whether a forward pass may update normalization moments.
///
/// Normalization always uses the running moments. In `Train` mode the
/// batch's raw moments are first folded into them with the given momentum
/// and the updated values are returned in the cache for the caller to
/// commit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    Train { momentum: f64 },
}

/// Returns `(mean, var)` for a `[C, N]` batch, updating `new_buffers` in
/// training mode. Buffers hold running first and second raw moments.
pub(crate) fn norm_statistics(
    x: &Array2<f64>,
    buffers: &[f64],
    new_buffers: Option<&mut Vec<f64>>,
    mean_r: Range<usize>,
    sq_r: Range<usize>,
    mode: Mode,
) -> (Vec<f64>, Vec<f64>) {
    let (mean, sq): (Vec<f64>, Vec<f64>) = match (mode, new_buffers) {
        (Mode::Train { momentum }, Some(nb)) => {
            let (bm, bsq) = ops::channel_moments(x);
            for (k, i) in mean_r.clone().enumerate() {
                nb[i] = (1.0 - momentum) * nb[i] + momentum * bm[k];
            }
            for (k, i) in sq_r.clone().enumerate() {
                nb[i] = (1.0 - momentum) * nb[i] + momentum * bsq[k];
            }
            (nb[mean_r].to_vec(), nb[sq_r].to_vec())
        }
        _ => (buffers[mean_r].to_vec(), buffers[sq_r].to_vec()),
    };
    let var = mean.iter().zip(&sq).map(|(m, q)| (q - m * m).max(0.0)).collect();
    (mean, var)
}

/// Architecture of all three models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub estimator: EstimatorConfig,
    pub generator: GeneratorConfig,
    /// Generator placed at the estimator output, used only to compare joint
    /// adaptation of encoder and estimator.
    pub head_generator: GeneratorConfig,
}

impl ModelConfig {
    /// 64×64 frames, widths 32-48-64-80-120, BiLSTM 2×60, MLP 80, 40 ranks.
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::full(),
            estimator: EstimatorConfig::full(),
            generator: GeneratorConfig::full(),
            head_generator: GeneratorConfig::hourglass(40, 60),
        }
    }

    /// 32×32 frames, widths 8-12-16-20-30; everything else scaled to `D = 30`.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            estimator: EstimatorConfig::desk(),
            generator: GeneratorConfig::desk(),
            head_generator: GeneratorConfig::hourglass(40, 60),
        }
    }

    pub fn window(&self) -> usize {
        self.generator.window
    }

    pub fn ranks(&self) -> usize {
        self.estimator.ranks
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.estimator.validate()?;
        self.generator.validate()?;
        self.head_generator.validate()?;
        let d = self.encoder.latent_dim();
        if self.estimator.input_dim != d || self.generator.channels != d {
            return Err(Error::BadConfig(format!(
                "latent width mismatch: encoder {d}, estimator {}, generator {}",
                self.estimator.input_dim, self.generator.channels
            )));
        }
        if self.head_generator.channels != self.estimator.ranks
            || self.head_generator.window != self.generator.window
        {
            return Err(Error::BadConfig("head generator must match [T, S]".into()));
        }
        Ok(())
    }
}

/// The built models (layouts and fixed operators) for one configuration.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub estimator: Estimator,
    pub generator: Generator,
    pub head_generator: Generator,
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new(config.encoder.clone())?,
            estimator: Estimator::new(config.estimator.clone())?,
            generator: Generator::new(config.generator.clone())?,
            head_generator: Generator::new(config.head_generator.clone())?,
            config: config.clone(),
        })
    }

    pub fn window(&self) -> usize {
        self.config.window()
    }

    /// Splits `[n*T, D]` latents into `n` windows of `T` rows.
    pub fn windows(&self, z: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let t = self.window();
        if z.nrows() == 0 || !z.nrows().is_multiple_of(t) {
            return Err(Error::ShapeMismatch(format!(
                "{} latent rows is not a whole number of {t}-frame windows",
                z.nrows()
            )));
        }
        Ok((0..z.nrows() / t)
            .map(|w| z.slice(s![w * t..(w + 1) * t, ..]).to_owned())
            .collect())
    }

    /// Mean ordinal loss over the `T`-windows of `z`, with gradients with
    /// respect to `phi` and `z`.
    pub fn ordinal_loss_grads(
        &self,
        phi: &ParamBlock,
        z: &Array2<f64>,
        targets: &[OrdinalTarget],
    ) -> Result<OrdinalGrads> {
        let windows = self.windows(z)?;
        if windows.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} windows but {} targets",
                windows.len(),
                targets.len()
            )));
        }
        let n = windows.len() as f64;
        let t = self.window();
        let mut loss = 0.0;
        let mut dphi = vec![0.0; phi.len()];
        let mut dz = Array2::zeros(z.dim());
        let mut dx = Array2::zeros(z.dim());
        let mut x = Array2::zeros(z.dim());
        let mut logit_grads = Vec::with_capacity(windows.len());
        let mut all_logits = Vec::with_capacity(windows.len());
        for (w, (zw, target)) in windows.iter().zip(targets).enumerate() {
            let (logits, cache) = self.estimator.forward(phi, zw)?;
            let (l, mut dlogits) = ordinal::ordinal_loss_and_logit_grad(&logits, target)?;
            loss += l / n;
            dlogits /= n;
            let (gp, gx) = self.estimator.backward_to_input(phi, &cache, &dlogits)?;
            for (a, b) in dphi.iter_mut().zip(gp) {
                *a += b;
            }
            let st = standardize(zw);
            dz.slice_mut(s![w * t..(w + 1) * t, ..]).assign(&st.pullback(&gx));
            dx.slice_mut(s![w * t..(w + 1) * t, ..]).assign(&gx);
            x.slice_mut(s![w * t..(w + 1) * t, ..]).assign(&st.x);
            logit_grads.push(dlogits);
            all_logits.push(logits);
        }
        Ok(OrdinalGrads {
            loss,
            dphi,
            dz,
            x,
            dx,
            logits: all_logits,
            dlogits: logit_grads,
        })
    }
}

/// Output of [`Network::ordinal_loss_grads`].
#[derive(Debug, Clone)]
pub struct OrdinalGrads {
    pub loss: f64,
    pub dphi: Vec<f64>,
    /// Standardized estimator inputs and the loss gradient there, window
    /// by window.
    pub x: Array2<f64>,
    pub dx: Array2<f64>,
    pub dz: Array2<f64>,
    /// Per-window head logits.
    pub logits: Vec<Array2<f64>>,
    /// Per-window gradient at the logits (already divided by the window count).
    pub dlogits: Vec<Array2<f64>>,
}

/// All learnable state: encoder `theta`, estimator `phi`, generator `psi`,
/// the head-side generator and the global latent prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub theta: ParamBlock,
    pub phi: ParamBlock,
    pub psi: ParamBlock,
    pub psi_head: ParamBlock,
    pub prototype: Prototype,
    /// The generators regress `synth_scale` times the true gradient; their
    /// output is divided by it before use.
    #[serde(default = "default_synth_scale")]
    pub synth_scale: f64,
}

pub const DEFAULT_SYNTH_SCALE: f64 = 500.0;

fn default_synth_scale() -> f64 {
    DEFAULT_SYNTH_SCALE
}

impl ModelParams {
    pub fn network(&self) -> Result<Network> {
        Network::new(&self.config)
    }
}

/// Deterministic initialization; the prototype starts at zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let net = Network::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = net.encoder.init(&mut rng);
    let phi = net.estimator.init(&mut rng);
    let psi = net.generator.init(&mut rng);
    let psi_head = net.head_generator.init(&mut rng);
    Ok(ModelParams {
        prototype: Prototype::zeros(config.encoder.latent_dim()),
        config: config.clone(),
        theta,
        phi,
        psi,
        psi_head,
        synth_scale: DEFAULT_SYNTH_SCALE,
    })
}

/// Inference-mode encoding of every frame.
pub fn encode_frames(net: &Network, theta: &ParamBlock, frames: &FrameSequence) -> Result<LatentSequence> {
    let (z, _) = net.encoder.forward(theta, frames, Mode::Eval)?;
    LatentSequence::new(z)
}

/// Rank probabilities for one window of latents.
pub fn estimate_rppg(net: &Network, phi: &ParamBlock, z: &LatentSequence) -> Result<RankProbabilities> {
    let (logits, _) = net.estimator.forward(phi, &z.0)?;
    Ok(RankProbabilities(logits.mapv(ordinal::sigmoid)))
}

/// Start rows of the `T`-windows that cover `n` rows: hop `T`, plus one
/// window flush with the end when `n` is not a multiple of `T`.
pub fn covering_windows(n: usize, t: usize) -> Result<Vec<usize>> {
    if n < t || t == 0 {
        return Err(Error::TooShort { len: n, needed: t });
    }
    let mut starts: Vec<usize> = (0..=n - t).step_by(t).collect();
    if !n.is_multiple_of(t) {
        starts.push(n - t);
    }
    Ok(starts)
}

/// Applies a generator window by window, averaging rows covered twice.
pub(crate) fn generator_over_sequence(gen: &Generator, psi: &ParamBlock, x: &Array2<f64>) -> Result<Array2<f64>> {
    let t = gen.config().window;
    let mut out = Array2::<f64>::zeros(x.dim());
    let mut count = vec![0.0f64; x.nrows()];
    for start in covering_windows(x.nrows(), t)? {
        let (g, _) = gen.forward(psi, &x.slice(s![start..start + t, ..]).to_owned(), Mode::Eval)?;
        out.slice_mut(s![start..start + t, ..]).scaled_add(1.0, &g);
        for c in &mut count[start..start + t] {
            *c += 1.0;
        }
    }
    for (mut row, c) in out.outer_iter_mut().zip(count) {
        row /= c;
    }
    Ok(out)
}

/// Predicted `dL_ord/dz` for latents of at least `T` rows. The generator
/// sees each standardized window and predicts the gradient there; the
/// prediction is pulled back through the standardization.
pub fn generate_synthetic_gradient(net: &Network, params: &ModelParams, z: &LatentSequence) -> Result<Array2<f64>> {
    let t = net.window();
    let z = &z.0;
    let mut out = Array2::<f64>::zeros(z.dim());
    let mut count = vec![0.0f64; z.nrows()];
    for start in covering_windows(z.nrows(), t)? {
        let st = standardize(&z.slice(s![start..start + t, ..]).to_owned());
        let (g, _) = net.generator.forward(&params.psi, &st.x, Mode::Eval)?;
        let g = st.pullback(&(g / params.synth_scale));
        out.slice_mut(s![start..start + t, ..]).scaled_add(1.0, &g);
        for c in &mut count[start..start + t] {
            *c += 1.0;
        }
    }
    for (mut row, c) in out.outer_iter_mut().zip(count) {
        row /= c;
    }
    Ok(out)
}

/// Predicted `dL_ord/dlogits` from head logits, for joint adaptation.
pub fn generate_head_gradient(net: &Network, params: &ModelParams, logits: &Array2<f64>) -> Result<Array2<f64>> {
    let g = generator_over_sequence(&net.head_generator, &params.psi_head, logits)?;
    Ok(g / params.synth_scale)
}

/// One descent step on `theta` driven by an externally supplied gradient at
/// the latents: `theta - alpha * (dz/dtheta)^T grad_at_z`.
pub fn inject_gradient_update(
    net: &Network,
    theta: &ParamBlock,
    frames: &FrameSequence,
    grad_at_z: &Array2<f64>,
    alpha: f64,
) -> Result<ParamBlock> {
    if grad_at_z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("injected latent gradient"));
    }
    let (_, cache) = net.encoder.forward(theta, frames, Mode::Eval)?;
    let grad = net.encoder.backward(theta, &cache, grad_at_z)?;
    let mut out = theta.clone();
    out.descend(&grad, alpha)?;
    Ok(out)
}

/// Exact `dL_ord/dz` with the latents as the cut point: the estimator
/// participates, the encoder does not.
///
/// `frames` must be a whole number of `T`-windows, one target per window.
pub fn grad_at_z_of_ordinal_loss(
    net: &Network,
    params: &ModelParams,
    frames: &FrameSequence,
    targets: &[OrdinalTarget],
) -> Result<Array2<f64>> {
    let z = encode_frames(net, &params.theta, frames)?;
    Ok(net.ordinal_loss_grads(&params.phi, &z.0, targets)?.dz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_and_desk_configs_are_consistent() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::full().encoder.latent_dim(), 120);
        assert_eq!(ModelConfig::desk().encoder.latent_dim(), 30);
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.estimator.input_dim = 31;
        assert!(matches!(init_params(&cfg, 0), Err(Error::BadConfig(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::desk();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        let c = init_params(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.theta, c.theta);
        assert!(a.prototype.value.iter().all(|&v| v == 0.0));
    }
}
