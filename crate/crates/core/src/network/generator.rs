//! Hourglass of temporal convolutions that predicts a gradient array with
//! the same `[T, C]` shape as its input.
//!
//! Every block first resamples the time axis (linear interpolation) to its
//! level length, then applies a kernel-3 convolution. Inner blocks add
//! normalization and a ReLU; the last block is a plain convolution with bias
//! so the output can take either sign. Mirrored levels of equal length are
//! joined by additive skip connections.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use super::params::{fan_in_bound, fill_uniform, LayoutBuilder, ParamBlock};
use super::{norm_statistics, Mode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub window: usize,
    /// Temporal length after each block; the last must equal `window`.
    pub levels: Vec<usize>,
}

impl GeneratorConfig {
    /// The `T → 2T/3 → T/3 → 2T/3 → T` hourglass.
    pub fn hourglass(channels: usize, window: usize) -> Self {
        let two_thirds = ((2 * window) as f64 / 3.0).round().max(1.0) as usize;
        let third = (window as f64 / 3.0).round().max(1.0) as usize;
        Self {
            channels,
            window,
            levels: vec![two_thirds, third, two_thirds, window],
        }
    }

    pub fn full() -> Self {
        Self::hourglass(120, 60)
    }

    pub fn desk() -> Self {
        Self::hourglass(30, 60)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.window < 2 {
            return Err(Error::BadConfig("generator needs channels > 0 and window >= 2".into()));
        }
        if self.levels.last() != Some(&self.window) || self.levels.contains(&0) {
            return Err(Error::BadConfig(
                "generator levels must be positive and end at the window length".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    len_in: usize,
    len_out: usize,
    conv_w: Range<usize>,
    /// `(gamma, beta, mean, var)` for inner blocks, bias for the last.
    norm: Option<(Range<usize>, Range<usize>, Range<usize>, Range<usize>)>,
    bias: Option<Range<usize>>,
    skip_from: Option<usize>,
    interp: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    blocks: Vec<BlockLayout>,
    n_params: usize,
    n_buffers: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratorCache {
    cols: Vec<Array2<f64>>,
    conv_out: Vec<Array2<f64>>,
    stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    outputs: Vec<Array2<f64>>,
    pub new_buffers: Option<Vec<f64>>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let n = cfg.levels.len();
        let mut p = LayoutBuilder::default();
        let mut b = LayoutBuilder::default();
        let mut blocks = Vec::with_capacity(n);
        let mut len_in = cfg.window;
        for (i, &len_out) in cfg.levels.iter().enumerate() {
            let last = i + 1 == n;
            let conv_w = p.take(c * c * 3);
            let (norm, bias) = if last {
                (None, Some(p.take(c)))
            } else {
                (Some((p.take(c), p.take(c), b.take(c), b.take(c))), None)
            };
            // mirror of block i around the bottleneck, e.g. 0 -> 2 for four levels
            let skip_from = (n >= 2 && i + 2 <= n)
                .then(|| n - 2 - i)
                .filter(|&j| j < i && cfg.levels[j] == len_out && !last);
            blocks.push(BlockLayout {
                len_in,
                len_out,
                conv_w,
                norm,
                bias,
                skip_from,
                interp: ops::interp_matrix(len_in, len_out),
            });
            len_in = len_out;
        }
        Ok(Self {
            cfg,
            blocks,
            n_params: p.total(),
            n_buffers: b.total(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamBlock {
        let c = self.cfg.channels;
        let mut values = vec![0.0; self.n_params];
        let mut buffers = vec![0.0; self.n_buffers];
        let bound = fan_in_bound(c * 3);
        for blk in &self.blocks {
            match &blk.norm {
                Some((gamma, _, _, sq)) => {
                    fill_uniform(rng, &mut values[blk.conv_w.clone()], bound);
                    values[gamma.clone()].fill(1.0);
                    buffers[sq.clone()].fill(1.0);
                }
                None => {
                    // small output layer: the initial synthetic gradient is near zero
                    fill_uniform(rng, &mut values[blk.conv_w.clone()], 0.01 * bound);
                }
            }
        }
        ParamBlock { values, buffers }
    }

    pub fn forward(&self, psi: &ParamBlock, z: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, GeneratorCache)> {
        if psi.values.len() != self.n_params || psi.buffers.len() != self.n_buffers {
            return Err(Error::ShapeMismatch(format!(
                "generator expects {}+{} parameters",
                self.n_params, self.n_buffers
            )));
        }
        if z.dim() != (self.cfg.window, self.cfg.channels) {
            return Err(Error::ShapeMismatch(format!(
                "generator expects [{}, {}] input, got {:?}",
                self.cfg.window,
                self.cfg.channels,
                z.dim()
            )));
        }
        let c = self.cfg.channels;
        let w = &psi.values;
        let mut new_buffers = match mode {
            Mode::Train { .. } => Some(psi.buffers.clone()),
            Mode::Eval => None,
        };
        let mut cache = GeneratorCache {
            cols: Vec::new(),
            conv_out: Vec::new(),
            stats: Vec::new(),
            outputs: Vec::new(),
            new_buffers: None,
        };
        let mut x = z.t().to_owned();
        for blk in &self.blocks {
            let r = ops::matmul(&x.view(), &blk.interp.t());
            let cols = ops::im2col1d(&r);
            let conv = ops::matmul(&ops::view(&w[blk.conv_w.clone()], c, c * 3), &cols.view());
            let (out, stats) = match &blk.norm {
                Some((gamma, beta, mean_r, sq_r)) => {
                    let (mean, var) = norm_statistics(
                        &conv,
                        &psi.buffers,
                        new_buffers.as_mut(),
                        mean_r.clone(),
                        sq_r.clone(),
                        mode,
                    );
                    let (mut y, inv_std) = ops::normalize(&conv, &w[gamma.clone()], &w[beta.clone()], &mean, &var);
                    if let Some(j) = blk.skip_from {
                        y += &cache.outputs[j];
                    }
                    ops::relu_inplace(&mut y);
                    (y, Some((mean, inv_std)))
                }
                None => {
                    let mut y = conv.clone();
                    ops::add_row_bias(&mut y, &w[blk.bias.clone().expect("output bias")]);
                    (y, None)
                }
            };
            cache.cols.push(cols);
            cache.conv_out.push(conv);
            cache.stats.push(stats);
            cache.outputs.push(out.clone());
            x = out;
        }
        cache.new_buffers = new_buffers;
        let g = x.t().to_owned();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generator output"));
        }
        Ok((g, cache))
    }

    /// Parameter gradient for an output gradient `[T, C]`.
    pub fn backward(&self, psi: &ParamBlock, cache: &GeneratorCache, dout: &Array2<f64>) -> Result<Vec<f64>> {
        if dout.dim() != (self.cfg.window, self.cfg.channels) {
            return Err(Error::ShapeMismatch("generator output gradient".into()));
        }
        let c = self.cfg.channels;
        let w = &psi.values;
        let mut grad = vec![0.0; self.n_params];
        let mut pending: Vec<Option<Array2<f64>>> = vec![None; self.blocks.len()];
        let mut dy = dout.t().to_owned();
        for (i, blk) in self.blocks.iter().enumerate().rev() {
            if let Some(p) = pending[i].take() {
                dy += &p;
            }
            let dconv = match (&blk.norm, &cache.stats[i]) {
                (Some((gamma, beta, _, _)), Some((mean, inv_std))) => {
                    ops::relu_backward_inplace(&mut dy, &cache.outputs[i]);
                    if let Some(j) = blk.skip_from {
                        pending[j] = Some(match pending[j].take() {
                            Some(p) => p + &dy,
                            None => dy.clone(),
                        });
                    }
                    let (dconv, dgamma, dbeta) =
                        ops::normalize_backward(&cache.conv_out[i], &dy, &w[gamma.clone()], mean, inv_std);
                    add_into(&mut grad[gamma.clone()], &dgamma);
                    add_into(&mut grad[beta.clone()], &dbeta);
                    dconv
                }
                _ => {
                    let bias = blk.bias.clone().expect("output bias");
                    add_into(&mut grad[bias], &ops::row_sums(&dy));
                    dy.clone()
                }
            };
            {
                let mut dw = ops::view_mut(&mut grad[blk.conv_w.clone()], c, c * 3);
                ops::gemm_acc(&dconv.view(), &cache.cols[i].t(), &mut dw);
            }
            if i > 0 {
                let dcols = ops::matmul(&ops::view(&w[blk.conv_w.clone()], c, c * 3).t(), &dconv.view());
                let dr = ops::col2im1d(&dcols, c);
                debug_assert_eq!(dr.ncols(), blk.len_out);
                dy = ops::matmul(&dr.view(), &blk.interp.view());
                debug_assert_eq!(dy.ncols(), blk.len_in);
            }
        }
        Ok(grad)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hourglass_levels() {
        assert_eq!(GeneratorConfig::full().levels, vec![40, 20, 40, 60]);
        let g = Generator::new(GeneratorConfig::full()).unwrap();
        assert_eq!(g.blocks[2].skip_from, Some(0));
        assert_eq!(g.blocks[3].skip_from, None);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let gen = Generator::new(GeneratorConfig::hourglass(3, 9)).unwrap();
        let mut psi = gen.init(&mut ChaCha8Rng::seed_from_u64(4));
        // make the output layer non-negligible so every path is exercised
        for v in psi.values.iter_mut() {
            if *v == 0.0 {
                *v = 0.05;
            }
        }
        let n = psi.values.len();
        let out_w = n - 3 - 27..n - 3;
        for (k, i) in out_w.enumerate() {
            psi.values[i] = (k as f64 * 0.3).sin() * 0.4;
        }
        let z = Array2::from_shape_fn((9, 3), |(i, j)| ((i * 3 + j) as f64 * 0.77).sin());
        let weights = Array2::from_shape_fn((9, 3), |(i, j)| ((i + 2 * j) as f64 * 0.5).cos());
        let (_, cache) = gen.forward(&psi, &z, Mode::Eval).unwrap();
        let grad = gen.backward(&psi, &cache, &weights).unwrap();
        let objective = |p: &ParamBlock| (&gen.forward(p, &z, Mode::Eval).unwrap().0 * &weights).sum();
        let h = 1e-6;
        for idx in 0..n {
            let mut up = psi.clone();
            up.values[idx] += h;
            let mut dn = psi.clone();
            dn.values[idx] -= h;
            let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-6 + 1e-5 * fd.abs(), "psi {idx}: {fd} vs {}", grad[idx]);
        }
    }
}
