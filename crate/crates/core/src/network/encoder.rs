//! Per-frame convolutional encoder.
//!
//! Each block is `conv3x3 -> norm -> avgpool2` on the main path plus
//! `avgpool2 -> conv1x1` on the shortcut, summed and passed through a ReLU.
//! A global spatial mean after the last block yields one `D`-vector per
//! frame.

use std::ops::Range;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, Extent};
use super::params::{fan_in_bound, fill_uniform, LayoutBuilder, ParamBlock};
use super::{norm_statistics, Mode};
use crate::error::{Error, Result};
use crate::types::FrameSequence;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Input frame side `K`.
    pub input_size: usize,
    /// Output channels of each block; the last one is the latent width.
    pub widths: Vec<usize>,
}

impl EncoderConfig {
    pub fn full() -> Self {
        Self {
            input_size: 64,
            widths: vec![32, 48, 64, 80, 120],
        }
    }

    pub fn desk() -> Self {
        Self {
            input_size: 32,
            widths: vec![8, 12, 16, 20, 30],
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::BadConfig("encoder widths must be non-empty and positive".into()));
        }
        let div = 1usize << self.widths.len();
        if self.input_size < div || !self.input_size.is_multiple_of(div) {
            return Err(Error::BadConfig(format!(
                "input size {} must be a positive multiple of {div} for {} halving blocks",
                self.input_size,
                self.widths.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    cin: usize,
    cout: usize,
    conv_w: Range<usize>,
    gamma: Range<usize>,
    beta: Range<usize>,
    skip_w: Range<usize>,
    skip_b: Range<usize>,
    mean: Range<usize>,
    sq: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    blocks: Vec<BlockLayout>,
    n_params: usize,
    n_buffers: usize,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    extents: Vec<Extent>,
    cols: Vec<Array2<f64>>,
    conv_out: Vec<Array2<f64>>,
    stats: Vec<(Vec<f64>, Vec<f64>)>,
    skip_in: Vec<Array2<f64>>,
    /// Post-ReLU output of every block, `[C, T*H*W]`.
    pub outputs: Vec<Array2<f64>>,
    /// Updated running moments when the pass ran in training mode.
    pub new_buffers: Option<Vec<f64>>,
}

impl EncoderCache {
    pub fn output_extent(&self, block: usize) -> Extent {
        self.extents[block].halved()
    }
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut p = LayoutBuilder::default();
        let mut b = LayoutBuilder::default();
        let mut cin = 3;
        let mut blocks = Vec::new();
        for &cout in &cfg.widths {
            blocks.push(BlockLayout {
                cin,
                cout,
                conv_w: p.take(cout * cin * 9),
                gamma: p.take(cout),
                beta: p.take(cout),
                skip_w: p.take(cout * cin),
                skip_b: p.take(cout),
                mean: b.take(cout),
                sq: b.take(cout),
            });
            cin = cout;
        }
        Ok(Self {
            cfg,
            blocks,
            n_params: p.total(),
            n_buffers: b.total(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim()
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamBlock {
        let mut values = vec![0.0; self.n_params];
        let mut buffers = vec![0.0; self.n_buffers];
        for blk in &self.blocks {
            fill_uniform(rng, &mut values[blk.conv_w.clone()], fan_in_bound(blk.cin * 9));
            values[blk.gamma.clone()].fill(1.0);
            let bound = fan_in_bound(blk.cin);
            fill_uniform(rng, &mut values[blk.skip_w.clone()], bound);
            fill_uniform(rng, &mut values[blk.skip_b.clone()], bound);
            buffers[blk.sq.clone()].fill(1.0);
        }
        ParamBlock { values, buffers }
    }

    fn check(&self, theta: &ParamBlock, frames: &FrameSequence) -> Result<()> {
        if theta.values.len() != self.n_params || theta.buffers.len() != self.n_buffers {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {}+{} parameters, got {}+{}",
                self.n_params,
                self.n_buffers,
                theta.values.len(),
                theta.buffers.len()
            )));
        }
        if frames.size() != self.cfg.input_size {
            return Err(Error::ShapeMismatch(format!(
                "encoder built for {0}x{0} frames, got {1}x{1}",
                self.cfg.input_size,
                frames.size()
            )));
        }
        Ok(())
    }

    /// Encodes every frame independently; returns `[T, D]` latents.
    pub fn forward(
        &self,
        theta: &ParamBlock,
        frames: &FrameSequence,
        mode: Mode,
    ) -> Result<(Array2<f64>, EncoderCache)> {
        self.check(theta, frames)?;
        let k = self.cfg.input_size;
        let t = frames.len();
        let mut ext = Extent {
            frames: t,
            height: k,
            width: k,
        };
        let mut x = channel_major(frames);
        let w = &theta.values;
        let mut new_buffers = match mode {
            Mode::Train { .. } => Some(theta.buffers.clone()),
            Mode::Eval => None,
        };
        let mut cache = EncoderCache {
            extents: Vec::with_capacity(self.blocks.len()),
            cols: Vec::with_capacity(self.blocks.len()),
            conv_out: Vec::with_capacity(self.blocks.len()),
            stats: Vec::with_capacity(self.blocks.len()),
            skip_in: Vec::with_capacity(self.blocks.len()),
            outputs: Vec::with_capacity(self.blocks.len()),
            new_buffers: None,
        };
        for blk in &self.blocks {
            let cols = ops::im2col3x3(&x, ext);
            let conv_w = ops::view(&w[blk.conv_w.clone()], blk.cout, blk.cin * 9);
            let conv = ops::matmul(&conv_w, &cols.view());
            let (mean, var) = norm_statistics(
                &conv,
                &theta.buffers,
                new_buffers.as_mut(),
                blk.mean.clone(),
                blk.sq.clone(),
                mode,
            );
            let (normed, inv_std) =
                ops::normalize(&conv, &w[blk.gamma.clone()], &w[blk.beta.clone()], &mean, &var);
            let mut out = ops::avgpool2(&normed, ext);
            let skip_in = ops::avgpool2(&x, ext);
            let skip_w = ops::view(&w[blk.skip_w.clone()], blk.cout, blk.cin);
            ops::gemm_acc(&skip_w, &skip_in.view(), &mut out.view_mut());
            ops::add_row_bias(&mut out, &w[blk.skip_b.clone()]);
            ops::relu_inplace(&mut out);

            cache.extents.push(ext);
            cache.cols.push(cols);
            cache.conv_out.push(conv);
            cache.stats.push((mean, inv_std));
            cache.skip_in.push(skip_in);
            cache.outputs.push(out.clone());
            x = out;
            ext = ext.halved();
        }
        let z = spatial_mean(&x, ext);
        cache.new_buffers = new_buffers;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output"));
        }
        Ok((z, cache))
    }

    /// Backpropagates `dz` (`[T, D]`) to a flat parameter gradient.
    pub fn backward(&self, theta: &ParamBlock, cache: &EncoderCache, dz: &Array2<f64>) -> Result<Vec<f64>> {
        let t = cache.extents[0].frames;
        if dz.dim() != (t, self.latent_dim()) {
            return Err(Error::ShapeMismatch(format!(
                "latent gradient {:?}, expected ({t}, {})",
                dz.dim(),
                self.latent_dim()
            )));
        }
        if dz.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient("latent gradient"));
        }
        let w = &theta.values;
        let mut grad = vec![0.0; self.n_params];
        let last = self.blocks.len() - 1;
        let mut dy = spatial_mean_backward(dz, cache.output_extent(last));
        for (i, blk) in self.blocks.iter().enumerate().rev() {
            let ext = cache.extents[i];
            ops::relu_backward_inplace(&mut dy, &cache.outputs[i]);

            // shortcut path
            {
                let mut dskip_w = ops::view_mut(&mut grad[blk.skip_w.clone()], blk.cout, blk.cin);
                ops::gemm_acc(&dy.view(), &cache.skip_in[i].t(), &mut dskip_w);
            }
            for (g, s) in grad[blk.skip_b.clone()].iter_mut().zip(ops::row_sums(&dy)) {
                *g += s;
            }
            let dx_skip = if i > 0 {
                let skip_w = ops::view(&w[blk.skip_w.clone()], blk.cout, blk.cin);
                let dskip_in = ops::matmul(&skip_w.t(), &dy.view());
                Some(ops::avgpool2_backward(&dskip_in, ext))
            } else {
                None
            };

            // main path
            let dnormed = ops::avgpool2_backward(&dy, ext);
            let (mean, inv_std) = &cache.stats[i];
            let (dconv, dgamma, dbeta) = ops::normalize_backward(
                &cache.conv_out[i],
                &dnormed,
                &w[blk.gamma.clone()],
                mean,
                inv_std,
            );
            for (g, d) in grad[blk.gamma.clone()].iter_mut().zip(dgamma) {
                *g += d;
            }
            for (g, d) in grad[blk.beta.clone()].iter_mut().zip(dbeta) {
                *g += d;
            }
            {
                let mut dconv_w = ops::view_mut(&mut grad[blk.conv_w.clone()], blk.cout, blk.cin * 9);
                ops::gemm_acc(&dconv.view(), &cache.cols[i].t(), &mut dconv_w);
            }
            if let Some(dx_skip) = dx_skip {
                let conv_w = ops::view(&w[blk.conv_w.clone()], blk.cout, blk.cin * 9);
                let dcols = ops::matmul(&conv_w.t(), &dconv.view());
                let mut dx = ops::col2im3x3(&dcols, blk.cin, ext);
                dx += &dx_skip;
                dy = dx;
            }
        }
        Ok(grad)
    }
}

/// `[T, K, K, 3]` unit-interval frames to `[3, T*K*K]` doubles.
fn channel_major(frames: &FrameSequence) -> Array2<f64> {
    let f = frames.frames();
    let (t, h, w, c) = f.dim();
    let n = t * h * w;
    let mut x = Array2::zeros((c, n));
    for (ti, frame) in f.outer_iter().enumerate() {
        for ((y, xx, ci), &v) in frame.indexed_iter() {
            x[[ci, ti * h * w + y * w + xx]] = v as f64;
        }
    }
    x
}

fn spatial_mean(x: &Array2<f64>, ext: Extent) -> Array2<f64> {
    let hw = ext.height * ext.width;
    let mut z = Array2::zeros((ext.frames, x.nrows()));
    for (d, row) in x.axis_iter(Axis(0)).enumerate() {
        for t in 0..ext.frames {
            z[[t, d]] = row.slice(ndarray::s![t * hw..(t + 1) * hw]).sum() / hw as f64;
        }
    }
    z
}

fn spatial_mean_backward(dz: &Array2<f64>, ext: Extent) -> Array2<f64> {
    let hw = ext.height * ext.width;
    let (t, d) = dz.dim();
    let mut dy = Array2::zeros((d, t * hw));
    for di in 0..d {
        for ti in 0..t {
            let g = dz[[ti, di]] / hw as f64;
            dy.slice_mut(ndarray::s![di, ti * hw..(ti + 1) * hw]).fill(g);
        }
    }
    dy
}
