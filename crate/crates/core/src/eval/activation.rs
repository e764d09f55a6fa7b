//! Spatial activation maps of encoder blocks.

use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::network::params::ParamBlock;
use crate::network::{Mode, Network};
use crate::types::FrameSequence;

/// Mean absolute activation of block `layer`, bilinearly upsampled to the
/// input size and min-max normalized per frame. Returns `[T, K, K]`; a flat
/// map becomes all 0.5.
pub fn activation_map(net: &Network, theta: &ParamBlock, frames: &FrameSequence, layer: usize) -> Result<Array3<f64>> {
    let blocks = net.encoder.num_blocks();
    if layer >= blocks {
        return Err(Error::BadLayer {
            index: layer,
            available: blocks,
        });
    }
    let (_, cache) = net.encoder.forward(theta, frames, Mode::Eval)?;
    let ext = cache.output_extent(layer);
    let act = &cache.outputs[layer];
    let (h, w) = (ext.height, ext.width);
    let k = frames.size();
    let mut out = Array3::zeros((ext.frames, k, k));
    for t in 0..ext.frames {
        let mut small = Array2::<f64>::zeros((h, w));
        for c in 0..act.nrows() {
            let row = act.row(c);
            for y in 0..h {
                for x in 0..w {
                    small[[y, x]] += row[t * h * w + y * w + x].abs();
                }
            }
        }
        small /= act.nrows() as f64;
        let mut big = upsample_bilinear(&small, k);
        normalize_min_max(&mut big);
        out.index_axis_mut(ndarray::Axis(0), t).assign(&big);
    }
    Ok(out)
}

/// Half-pixel-centre bilinear resize of a square-or-not map to `k x k`.
pub fn upsample_bilinear(src: &Array2<f64>, k: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sample = |n: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * n as f64 / k as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    Array2::from_shape_fn((k, k), |(y, x)| {
        let (y0, y1, fy) = sample(h, y);
        let (x0, x1, fx) = sample(w, x);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn normalize_min_max(m: &mut Array2<f64>) {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 1e-12 {
        m.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        m.fill(0.5);
    }
}

/// Lays the maps out as a grid of greyscale panels, `cols` per row, with a
/// one-pixel black gutter.
pub fn map_grid(maps: &Array3<f64>, cols: usize) -> GrayImage {
    let (n, k, _) = maps.dim();
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let mut img = GrayImage::new((cols * (k + 1) + 1) as u32, (rows * (k + 1) + 1) as u32);
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (k + 1) + 1, (i % cols) * (k + 1) + 1);
        for y in 0..k {
            for x in 0..k {
                let v = (maps[[i, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Luma([v]));
            }
        }
    }
    img
}

pub fn write_map_grid(maps: &Array3<f64>, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    map_grid(maps, cols)
        .save(path.as_ref())
        .map_err(|e| Error::DecodeError(format!("{}: {e}", path.as_ref().display())))
}
