//! Bidirectional LSTM followed by a per-step MLP with `S` logistic heads.
//!
//! The input window is first centred in time and divided by its RMS over
//! all steps and dimensions, mirroring the per-window normalization of the
//! targets.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use super::params::{fan_in_bound, fill_uniform, LayoutBuilder, ParamBlock};
use crate::error::{Error, Result};
use crate::ordinal::sigmoid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub input_dim: usize,
    /// LSTM width per direction.
    pub hidden: usize,
    pub mlp_width: usize,
    pub ranks: usize,
}

impl EstimatorConfig {
    pub fn full() -> Self {
        Self {
            input_dim: 120,
            hidden: 60,
            mlp_width: 80,
            ranks: 40,
        }
    }

    pub fn desk() -> Self {
        Self {
            input_dim: 30,
            hidden: 30,
            mlp_width: 60,
            ranks: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.mlp_width == 0 {
            return Err(Error::BadConfig("estimator widths must be positive".into()));
        }
        if self.ranks < 2 {
            return Err(Error::BadConfig("estimator needs at least two ranks".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LstmLayout {
    w_ih: Range<usize>,
    w_hh: Range<usize>,
    bias: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Estimator {
    cfg: EstimatorConfig,
    fwd: LstmLayout,
    bwd: LstmLayout,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    n_params: usize,
}

#[derive(Debug, Clone)]
struct LstmTrace {
    /// Post-activation gates per step, `[T, 4H]` in i, f, g, o order.
    gates: Array2<f64>,
    cells: Array2<f64>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct EstimatorCache {
    std: Standardized,
    /// Standardized input fed to the LSTMs.
    input: Array2<f64>,
    fwd: LstmTrace,
    bwd: LstmTrace,
    concat: Array2<f64>,
    mlp: Array2<f64>,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.input_dim, cfg.hidden);
        let mut p = LayoutBuilder::default();
        let lstm = |p: &mut LayoutBuilder| LstmLayout {
            w_ih: p.take(4 * h * d),
            w_hh: p.take(4 * h * h),
            bias: p.take(4 * h),
        };
        let fwd = lstm(&mut p);
        let bwd = lstm(&mut p);
        let w1 = p.take(cfg.mlp_width * 2 * h);
        let b1 = p.take(cfg.mlp_width);
        let w2 = p.take(cfg.ranks * cfg.mlp_width);
        let b2 = p.take(cfg.ranks);
        Ok(Self {
            n_params: p.total(),
            cfg,
            fwd,
            bwd,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamBlock {
        let mut values = vec![0.0; self.n_params];
        let hb = fan_in_bound(self.cfg.hidden);
        for l in [&self.fwd, &self.bwd] {
            fill_uniform(rng, &mut values[l.w_ih.clone()], hb);
            fill_uniform(rng, &mut values[l.w_hh.clone()], hb);
            fill_uniform(rng, &mut values[l.bias.clone()], hb);
        }
        let b = fan_in_bound(2 * self.cfg.hidden);
        fill_uniform(rng, &mut values[self.w1.clone()], b);
        fill_uniform(rng, &mut values[self.b1.clone()], b);
        let b = fan_in_bound(self.cfg.mlp_width);
        fill_uniform(rng, &mut values[self.w2.clone()], b);
        fill_uniform(rng, &mut values[self.b2.clone()], b);
        ParamBlock {
            values,
            buffers: Vec::new(),
        }
    }

    /// Index range of the head biases inside the flat parameter vector.
    pub fn head_bias_range(&self) -> Range<usize> {
        self.b2.clone()
    }

    pub fn head_weight_range(&self) -> Range<usize> {
        self.w2.clone()
    }

    /// Ranges of the (input weights, recurrent weights, bias) of each
    /// direction, forward first.
    pub fn lstm_ranges(&self) -> [(Range<usize>, Range<usize>, Range<usize>); 2] {
        [
            (self.fwd.w_ih.clone(), self.fwd.w_hh.clone(), self.fwd.bias.clone()),
            (self.bwd.w_ih.clone(), self.bwd.w_hh.clone(), self.bwd.bias.clone()),
        ]
    }

    pub fn mlp_weight_range(&self) -> Range<usize> {
        self.w1.clone()
    }

    /// Maps `[T, D]` latents to `[T, S]` head logits.
    pub fn forward(&self, phi: &ParamBlock, z: &Array2<f64>) -> Result<(Array2<f64>, EstimatorCache)> {
        if phi.values.len() != self.n_params {
            return Err(Error::ShapeMismatch(format!(
                "estimator expects {} parameters, got {}",
                self.n_params,
                phi.values.len()
            )));
        }
        if z.ncols() != self.cfg.input_dim || z.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "estimator expects [T, {}] latents, got {:?}",
                self.cfg.input_dim,
                z.dim()
            )));
        }
        let w = &phi.values;
        let h = self.cfg.hidden;
        let std = standardize(z);
        let x = std.x.clone();
        let fwd = self.lstm_forward(w, &self.fwd, &x, false);
        let bwd = self.lstm_forward(w, &self.bwd, &x, true);
        let t = z.nrows();
        let mut concat = Array2::zeros((t, 2 * h));
        concat.slice_mut(s![.., ..h]).assign(&fwd.hidden);
        concat.slice_mut(s![.., h..]).assign(&bwd.hidden);

        let w1 = ops::view(&w[self.w1.clone()], self.cfg.mlp_width, 2 * h);
        let mut mlp = ops::matmul(&concat.view(), &w1.t());
        add_col_bias(&mut mlp, &w[self.b1.clone()]);
        ops::relu_inplace(&mut mlp);
        let w2 = ops::view(&w[self.w2.clone()], self.cfg.ranks, self.cfg.mlp_width);
        let mut logits = ops::matmul(&mlp.view(), &w2.t());
        add_col_bias(&mut logits, &w[self.b2.clone()]);
        Ok((
            logits,
            EstimatorCache {
                std,
                input: x,
                fwd,
                bwd,
                concat,
                mlp,
            },
        ))
    }

    /// Returns `(dphi, dz)` for a logit gradient `[T, S]`.
    pub fn backward(
        &self,
        phi: &ParamBlock,
        cache: &EstimatorCache,
        dlogits: &Array2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let (grad, dx) = self.backward_to_input(phi, cache, dlogits)?;
        Ok((grad, cache.std.pullback(&dx)))
    }

    /// As [`Estimator::backward`], but the second output is the gradient at
    /// the standardized input rather than at `z`.
    pub fn backward_to_input(
        &self,
        phi: &ParamBlock,
        cache: &EstimatorCache,
        dlogits: &Array2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let t = cache.input.nrows();
        if dlogits.dim() != (t, self.cfg.ranks) {
            return Err(Error::ShapeMismatch(format!(
                "logit gradient {:?}, expected ({t}, {})",
                dlogits.dim(),
                self.cfg.ranks
            )));
        }
        let w = &phi.values;
        let h = self.cfg.hidden;
        let m = self.cfg.mlp_width;
        let mut grad = vec![0.0; self.n_params];

        {
            let mut dw2 = ops::view_mut(&mut grad[self.w2.clone()], self.cfg.ranks, m);
            ops::gemm_acc(&dlogits.t(), &cache.mlp.view(), &mut dw2);
        }
        accumulate_col_sums(&mut grad[self.b2.clone()], dlogits);
        let w2 = ops::view(&w[self.w2.clone()], self.cfg.ranks, m);
        let mut dmlp = ops::matmul(&dlogits.view(), &w2);
        ops::relu_backward_inplace(&mut dmlp, &cache.mlp);
        {
            let mut dw1 = ops::view_mut(&mut grad[self.w1.clone()], m, 2 * h);
            ops::gemm_acc(&dmlp.t(), &cache.concat.view(), &mut dw1);
        }
        accumulate_col_sums(&mut grad[self.b1.clone()], &dmlp);
        let w1 = ops::view(&w[self.w1.clone()], m, 2 * h);
        let dconcat = ops::matmul(&dmlp.view(), &w1);

        let mut dx = Array2::zeros(cache.input.dim());
        self.lstm_backward(
            w,
            &self.fwd,
            &cache.input,
            &cache.fwd,
            &dconcat.slice(s![.., ..h]).to_owned(),
            false,
            &mut grad,
            &mut dx,
        );
        self.lstm_backward(
            w,
            &self.bwd,
            &cache.input,
            &cache.bwd,
            &dconcat.slice(s![.., h..]).to_owned(),
            true,
            &mut grad,
            &mut dx,
        );
        Ok((grad, dx))
    }

    fn lstm_forward(&self, w: &[f64], l: &LstmLayout, z: &Array2<f64>, reverse: bool) -> LstmTrace {
        let (t, d) = z.dim();
        let h = self.cfg.hidden;
        let w_ih = ops::view(&w[l.w_ih.clone()], 4 * h, d);
        let w_hh = ops::view(&w[l.w_hh.clone()], 4 * h, h);
        let bias = ArrayView1::from(&w[l.bias.clone()]);
        let xw = ops::matmul(&z.view(), &w_ih.t());
        let mut gates = Array2::zeros((t, 4 * h));
        let mut cells = Array2::zeros((t, h));
        let mut hidden = Array2::zeros((t, h));
        let mut h_prev = Array1::<f64>::zeros(h);
        let mut c_prev = Array1::<f64>::zeros(h);
        for step in 0..t {
            let ti = if reverse { t - 1 - step } else { step };
            let mut pre = &xw.row(ti) + &bias;
            pre += &w_hh.dot(&h_prev);
            let mut g = gates.row_mut(ti);
            for j in 0..h {
                let i_g = sigmoid(pre[j]);
                let f_g = sigmoid(pre[h + j]);
                let g_g = pre[2 * h + j].tanh();
                let o_g = sigmoid(pre[3 * h + j]);
                let c = f_g * c_prev[j] + i_g * g_g;
                let hv = o_g * c.tanh();
                g[j] = i_g;
                g[h + j] = f_g;
                g[2 * h + j] = g_g;
                g[3 * h + j] = o_g;
                cells[[ti, j]] = c;
                hidden[[ti, j]] = hv;
                c_prev[j] = c;
                h_prev[j] = hv;
            }
        }
        LstmTrace { gates, cells, hidden }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        w: &[f64],
        l: &LstmLayout,
        z: &Array2<f64>,
        trace: &LstmTrace,
        dh_out: &Array2<f64>,
        reverse: bool,
        grad: &mut [f64],
        dz: &mut Array2<f64>,
    ) {
        let (t, d) = z.dim();
        let h = self.cfg.hidden;
        let w_hh = ops::view(&w[l.w_hh.clone()], 4 * h, h);
        let mut dgates = Array2::<f64>::zeros((t, 4 * h));
        // hidden state that fed step `ti` (zeros at the sequence start)
        let mut h_inputs = Array2::<f64>::zeros((t, h));
        let mut dh_next = Array1::<f64>::zeros(h);
        let mut dc_next = Array1::<f64>::zeros(h);
        for step in (0..t).rev() {
            let ti = if reverse { t - 1 - step } else { step };
            let prev = if step == 0 {
                None
            } else if reverse {
                Some(ti + 1)
            } else {
                Some(ti - 1)
            };
            let g = trace.gates.row(ti);
            let mut dg = dgates.row_mut(ti);
            for j in 0..h {
                let (i_g, f_g, g_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let c = trace.cells[[ti, j]];
                let c_prev = prev.map_or(0.0, |p| trace.cells[[p, j]]);
                let tc = c.tanh();
                let dh = dh_out[[ti, j]] + dh_next[j];
                let dc = dc_next[j] + dh * o_g * (1.0 - tc * tc);
                dg[j] = dc * g_g * i_g * (1.0 - i_g);
                dg[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                dg[2 * h + j] = dc * i_g * (1.0 - g_g * g_g);
                dg[3 * h + j] = dh * tc * o_g * (1.0 - o_g);
                dc_next[j] = dc * f_g;
            }
            if let Some(p) = prev {
                h_inputs.row_mut(ti).assign(&trace.hidden.row(p));
            }
            dh_next = w_hh.t().dot(&dg);
        }
        {
            let mut dw_ih = ops::view_mut(&mut grad[l.w_ih.clone()], 4 * h, d);
            ops::gemm_acc(&dgates.t(), &z.view(), &mut dw_ih);
        }
        {
            let mut dw_hh = ops::view_mut(&mut grad[l.w_hh.clone()], 4 * h, h);
            ops::gemm_acc(&dgates.t(), &h_inputs.view(), &mut dw_hh);
        }
        accumulate_col_sums(&mut grad[l.bias.clone()], &dgates);
        let w_ih = ops::view(&w[l.w_ih.clone()], 4 * h, d);
        ops::gemm_acc(&dgates.view(), &w_ih, &mut dz.view_mut());
    }
}

/// Floor on the window RMS so a constant window maps to zeros.
pub const RMS_FLOOR: f64 = 1e-6;

/// A latent window centred in time and scaled by its overall RMS.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub x: Array2<f64>,
    centred: Array2<f64>,
    rms: f64,
}

impl Standardized {
    /// Maps a gradient at `x` back to the raw latents. The Jacobian of the
    /// standardization is symmetric, so this is also its forward action.
    pub fn pullback(&self, dx: &Array2<f64>) -> Array2<f64> {
        let (c, rms) = (&self.centred, self.rms);
        let n = c.len() as f64;
        let proj: f64 = dx.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>() / (n * rms.powi(3));
        let mut dc = dx / rms - &(c * proj);
        let mean = dc.mean_axis(ndarray::Axis(0)).expect("non-empty window");
        dc -= &mean;
        dc
    }

    pub fn rms(&self) -> f64 {
        self.rms
    }
}

pub fn standardize(z: &Array2<f64>) -> Standardized {
    let mean = z.mean_axis(ndarray::Axis(0)).expect("non-empty window");
    let centred = z - &mean;
    let ms = centred.iter().map(|v| v * v).sum::<f64>() / centred.len() as f64;
    let rms = (ms + RMS_FLOOR * RMS_FLOOR).sqrt();
    Standardized {
        x: &centred / rms,
        centred,
        rms,
    }
}

fn add_col_bias(x: &mut Array2<f64>, bias: &[f64]) {
    for mut row in x.outer_iter_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn accumulate_col_sums(out: &mut [f64], x: &Array2<f64>) {
    for row in x.outer_iter() {
        for (o, v) in out.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
}
