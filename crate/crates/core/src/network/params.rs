use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A flat parameter partition plus its non-trainable buffers
/// (normalization running moments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub values: Vec<f64>,
    pub buffers: Vec<f64>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// SHA-256 over the little-endian bytes of values then buffers.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.values.iter().chain(&self.buffers) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `values -= lr * grad`.
    pub fn descend(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient of length {} for {} parameters",
                grad.len(),
                self.values.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient("parameter update"));
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (v, g) in self.values.iter_mut().zip(grad) {
            *v -= lr * g;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamBlock) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Incrementally assigns contiguous ranges inside a flat vector.
#[derive(Debug, Default)]
pub(crate) struct LayoutBuilder {
    next: usize,
}

impl LayoutBuilder {
    pub fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.next..self.next + n;
        self.next += n;
        r
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// Fills `out` with `U(-bound, bound)`.
pub(crate) fn fill_uniform<R: Rng>(rng: &mut R, out: &mut [f64], bound: f64) {
    for v in out {
        *v = rng.random_range(-bound..=bound);
    }
}

pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
