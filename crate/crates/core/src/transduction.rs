//! Label-free adaptation signals: the global latent prototype and its
//! distance loss, and the regression loss that trains the synthetic
//! gradient generator.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{row_mean, LatentSequence};

/// EMA-maintained mean latent vector over training tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub value: Vec<f64>,
    pub update_count: u64,
}

impl Prototype {
    pub fn zeros(dim: usize) -> Self {
        Self {
            value: vec![0.0; dim],
            update_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }
}

/// Mean latent of one task window.
pub fn task_prototype(z: &LatentSequence) -> Result<Array1<f64>> {
    if z.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(row_mean(&z.0))
}

/// `proto' = gamma * proto + (1 - gamma) * mean(batch_task_means)`.
pub fn update_global_prototype(proto: &Prototype, batch_task_means: &[Array1<f64>], gamma: f64) -> Result<Prototype> {
    if batch_task_means.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::BadConfig(format!("gamma {gamma} outside [0, 1]")));
    }
    let d = proto.dim();
    let mut mean = Array1::<f64>::zeros(d);
    for m in batch_task_means {
        if m.len() != d {
            return Err(Error::ShapeMismatch(format!("task mean of width {} for prototype {d}", m.len())));
        }
        mean += m;
    }
    mean /= batch_task_means.len() as f64;
    let value: Vec<f64> = proto
        .value
        .iter()
        .zip(mean.iter())
        .map(|(p, m)| gamma * p + (1.0 - gamma) * m)
        .collect();
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prototype"));
    }
    Ok(Prototype {
        value,
        update_count: proto.update_count + 1,
    })
}

/// `(1/T) * sum_t |z_t - proto|^2` and its gradient `(2/T)(z_t - proto)`.
pub fn proto_loss(z: &LatentSequence, proto: &Prototype) -> Result<(f64, Array2<f64>)> {
    if z.dim() != proto.dim() {
        return Err(Error::ShapeMismatch(format!(
            "latents of width {} vs prototype {}",
            z.dim(),
            proto.dim()
        )));
    }
    if z.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let t = z.len() as f64;
    let p = Array1::from(proto.value.clone());
    let diff = &z.0 - &p;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / t;
    Ok((loss, diff * (2.0 / t)))
}

/// Element-mean squared difference between a generated gradient and the
/// (constant) true one, with its gradient with respect to `generated`.
pub fn syn_loss(generated: &Array2<f64>, true_grad: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if generated.dim() != true_grad.dim() {
        return Err(Error::ShapeMismatch(format!(
            "generated {:?} vs target {:?}",
            generated.dim(),
            true_grad.dim()
        )));
    }
    let n = generated.len().max(1) as f64;
    let diff = generated - true_grad;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// Cosine similarity of two equally shaped arrays (0 when either is zero).
pub fn cosine_similarity(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
