//! Linear softmax classifier head with closed-form per-example gradients.
//!
//! Parameter layout: `K × d_feat` weights (row-major, one row per class)
//! followed by `K` biases.

use crate::dpcore::{DpError, PerExampleGradients};

use super::task::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadShape {
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl HeadShape {
    pub fn of(data: &Dataset) -> Self {
        Self {
            num_classes: data.num_classes,
            feature_dim: data.dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.num_classes * self.feature_dim + self.num_classes
    }

    /// Zero-initialized head.
    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.num_params()]
    }
}

/// Logits of one example.
pub fn logits(shape: HeadShape, params: &[f64], x: &[f64]) -> Vec<f64> {
    let (k, d) = (shape.num_classes, shape.feature_dim);
    let bias = &params[k * d..];
    (0..k)
        .map(|c| {
            let w = &params[c * d..(c + 1) * d];
            w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[c]
        })
        .collect()
}

/// Softmax probabilities and `log Σ exp`.
fn softmax(z: &[f64]) -> (Vec<f64>, f64) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (e.iter().map(|v| v / s).collect(), m + s.ln())
}

/// Cross-entropy of one example and its gradient `(p − e_y) ⊗ [x, 1]`.
fn example_loss_grad(shape: HeadShape, params: &[f64], x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
    let (k, d) = (shape.num_classes, shape.feature_dim);
    let z = logits(shape, params, x);
    let (mut p, lse) = softmax(&z);
    let loss = lse - z[y];
    p[y] -= 1.0;
    for c in 0..k {
        for j in 0..d {
            grad[c * d + j] = p[c] * x[j];
        }
        grad[k * d + c] = p[c];
    }
    loss
}

/// Mean loss over `data` and one labelled gradient row per example.
///
/// Fails only when the parameters have diverged far enough to produce
/// non-finite gradients.
pub fn loss_and_grads(params: &[f64], data: &Dataset) -> Result<(f64, PerExampleGradients), DpError> {
    let shape = HeadShape::of(data);
    let dim = shape.num_params();
    assert_eq!(params.len(), dim, "head parameter count");
    let mut flat = vec![0.0; data.len() * dim];
    let mut total = 0.0;
    for (i, row) in flat.chunks_exact_mut(dim).enumerate() {
        total += example_loss_grad(shape, params, data.row(i), data.labels[i], row);
    }
    let mean = if data.is_empty() {
        0.0
    } else {
        total / data.len() as f64
    };
    let grads = PerExampleGradients::from_flat(dim, flat)?.with_labels(data.labels.clone())?;
    Ok((mean, grads))
}

/// Mean cross-entropy without gradients.
pub fn mean_loss(params: &[f64], data: &Dataset) -> f64 {
    let shape = HeadShape::of(data);
    let total: f64 = (0..data.len())
        .map(|i| {
            let z = logits(shape, params, data.row(i));
            softmax(&z).1 - z[data.labels[i]]
        })
        .sum();
    total / data.len().max(1) as f64
}

/// Argmax class per example (lowest index wins ties).
pub fn predict(params: &[f64], data: &Dataset) -> Vec<usize> {
    let shape = HeadShape::of(data);
    (0..data.len())
        .map(|i| {
            let z = logits(shape, params, data.row(i));
            let mut best = 0;
            for c in 1..z.len() {
                if z[c] > z[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
