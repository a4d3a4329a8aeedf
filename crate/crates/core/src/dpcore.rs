//! Per-example clipping, Poisson subsampling, noisy aggregation and the
//! optimizer steps of normalized and standard DP training.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gradient dimension must be >= 1")]
    ZeroDimension,
    #[error("non-finite gradient entry at row {row}")]
    NonFinite { row: usize },
    #[error("invalid clip mode parameter {0} (must be > 0)")]
    InvalidClip(f64),
    #[error("aggregation denominator {0} must be > 0")]
    InvalidDenominator(f64),
    #[error("noise multiplier {0} must be >= 0")]
    InvalidNoise(f64),
}

/// Row-major batch of per-example gradients, optionally labelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerExampleGradients {
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl PerExampleGradients {
    pub fn empty(dim: usize) -> Result<Self, DpError> {
        if dim == 0 {
            return Err(DpError::ZeroDimension);
        }
        Ok(Self {
            dim,
            data: Vec::new(),
            labels: None,
        })
    }

    /// Builds a batch from a flat row-major buffer.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self, DpError> {
        if dim == 0 {
            return Err(DpError::ZeroDimension);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(DpError::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DpError::NonFinite { row: pos / dim });
        }
        Ok(Self {
            dim,
            data,
            labels: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self, DpError> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(DpError::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(dim, data)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self, DpError> {
        if labels.len() != self.len() {
            return Err(DpError::DimensionMismatch {
                expected: self.len(),
                got: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), DpError> {
        if row.len() != self.dim {
            return Err(DpError::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(DpError::NonFinite { row: self.len() });
        }
        self.data.extend_from_slice(row);
        self.labels = None;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn norms(&self) -> Vec<f64> {
        self.rows().map(l2_norm).collect()
    }

    /// Applies `f` to every row, producing a new batch of the same shape.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for r in self.rows() {
            data.extend(f(r));
        }
        Self {
            dim: self.dim,
            data,
            labels: self.labels.clone(),
        }
    }

    /// Column sum.
    pub fn sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for r in self.rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-example clipping rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClipMode {
    /// `g · min(1, C/‖g‖)`; noise std `σ·C`.
    Standard { bound: f64 },
    /// `g · min(1/C, 1/‖g‖)`; noise std `σ`.
    Normalized { bound: f64 },
    /// `g / (‖g‖ + γ)`; noise std `σ`.
    AutoS { gamma: f64 },
}

impl ClipMode {
    /// AUTO-S with the stability constant its authors recommend.
    pub const AUTO_S_DEFAULT_GAMMA: f64 = 0.01;

    pub fn validate(&self) -> Result<(), DpError> {
        let p = match *self {
            ClipMode::Standard { bound } | ClipMode::Normalized { bound } => bound,
            ClipMode::AutoS { gamma } => gamma,
        };
        if p.is_finite() && p > 0.0 {
            Ok(())
        } else {
            Err(DpError::InvalidClip(p))
        }
    }

    pub fn clip(&self, g: &[f64]) -> Vec<f64> {
        match *self {
            ClipMode::Standard { bound } => clip_standard(g, bound),
            ClipMode::Normalized { bound } => clip_normalized(g, bound),
            ClipMode::AutoS { gamma } => clip_auto_s(g, gamma),
        }
    }

    /// Largest norm one clipped row can have.
    pub fn sensitivity(&self) -> f64 {
        match *self {
            ClipMode::Standard { bound } => bound,
            ClipMode::Normalized { .. } | ClipMode::AutoS { .. } => 1.0,
        }
    }

    /// Per-coordinate noise std for noise multiplier `sigma`.
    pub fn noise_std(&self, sigma: f64) -> f64 {
        sigma * self.sensitivity()
    }

    /// The clip bound, if the mode has one.
    pub fn bound(&self) -> Option<f64> {
        match *self {
            ClipMode::Standard { bound } | ClipMode::Normalized { bound } => Some(bound),
            ClipMode::AutoS { .. } => None,
        }
    }
}

pub fn clip_standard(g: &[f64], bound: f64) -> Vec<f64> {
    let n = l2_norm(g);
    if n <= bound {
        g.to_vec()
    } else {
        g.iter().map(|v| bound * (v / n)).collect()
    }
}

/// Equals `clip_standard(g, bound) / bound`.
pub fn clip_normalized(g: &[f64], bound: f64) -> Vec<f64> {
    let n = l2_norm(g);
    if n <= bound {
        g.iter().map(|v| v / bound).collect()
    } else {
        g.iter().map(|v| v / n).collect()
    }
}

pub fn clip_auto_s(g: &[f64], gamma: f64) -> Vec<f64> {
    let s = l2_norm(g) + gamma;
    g.iter().map(|v| v / s).collect()
}

/// Includes each of `0..n` independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

/// `(Σ rows + noise_std·ξ) / denominator`, `ξ ~ N(0, I_d)`.
///
/// Exactly `d` standard normals are drawn from `rng` regardless of batch size
/// or `noise_std`, so two callers sharing a stream see the same `ξ`.
pub fn noisy_aggregate<R: Rng + ?Sized>(
    clipped: &PerExampleGradients,
    noise_std: f64,
    denominator: f64,
    rng: &mut R,
) -> Result<Vec<f64>, DpError> {
    if !(denominator > 0.0) {
        return Err(DpError::InvalidDenominator(denominator));
    }
    if !(noise_std >= 0.0) {
        return Err(DpError::InvalidNoise(noise_std));
    }
    let mut out = clipped.sum();
    for o in out.iter_mut() {
        let xi: f64 = rng.sample(StandardNormal);
        *o = (*o + noise_std * xi) / denominator;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    pub fn adam(dim: usize) -> Self {
        OptimizerState::Adam(AdamState::new(dim))
    }

    /// Applies one step of the optimizer to `theta` along `grad`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], eta: f64) -> Result<(), DpError> {
        if grad.len() != theta.len() {
            return Err(DpError::DimensionMismatch {
                expected: theta.len(),
                got: grad.len(),
            });
        }
        match self {
            OptimizerState::Sgd => {
                for (t, g) in theta.iter_mut().zip(grad) {
                    *t -= eta * g;
                }
            }
            OptimizerState::Adam(s) => {
                if s.first_moment.len() != theta.len() {
                    return Err(DpError::DimensionMismatch {
                        expected: theta.len(),
                        got: s.first_moment.len(),
                    });
                }
                s.step_count += 1;
                let t = s.step_count as i32;
                let bc1 = 1.0 - s.beta1.powi(t);
                let bc2 = 1.0 - s.beta2.powi(t);
                for i in 0..theta.len() {
                    let g = grad[i];
                    let m = s.beta1 * s.first_moment[i] + (1.0 - s.beta1) * g;
                    let v = s.beta2 * s.second_moment[i] + (1.0 - s.beta2) * g * g;
                    s.first_moment[i] = m;
                    s.second_moment[i] = v;
                    theta[i] -= eta * (m / bc1) / ((v / bc2).sqrt() + s.eps_hat);
                }
            }
        }
        Ok(())
    }
}

/// One private update: clip every row per `mode`, add noise with std
/// `mode.noise_std(sigma)`, divide by `denom`, then step the optimizer.
///
/// Empty batches still draw noise and move `theta`.
#[allow(clippy::too_many_arguments)]
pub fn dp_update<R: Rng + ?Sized>(
    theta: &mut [f64],
    batch_grads: &PerExampleGradients,
    mode: ClipMode,
    sigma: f64,
    eta: f64,
    denom: f64,
    state: &mut OptimizerState,
    rng: &mut R,
) -> Result<Vec<f64>, DpError> {
    mode.validate()?;
    if !(sigma >= 0.0) {
        return Err(DpError::InvalidNoise(sigma));
    }
    if batch_grads.dim() != theta.len() {
        return Err(DpError::DimensionMismatch {
            expected: theta.len(),
            got: batch_grads.dim(),
        });
    }
    let clipped = batch_grads.map_rows(|g| mode.clip(g));
    let noisy = noisy_aggregate(&clipped, mode.noise_std(sigma), denom, rng)?;
    state.step(theta, &noisy, eta)?;
    Ok(noisy)
}
