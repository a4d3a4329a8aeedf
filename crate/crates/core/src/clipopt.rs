//! The clipping mean-squared-error objective and its exact minimizer.
//!
//! For a fixed minibatch with per-example gradients `g_i` and standard-variant
//! noise of per-coordinate std `σC`, the error of the clipped noisy sum is
//!
//! `MSE(C) = C²σ²d + ‖Σ_{i∈I_C} ((‖g_i‖−C)/‖g_i‖) g_i‖²`,  `I_C = {i : ‖g_i‖ > C}`.
//!
//! Between consecutive gradient norms `I_C` is fixed and the objective is a
//! quadratic in `C`, so the global minimizer is found by checking the clamped
//! vertex of each segment and every breakpoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpcore::{dot, PerExampleGradients};

/// Breakpoint proximity below which the derivative is reported undefined.
pub const BREAKPOINT_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClipOptError {
    #[error("clip bound {0} must be > 0")]
    InvalidBound(f64),
    #[error("noise multiplier {0} must be >= 0")]
    InvalidSigma(f64),
    #[error("C = {c} is within {BREAKPOINT_EPS} of gradient norm {norm}; derivative undefined")]
    AtBreakpoint { c: f64, norm: f64 },
    #[error("grid must be non-empty and strictly positive")]
    InvalidGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSolution {
    pub c_star: f64,
    pub mse_at_c_star: f64,
    /// `{i : ‖g_i‖ > c_star}`, ascending.
    pub clipped_indices: Vec<usize>,
    /// `G = Σ_{i∈I} g_i`.
    pub g_aggregate: Vec<f64>,
    /// `N = Σ_{i∈I} g_i/‖g_i‖`.
    pub unit_aggregate: Vec<f64>,
    /// Norm interval on which `I` is constant and that holds `c_star`;
    /// `None` upper means unbounded.
    pub segment_lower: f64,
    pub segment_upper: Option<f64>,
    /// All gradients were zero (or the batch was empty).
    pub degenerate: bool,
}

impl ClipSolution {
    /// False at a breakpoint and at the `f64::MIN_POSITIVE` floor used when the
    /// lowest segment's vertex is non-positive.
    pub fn is_interior(&self) -> bool {
        self.c_star > self.segment_lower.max(f64::MIN_POSITIVE) && self.segment_upper.is_none_or(|u| self.c_star < u)
    }
}

fn check(sigma: f64, c: f64) -> Result<(), ClipOptError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(ClipOptError::InvalidSigma(sigma));
    }
    if !(c > 0.0) {
        return Err(ClipOptError::InvalidBound(c));
    }
    Ok(())
}

/// `MSE(C)` by direct summation over the clipped rows.
pub fn mse_of_c(grads: &PerExampleGradients, sigma: f64, c: f64) -> Result<f64, ClipOptError> {
    check(sigma, c)?;
    let norms = grads.norms();
    Ok(mse_with_norms(grads, &norms, sigma, c))
}

fn mse_with_norms(grads: &PerExampleGradients, norms: &[f64], sigma: f64, c: f64) -> f64 {
    let d = grads.dim() as f64;
    let mut bias = vec![0.0; grads.dim()];
    for (g, &r) in grads.rows().zip(norms) {
        if r > c {
            let w = (r - c) / r;
            for (b, v) in bias.iter_mut().zip(g) {
                *b += w * v;
            }
        }
    }
    c * c * sigma * sigma * d + dot(&bias, &bias)
}

/// `G_C` and `N_C` for the clipped set at `c`.
fn aggregates(grads: &PerExampleGradients, norms: &[f64], c: f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut idx = Vec::new();
    let mut g_agg = vec![0.0; grads.dim()];
    let mut n_agg = vec![0.0; grads.dim()];
    for (i, (g, &r)) in grads.rows().zip(norms).enumerate() {
        if r > c {
            idx.push(i);
            for k in 0..g.len() {
                g_agg[k] += g[k];
                n_agg[k] += g[k] / r;
            }
        }
    }
    (idx, g_agg, n_agg)
}

/// `dMSE/dC = 2Cσ²d + 2C NᵀN − 2NᵀG`.
pub fn mse_derivative(grads: &PerExampleGradients, sigma: f64, c: f64) -> Result<f64, ClipOptError> {
    check(sigma, c)?;
    let norms = grads.norms();
    if let Some(&norm) = norms.iter().find(|&&r| (c - r).abs() < BREAKPOINT_EPS) {
        return Err(ClipOptError::AtBreakpoint { c, norm });
    }
    let (_, g_agg, n_agg) = aggregates(grads, &norms, c);
    let sd = sigma * sigma * grads.dim() as f64;
    Ok(2.0 * c * sd + 2.0 * c * dot(&n_agg, &n_agg) - 2.0 * dot(&n_agg, &g_agg))
}

/// Exact global minimizer of [`mse_of_c`] over `C > 0`; ties go to the
/// smallest `C`.
pub fn solve_optimal_c(grads: &PerExampleGradients, sigma: f64) -> Result<ClipSolution, ClipOptError> {
    check(sigma, 1.0)?;
    let dim = grads.dim();
    let sd = sigma * sigma * dim as f64;
    let norms = grads.norms();

    let mut order: Vec<usize> = (0..norms.len()).filter(|&i| norms[i] > 0.0).collect();
    if order.is_empty() {
        let c = f64::MIN_POSITIVE;
        return Ok(ClipSolution {
            c_star: c,
            mse_at_c_star: c * c * sd,
            clipped_indices: Vec::new(),
            g_aggregate: vec![0.0; dim],
            unit_aggregate: vec![0.0; dim],
            segment_lower: 0.0,
            segment_upper: None,
            degenerate: true,
        });
    }
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));

    // Breakpoints r_0 = 0 < r_1 < ... < r_m.
    let mut breaks = vec![0.0];
    for &i in &order {
        if norms[i] > *breaks.last().unwrap() {
            breaks.push(norms[i]);
        }
    }
    let m = breaks.len() - 1;

    // Candidates (C, MSE), produced by sweeping segments from the top down
    // while adding gradients to the running aggregates.
    let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(2 * m + 1);
    let eval = |c: f64, g: &[f64], n: &[f64]| -> f64 {
        let resid: f64 = g.iter().zip(n).map(|(gv, nv)| (gv - c * nv).powi(2)).sum();
        c * c * sd + resid
    };

    let mut g_agg = vec![0.0; dim];
    let mut n_agg = vec![0.0; dim];
    // Top segment [r_m, ∞): nothing clipped, MSE = C²σ²d, smallest at r_m.
    candidates.push((breaks[m], eval(breaks[m], &g_agg, &n_agg)));
    let mut next = order.len();
    for j in (0..m).rev() {
        // Segment [r_j, r_{j+1}]: clipped set is every norm >= r_{j+1}.
        while next > 0 && norms[order[next - 1]] >= breaks[j + 1] {
            next -= 1;
            let i = order[next];
            let (g, r) = (grads.row(i), norms[i]);
            for k in 0..dim {
                g_agg[k] += g[k];
                n_agg[k] += g[k] / r;
            }
        }
        let lo = if j == 0 { f64::MIN_POSITIVE } else { breaks[j] };
        let hi = breaks[j + 1];
        let a = dot(&n_agg, &n_agg) + sd;
        let vertex = if a > 0.0 { dot(&n_agg, &g_agg) / a } else { lo };
        let c = vertex.clamp(lo, hi);
        candidates.push((c, eval(c, &g_agg, &n_agg)));
        if j > 0 {
            candidates.push((lo, eval(lo, &g_agg, &n_agg)));
        }
    }

    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = candidates[0];
    for &cand in &candidates[1..] {
        if cand.1 < best.1 {
            best = cand;
        }
    }
    let c_star = best.0;

    let (clipped_indices, g_aggregate, unit_aggregate) = aggregates(grads, &norms, c_star);
    let seg = breaks.partition_point(|&b| b <= c_star);
    // breaks[seg - 1] <= c_star < breaks[seg] (or c_star >= r_m).
    let segment_lower = breaks[seg - 1];
    let segment_upper = breaks.get(seg).copied();
    Ok(ClipSolution {
        c_star,
        mse_at_c_star: mse_with_norms(grads, &norms, sigma, c_star),
        clipped_indices,
        g_aggregate,
        unit_aggregate,
        segment_lower,
        segment_upper,
        degenerate: false,
    })
}

/// Brute-force minimization of [`mse_of_c`] over `grid`; first grid point wins ties.
pub fn grid_oracle(grads: &PerExampleGradients, sigma: f64, grid: &[f64]) -> Result<(f64, f64), ClipOptError> {
    if grid.is_empty() || grid.iter().any(|&c| !(c > 0.0)) {
        return Err(ClipOptError::InvalidGrid);
    }
    check(sigma, grid[0])?;
    let norms = grads.norms();
    let mut best = (grid[0], f64::INFINITY);
    for &c in grid {
        let v = mse_with_norms(grads, &norms, sigma, c);
        if v < best.1 {
            best = (c, v);
        }
    }
    Ok(best)
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let step = (b - a) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { (a + step * i as f64).exp() })
                .collect()
        }
    }
}

/// Constants of the clipped-SGD convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KoloskovaParams {
    pub smoothness_l: f64,
    pub eta: f64,
    pub sigma: f64,
    pub sigma_minibatch: f64,
    pub batch_size: f64,
    pub steps: u64,
    pub f0_gap: f64,
}

/// `1/(4Lησ³)`, the stationary point of the two noise terms of the bound.
pub fn koloskova_c_star(l: f64, eta: f64, sigma: f64) -> f64 {
    1.0 / (4.0 * l * eta * sigma.powi(3))
}

/// Six-term bound on the expected gradient norm with all O-constants at 1
/// (uncalibrated):
///
/// `LηCσ² + √(LηCσ) + min(σ_B², σ_B⁴/C²) + ηLσ_B²/B + F₀/(ηT) + F₀²/(η²T²C²)`
pub fn koloskova_bound(p: &KoloskovaParams, c: f64) -> f64 {
    let KoloskovaParams {
        smoothness_l: l,
        eta,
        sigma,
        sigma_minibatch: sb,
        batch_size: b,
        steps,
        f0_gap: f0,
    } = *p;
    let t = steps as f64;
    let sb2 = sb * sb;
    l * eta * c * sigma * sigma
        + (l * eta * c * sigma).sqrt()
        + sb2.min(sb2 * sb2 / (c * c))
        + eta * l * sb2 / b
        + f0 / (eta * t)
        + f0 * f0 / (eta * eta * t * t * c * c)
}
