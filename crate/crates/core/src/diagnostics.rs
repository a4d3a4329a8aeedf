//! Clipping re-weighting and gradient-norm diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpcore::{l2_norm, PerExampleGradients};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("gradients carry no class labels")]
    Unlabelled,
    #[error("empty input")]
    Empty,
    #[error("baseline maximum class weight is zero")]
    DegenerateBaseline,
    #[error("class sets differ between current and baseline")]
    ClassMismatch,
    #[error("predictions ({0}) and labels ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
}

/// Quantile levels reported by [`grad_norm_distribution`].
pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];
pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

/// `min(1, C/‖g‖)`; the zero vector keeps all of its (zero) weight.
pub fn retained_weight(g: &[f64], c: f64) -> f64 {
    weight_for_norm(l2_norm(g), c)
}

fn weight_for_norm(norm: f64, c: f64) -> f64 {
    if norm <= c {
        1.0
    } else {
        c / norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeanWeight {
    pub class_id: usize,
    pub mean_weight: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRetainedWeight {
    pub class_id: usize,
    pub mean_weight: f64,
    pub relative_weight: f64,
}

/// Per-class mean weights; classes in `0..num_classes` with no rows are
/// returned in the second element instead.
pub fn class_retained_weights(
    grads: &PerExampleGradients,
    c: f64,
    num_classes: usize,
) -> Result<(Vec<ClassMeanWeight>, Vec<usize>), DiagnosticsError> {
    let labels = grads.labels().ok_or(DiagnosticsError::Unlabelled)?;
    let mut sums = vec![(0.0, 0usize); num_classes];
    for (g, &y) in grads.rows().zip(labels) {
        let slot = sums
            .get_mut(y)
            .ok_or(DiagnosticsError::LabelOutOfRange { label: y, num_classes })?;
        slot.0 += retained_weight(g, c);
        slot.1 += 1;
    }
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for (class_id, (s, n)) in sums.into_iter().enumerate() {
        if n == 0 {
            log::warn!("class {class_id} has no examples; excluded from retained weights");
            missing.push(class_id);
        } else {
            out.push(ClassMeanWeight {
                class_id,
                mean_weight: s / n as f64,
                count: n,
            });
        }
    }
    Ok((out, missing))
}

/// Divides each current class mean by the largest baseline class mean.
pub fn relative_retained_weights(
    current: &[ClassMeanWeight],
    baseline: &[ClassMeanWeight],
) -> Result<Vec<ClassRetainedWeight>, DiagnosticsError> {
    let mut a: Vec<usize> = current.iter().map(|c| c.class_id).collect();
    let mut b: Vec<usize> = baseline.iter().map(|c| c.class_id).collect();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(DiagnosticsError::ClassMismatch);
    }
    let max = baseline.iter().map(|c| c.mean_weight).fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(DiagnosticsError::DegenerateBaseline);
    }
    Ok(current
        .iter()
        .map(|c| ClassRetainedWeight {
            class_id: c.class_id,
            mean_weight: c.mean_weight,
            relative_weight: c.mean_weight / max,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormSummary {
    /// `(level, value)` pairs at [`QUANTILE_LEVELS`].
    pub quantiles: Vec<(f64, f64)>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub count: usize,
}

impl GradNormSummary {
    pub fn median(&self) -> f64 {
        self.quantile(0.5).expect("median is always reported")
    }

    pub fn quantile(&self, level: f64) -> Option<f64> {
        self.quantiles.iter().find(|(l, _)| *l == level).map(|(_, v)| *v)
    }
}

/// Linear-interpolation quantile of sorted data (the "type 7" estimator).
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = level * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `bins` log-spaced edges covering `[min, max]` of the positive norms.
pub fn log_bin_edges(min: f64, max: f64, bins: usize) -> Vec<f64> {
    let bins = bins.max(1);
    if !(min > 0.0) || max <= min {
        let hi = if max > 0.0 { max } else { 1.0 };
        let lo = if min > 0.0 && min < hi { min } else { hi * 0.5 };
        return vec![lo, hi.max(lo * (1.0 + 1e-12))];
    }
    let (a, b) = (min.ln(), max.ln());
    let step = (b - a) / bins as f64;
    (0..=bins)
        .map(|i| match i {
            0 => min,
            i if i == bins => max,
            i => (a + step * i as f64).exp(),
        })
        .collect()
}

/// Counts values into `edges`; values below the first edge land in the first
/// bin and values above the last in the last bin.
pub fn histogram(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len().saturating_sub(1).max(1);
    let mut counts = vec![0usize; bins];
    for &v in values {
        // first edge index strictly greater than v
        let idx = edges.partition_point(|&e| e <= v);
        let bin = idx.saturating_sub(1).min(bins - 1);
        counts[bin] += 1;
    }
    counts
}

pub fn summarize_norms(norms: &[f64], bins: usize) -> Result<GradNormSummary, DiagnosticsError> {
    if norms.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantiles = QUANTILE_LEVELS
        .iter()
        .map(|&l| (l, quantile_sorted(&sorted, l)))
        .collect();
    let min_pos = sorted.iter().copied().find(|&v| v > 0.0).unwrap_or(0.0);
    let edges = log_bin_edges(min_pos, *sorted.last().unwrap(), bins);
    let counts = histogram(&sorted, &edges);
    Ok(GradNormSummary {
        quantiles,
        bin_edges: edges,
        counts,
        count: sorted.len(),
    })
}

/// Quantiles and a log-binned histogram of per-example gradient norms.
pub fn grad_norm_distribution(grads: &PerExampleGradients) -> Result<GradNormSummary, DiagnosticsError> {
    summarize_norms(&grads.norms(), DEFAULT_HISTOGRAM_BINS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: usize,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub macro_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// Classes in `0..num_classes` absent from the labels.
    pub excluded: Vec<usize>,
}

pub fn per_class_accuracy(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<AccuracyReport, DiagnosticsError> {
    if predictions.len() != labels.len() {
        return Err(DiagnosticsError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mut tally = vec![(0usize, 0usize); num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        let t = tally
            .get_mut(y)
            .ok_or(DiagnosticsError::LabelOutOfRange { label: y, num_classes })?;
        t.1 += 1;
        if p == y {
            t.0 += 1;
        }
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for (class_id, (hit, n)) in tally.into_iter().enumerate() {
        if n == 0 {
            log::warn!("class {class_id} absent from labels; excluded from macro accuracy");
            excluded.push(class_id);
        } else {
            per_class.push(ClassAccuracy {
                class_id,
                accuracy: hit as f64 / n as f64,
                count: n,
            });
        }
    }
    let macro_accuracy = per_class.iter().map(|c| c.accuracy).sum::<f64>() / per_class.len() as f64;
    Ok(AccuracyReport {
        macro_accuracy,
        per_class,
        excluded,
    })
}

/// Unweighted mean of per-class accuracies.
pub fn macro_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64, DiagnosticsError> {
    per_class_accuracy(predictions, labels, num_classes).map(|r| r.macro_accuracy)
}

/// One exported table row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDiagnosticRow {
    pub clip_bound: f64,
    pub class_id: usize,
    pub accuracy: f64,
    pub mean_weight: f64,
    pub relative_weight: f64,
}

/// Retained weights at each `bounds` entry, relative to the `C = 1` baseline,
/// joined with per-class accuracy. Rows within each bound are ordered by
/// accuracy (ascending, then class id).
pub fn class_diagnostic_rows(
    grads: &PerExampleGradients,
    accuracy: &[ClassAccuracy],
    bounds: &[f64],
    num_classes: usize,
) -> Result<Vec<ClassDiagnosticRow>, DiagnosticsError> {
    let (baseline, _) = class_retained_weights(grads, 1.0, num_classes)?;
    let acc: BTreeMap<usize, f64> = accuracy.iter().map(|a| (a.class_id, a.accuracy)).collect();
    let mut rows = Vec::new();
    for &c in bounds {
        let (current, _) = class_retained_weights(grads, c, num_classes)?;
        let mut block: Vec<ClassDiagnosticRow> = relative_retained_weights(&current, &baseline)?
            .into_iter()
            .map(|w| ClassDiagnosticRow {
                clip_bound: c,
                class_id: w.class_id,
                accuracy: acc.get(&w.class_id).copied().unwrap_or(f64::NAN),
                mean_weight: w.mean_weight,
                relative_weight: w.relative_weight,
            })
            .collect();
        block.sort_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(a.class_id.cmp(&b.class_id)));
        rows.extend(block);
    }
    Ok(rows)
}

pub fn class_rows_csv(rows: &[ClassDiagnosticRow]) -> String {
    let mut s = String::from("clip_bound,class_id,accuracy,mean_weight,relative_weight\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.clip_bound, r.class_id, r.accuracy, r.mean_weight, r.relative_weight
        );
    }
    s
}

pub fn quantiles_csv(summary: &GradNormSummary) -> String {
    let mut s = String::from("quantile,value\n");
    for (l, v) in &summary.quantiles {
        let _ = writeln!(s, "{l},{v}");
    }
    s
}

pub fn histogram_csv(summary: &GradNormSummary) -> String {
    let mut s = String::from("bin_lower,bin_upper,count\n");
    for (i, c) in summary.counts.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", summary.bin_edges[i], summary.bin_edges[i + 1], c);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(rows: &[[f64; 2]], labels: &[usize]) -> PerExampleGradients {
        PerExampleGradients::from_rows(2, rows)
            .unwrap()
            .with_labels(labels.to_vec())
            .unwrap()
    }

    #[test]
    fn retained_weight_examples() {
        assert_eq!(retained_weight(&[3.0, 4.0], 1.0), 0.2);
        assert_eq!(retained_weight(&[0.3, 0.4], 1.0), 1.0);
        assert_eq!(retained_weight(&[0.0, 0.0], 1e-9), 1.0);
    }

    #[test]
    fn class_means() {
        let g = labelled(&[[2.0, 0.0], [0.0, 4.0], [0.1, 0.0]], &[0, 0, 1]);
        let (w, missing) = class_retained_weights(&g, 1.0, 3).unwrap();
        assert_eq!(w[0].mean_weight, 0.375);
        assert_eq!(w[1].mean_weight, 1.0);
        assert_eq!(missing, vec![2]);

        let (w, _) = class_retained_weights(&g, 10.0, 2).unwrap();
        assert!(w.iter().all(|c| c.mean_weight == 1.0));

        let twin = labelled(&[[2.0, 1.0], [2.0, 1.0]], &[0, 1]);
        let (w, _) = class_retained_weights(&twin, 0.5, 2).unwrap();
        assert_eq!(w[0].mean_weight, w[1].mean_weight);

        let unl = PerExampleGradients::from_rows(2, &[[1.0, 1.0]]).unwrap();
        assert_eq!(class_retained_weights(&unl, 1.0, 1), Err(DiagnosticsError::Unlabelled));
    }

    fn means(v: &[f64]) -> Vec<ClassMeanWeight> {
        v.iter()
            .enumerate()
            .map(|(i, &m)| ClassMeanWeight {
                class_id: i,
                mean_weight: m,
                count: 1,
            })
            .collect()
    }

    #[test]
    fn relative_weights() {
        let base = means(&[0.5, 1.0]);
        let cur = means(&[0.25, 0.5]);
        let r = relative_retained_weights(&cur, &base).unwrap();
        assert_eq!(r.iter().map(|c| c.relative_weight).collect::<Vec<_>>(), vec![0.25, 0.5]);

        let base = means(&[0.3, 0.6, 0.45]);
        let own = relative_retained_weights(&base, &base).unwrap();
        assert_eq!(own.iter().map(|c| c.relative_weight).fold(0.0, f64::max), 1.0);

        let scaled = means(&[0.15, 0.3, 0.225]);
        let r = relative_retained_weights(&scaled, &base).unwrap();
        for (a, b) in r.iter().zip(&own) {
            assert!((a.relative_weight - 0.5 * b.relative_weight).abs() < 1e-15);
        }

        assert_eq!(
            relative_retained_weights(&means(&[0.1]), &means(&[0.0])),
            Err(DiagnosticsError::DegenerateBaseline)
        );
        assert_eq!(
            relative_retained_weights(&means(&[0.1]), &means(&[0.2, 0.3])),
            Err(DiagnosticsError::ClassMismatch)
        );
    }

    #[test]
    fn norm_summary() {
        let all_same = vec![2.5; 17];
        let s = summarize_norms(&all_same, 10).unwrap();
        assert!(s.quantiles.iter().all(|(_, v)| *v == 2.5));
        assert_eq!(s.counts.iter().sum::<usize>(), 17);

        let ramp: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = summarize_norms(&ramp, 20).unwrap();
        assert_eq!(s.median(), 50.5);
        assert_eq!(s.counts.iter().sum::<usize>(), 100);
        assert!(s.quantiles.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(s.bin_edges.first(), Some(&1.0));
        assert_eq!(s.bin_edges.last(), Some(&100.0));

        assert_eq!(summarize_norms(&[], 5), Err(DiagnosticsError::Empty));
    }

    #[test]
    fn histogram_counts_are_additive() {
        let a = [0.1, 0.5, 2.0, 9.0];
        let b = [0.3, 3.0, 12.0];
        let edges = log_bin_edges(0.1, 12.0, 6);
        let both: Vec<f64> = a.iter().chain(&b).copied().collect();
        let (ha, hb, hab) = (histogram(&a, &edges), histogram(&b, &edges), histogram(&both, &edges));
        for i in 0..hab.len() {
            assert_eq!(ha[i] + hb[i], hab[i]);
        }
    }

    #[test]
    fn accuracy_examples() {
        let labels = [0, 1, 2, 1, 0];
        assert_eq!(macro_accuracy(&labels, &labels, 3).unwrap(), 1.0);

        let mut labels = vec![0usize; 99];
        labels.push(1);
        let preds = vec![0usize; 100];
        let r = per_class_accuracy(&preds, &labels, 2).unwrap();
        assert_eq!(r.macro_accuracy, 0.5);

        let r = per_class_accuracy(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(r.excluded, vec![1]);
        assert_eq!(r.macro_accuracy, 1.0);

        assert!(per_class_accuracy(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let preds = [0, 1, 1, 2, 0, 2, 1];
        let labels = [0, 1, 0, 2, 2, 2, 1];
        let a = macro_accuracy(&preds, &labels, 3).unwrap();
        let perm = [6, 2, 4, 0, 1, 5, 3];
        let p2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(a, macro_accuracy(&p2, &l2, 3).unwrap());
    }

    #[test]
    fn diagnostic_rows_are_sorted_by_accuracy() {
        let g = labelled(&[[2.0, 0.0], [0.0, 0.5], [3.0, 0.0]], &[0, 1, 2]);
        let acc = vec![
            ClassAccuracy {
                class_id: 0,
                accuracy: 0.9,
                count: 1,
            },
            ClassAccuracy {
                class_id: 1,
                accuracy: 0.2,
                count: 1,
            },
            ClassAccuracy {
                class_id: 2,
                accuracy: 0.5,
                count: 1,
            },
        ];
        let rows = class_diagnostic_rows(&g, &acc, &[1.0, 10.0], 3).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[..3].iter().map(|r| r.class_id).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(rows[3..].iter().all(|r| r.mean_weight == 1.0));
        let csv = class_rows_csv(&rows);
        assert!(csv.starts_with("clip_bound,class_id,accuracy,mean_weight,relative_weight\n"));
        assert_eq!(csv.lines().count(), 7);
    }
}
