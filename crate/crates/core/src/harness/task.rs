//! Synthetic transfer-learning tasks: Gaussian class blobs in a raw space,
//! passed through a frozen random backbone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::kvconfig::{join_list, ConfigError, KvConfig};
use crate::seed::{derive_seed, mix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    pub num_classes: usize,
    pub raw_dim: usize,
    pub feature_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Class prior; normalized to sum to one.
    pub class_weights: Vec<f64>,
    pub class_separation: f64,
    pub backbone_quality: f64,
    /// Feature noise std at quality 0; the std is `(1 − quality)·feature_noise`.
    pub feature_noise: f64,
    /// Gain applied to backbone outputs.
    pub feature_scale: f64,
    pub seed: u64,
}

impl SyntheticTaskConfig {
    pub const KEYS: &'static [&'static str] = &[
        "num_classes",
        "raw_dim",
        "feature_dim",
        "train_size",
        "test_size",
        "class_weights",
        "class_separation",
        "backbone_quality",
        "feature_noise",
        "feature_scale",
        "task_seed",
    ];

    /// Balanced task with the given knobs.
    pub fn balanced(num_classes: usize, separation: f64, quality: f64, seed: u64) -> Self {
        Self {
            num_classes,
            raw_dim: 16,
            feature_dim: 16,
            train_size: 2000,
            test_size: 1000,
            class_weights: vec![1.0 / num_classes as f64; num_classes],
            class_separation: separation,
            backbone_quality: quality,
            feature_noise: 1.0,
            feature_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidTask(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.raw_dim == 0 || self.feature_dim == 0 {
            return bad("dimensions must be >= 1");
        }
        if self.train_size < self.num_classes || self.test_size < self.num_classes {
            return bad("every split needs at least one example per class");
        }
        if self.class_weights.len() != self.num_classes {
            return bad("class_weights must have num_classes entries");
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return bad("class_weights must be positive");
        }
        if !(self.class_separation > 0.0) {
            return bad("class_separation must be > 0");
        }
        if !(self.backbone_quality > 0.0 && self.backbone_quality <= 1.0) {
            return bad("backbone_quality must be in (0, 1]");
        }
        if !(self.feature_noise >= 0.0) {
            return bad("feature_noise must be >= 0");
        }
        if !(self.feature_scale > 0.0) || !self.feature_scale.is_finite() {
            return bad("feature_scale must be positive");
        }
        Ok(())
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let s: f64 = self.class_weights.iter().sum();
        self.class_weights.iter().map(|w| w / s).collect()
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let k: usize = kv.get_or("num_classes", 5)?;
        let weights = kv
            .get_list::<f64>("class_weights")?
            .unwrap_or_else(|| vec![1.0 / k as f64; k]);
        Ok(Self {
            num_classes: k,
            raw_dim: kv.get_or("raw_dim", 16)?,
            feature_dim: kv.get_or("feature_dim", 16)?,
            train_size: kv.get_or("train_size", 2000)?,
            test_size: kv.get_or("test_size", 1000)?,
            class_weights: weights,
            class_separation: kv.get_or("class_separation", 2.0)?,
            backbone_quality: kv.get_or("backbone_quality", 1.0)?,
            feature_noise: kv.get_or("feature_noise", 1.0)?,
            feature_scale: kv.get_or("feature_scale", 1.0)?,
            seed: kv.get_or("task_seed", 0)?,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("num_classes", self.num_classes);
        kv.set("raw_dim", self.raw_dim);
        kv.set("feature_dim", self.feature_dim);
        kv.set("train_size", self.train_size);
        kv.set("test_size", self.test_size);
        kv.set("class_weights", join_list(&self.class_weights));
        kv.set("class_separation", self.class_separation);
        kv.set("backbone_quality", self.backbone_quality);
        kv.set("feature_noise", self.feature_noise);
        kv.set("feature_scale", self.feature_scale);
        kv.set("task_seed", self.seed);
        kv
    }
}

/// Labelled feature matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub config: SyntheticTaskConfig,
    pub train: Dataset,
    pub test: Dataset,
}

/// Frozen feature extractor: `tanh(W x)` plus input-keyed noise with std
/// `(1 − quality)·noise_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    raw_dim: usize,
    feature_dim: usize,
    projection: Vec<f64>,
    quality: f64,
    noise_scale: f64,
    seed: u64,
}

impl Backbone {
    pub fn new(raw_dim: usize, feature_dim: usize, quality: f64, noise_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xBAC0]));
        let scale = 1.0 / (raw_dim as f64).sqrt();
        let projection = (0..raw_dim * feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self {
            raw_dim,
            feature_dim,
            projection,
            quality,
            noise_scale,
            seed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Deterministic in `(x, seed)`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.raw_dim, "raw input dimension");
        let std = (1.0 - self.quality) * self.noise_scale;
        let mut rng = (std > 0.0).then(|| {
            let key = x.iter().fold(mix64(self.seed ^ 0xFEA7), |h, v| mix64(h ^ v.to_bits()));
            ChaCha8Rng::seed_from_u64(key)
        });
        (0..self.feature_dim)
            .map(|j| {
                let w = &self.projection[j * self.raw_dim..(j + 1) * self.raw_dim];
                let act = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().tanh();
                match rng.as_mut() {
                    Some(r) => act + std * r.sample::<f64, _>(StandardNormal),
                    None => act,
                }
            })
            .collect()
    }
}

fn class_means(cfg: &SyntheticTaskConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x3EA5]));
    (0..cfg.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.raw_dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|a| a * cfg.class_separation / n).collect()
        })
        .collect()
}

fn draw_split(cfg: &SyntheticTaskConfig, means: &[Vec<f64>], backbone: &Backbone, size: usize, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream]));
    let weights = cfg.normalized_weights();
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cdf.push(acc);
    }
    let mut features = Vec::with_capacity(size * backbone.feature_dim());
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        // The first K rows cover every class once; the rest follow the prior.
        let y = if i < cfg.num_classes {
            i
        } else {
            let u: f64 = rng.random();
            cdf.iter().position(|&c| u < c).unwrap_or(cfg.num_classes - 1)
        };
        let x: Vec<f64> = means[y]
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect();
        features.extend(backbone.features(&x).into_iter().map(|v| v * cfg.feature_scale));
        labels.push(y);
    }
    Dataset {
        dim: backbone.feature_dim(),
        num_classes: cfg.num_classes,
        features,
        labels,
    }
}

pub fn gen_task(cfg: &SyntheticTaskConfig) -> Result<Task, HarnessError> {
    cfg.validate()?;
    let means = class_means(cfg);
    let backbone = Backbone::new(
        cfg.raw_dim,
        cfg.feature_dim,
        cfg.backbone_quality,
        cfg.feature_noise,
        cfg.seed,
    );
    let train = draw_split(cfg, &means, &backbone, cfg.train_size, 1);
    let test = draw_split(cfg, &means, &backbone, cfg.test_size, 2);
    Ok(Task {
        config: cfg.clone(),
        train,
        test,
    })
}

/// Error of a nearest-centroid classifier fit on `fit` and scored on `probe`.
pub fn nearest_centroid_error(fit: &Dataset, probe: &Dataset) -> f64 {
    let (k, d) = (fit.num_classes, fit.dim);
    let mut centroids = vec![0.0; k * d];
    let counts = fit.class_counts();
    for i in 0..fit.len() {
        let y = fit.labels[i];
        for (c, v) in centroids[y * d..(y + 1) * d].iter_mut().zip(fit.row(i)) {
            *c += v / counts[y] as f64;
        }
    }
    let wrong = (0..probe.len())
        .filter(|&i| {
            let x = probe.row(i);
            let best = (0..k)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a * d..(a + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    let db: f64 = centroids[b * d..(b + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best != probe.labels[i]
        })
        .count();
    wrong as f64 / probe.len() as f64
}
