//! Frozen-backbone linear probing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode, EncoderParams};
use crate::dataset::{load_full_clip, ClipRecord, Manifest};
use crate::error::{ensure, Error, Result};
use crate::views::eval_view;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate, cosine-decayed to zero over all steps.
    pub lr: f64,
    pub momentum: f64,
    /// Sigmoid score threshold for multi-label predictions.
    pub threshold: f64,
    /// Frames of the evaluation view (segment centers).
    pub eval_frames: usize,
    /// `(width, height)` of the evaluation view.
    pub eval_size: (usize, usize),
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            momentum: 0.9,
            threshold: 0.5,
            eval_frames: 8,
            eval_size: (224, 224),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr > 0.0,
            Validation,
            "probe lr must be positive, got {}",
            self.lr
        );
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            Validation,
            "threshold must lie in (0, 1), got {}",
            self.threshold
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Validation,
            "momentum must lie in [0, 1)"
        );
        ensure!(
            self.batch_size >= 1,
            Validation,
            "batch_size must be at least 1"
        );
        ensure!(
            self.eval_frames >= 1,
            Validation,
            "eval_frames must be at least 1"
        );
        Ok(())
    }

    /// Learning rate of optimizer step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr;
        }
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
    }
}

/// Class-token feature of the deterministic evaluation view. The backbone is
/// only read.
pub fn extract_feature(
    record: &ClipRecord,
    backbone: &EncoderParams,
    cfg: &ProbeConfig,
) -> Result<Vec<f64>> {
    let clip = load_full_clip(record)?;
    let view = eval_view(record, &clip, cfg.eval_frames, cfg.eval_size);
    encode(&view.frames, backbone)
}

pub fn extract_features(
    manifest: &Manifest,
    backbone: &EncoderParams,
    cfg: &ProbeConfig,
) -> Result<Vec<Vec<f64>>> {
    manifest
        .records
        .iter()
        .map(|r| extract_feature(r, backbone, cfg))
        .collect()
}

/// A linear classifier over standardized features. Mean and scale are
/// fitted on the training features and applied to every input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub dim: usize,
    pub num_classes: usize,
    pub multi_label: bool,
    pub threshold: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[dim, num_classes]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: BTreeSet<usize>,
    /// Softmax probabilities (single-label) or per-class sigmoid scores.
    pub scores: Vec<f64>,
}

impl LinearProbe {
    fn standardize(&self, feature: &[f64]) -> Vec<f64> {
        feature
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.num_classes..(i + 1) * self.num_classes];
            for (zj, wj) in z.iter_mut().zip(row) {
                *zj += xi * wj;
            }
        }
        z
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            feature.len() == self.dim,
            Shape,
            "feature has {} dims, classifier expects {}",
            feature.len(),
            self.dim
        );
        Ok(self.logits_std(&self.standardize(feature)))
    }

    pub fn predict(&self, feature: &[f64]) -> Result<Prediction> {
        Ok(decide(
            &self.logits(feature)?,
            self.multi_label,
            self.threshold,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("classifier serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Argmax (lowest index on ties) for single-label; every class whose sigmoid
/// score reaches `threshold` for multi-label, possibly none.
pub fn decide(logits: &[f64], multi_label: bool, threshold: f64) -> Prediction {
    if multi_label {
        let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let labels = scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s >= threshold)
            .map(|(i, _)| i)
            .collect();
        Prediction { labels, scores }
    } else {
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > logits[b] { i } else { b });
        Prediction {
            labels: BTreeSet::from([best]),
            scores: softmax(logits),
        }
    }
}

/// Trains a zero-initialized linear layer with momentum SGD: softmax
/// cross-entropy on the primary label, or per-class sigmoid binary
/// cross-entropy when `multi_label`.
pub fn fit_linear_probe(
    features: &[Vec<f64>],
    labels: &[BTreeSet<usize>],
    num_classes: usize,
    multi_label: bool,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    cfg.validate()?;
    ensure!(
        features.len() == labels.len(),
        Shape,
        "{} features for {} label sets",
        features.len(),
        labels.len()
    );
    ensure!(
        !features.is_empty(),
        Precondition,
        "probe training set is empty"
    );
    let dim = features[0].len();
    ensure!(
        features.iter().all(|f| f.len() == dim),
        Shape,
        "features have differing dimensions"
    );
    ensure!(
        labels.iter().flatten().all(|&l| l < num_classes),
        Validation,
        "label out of range for {num_classes} classes"
    );
    let distinct: BTreeSet<usize> = if multi_label {
        labels.iter().flatten().copied().collect()
    } else {
        labels.iter().filter_map(|l| l.first().copied()).collect()
    };
    ensure!(
        distinct.len() >= 2,
        Precondition,
        "probe training set represents {} class(es); at least 2 are needed",
        distinct.len()
    );

    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, x), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in &mut scale {
        *s = s.sqrt().max(1e-8);
    }
    let mut probe = LinearProbe {
        dim,
        num_classes,
        multi_label,
        threshold: cfg.threshold,
        mean,
        scale,
        weight: vec![0.0; dim * num_classes],
        bias: vec![0.0; num_classes],
    };
    let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();

    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches = xs.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let mut vw = vec![0.0; probe.weight.len()];
    let mut vb = vec![0.0; num_classes];
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; probe.weight.len()];
            let mut gb = vec![0.0; num_classes];
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let z = probe.logits_std(&xs[i]);
                let dz: Vec<f64> = if multi_label {
                    z.iter()
                        .enumerate()
                        .map(|(c, &v)| sigmoid(v) - labels[i].contains(&c) as u8 as f64)
                        .collect()
                } else {
                    let target = *labels[i].first().expect("label sets are non-empty");
                    let mut p = softmax(&z);
                    p[target] -= 1.0;
                    p
                };
                for (d, x) in xs[i].iter().enumerate() {
                    let row = &mut gw[d * num_classes..(d + 1) * num_classes];
                    for (g, dzc) in row.iter_mut().zip(&dz) {
                        *g += inv * x * dzc;
                    }
                }
                for (g, dzc) in gb.iter_mut().zip(&dz) {
                    *g += inv * dzc;
                }
            }
            let lr = cfg.lr_at(step, total);
            for ((w, v), g) in probe.weight.iter_mut().zip(&mut vw).zip(&gw) {
                *v = cfg.momentum * *v + g;
                *w -= lr * *v;
            }
            for ((b, v), g) in probe.bias.iter_mut().zip(&mut vb).zip(&gb) {
                *v = cfg.momentum * *v + g;
                *b -= lr * *v;
            }
            step += 1;
        }
    }
    Ok(probe)
}

pub const PREDICTIONS_SCHEMA_VERSION: u32 = 1;

/// Prediction dump: clip id → predicted labels and scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub schema_version: u32,
    pub config_hash: String,
    pub multi_label: bool,
    pub predictions: BTreeMap<String, Prediction>,
}

impl PredictionDump {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("predictions serialize");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize) -> ProbeConfig {
        ProbeConfig {
            epochs,
            lr: 0.1,
            ..ProbeConfig::default()
        }
    }

    fn toy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<BTreeSet<usize>>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = i % 2;
                let shift = if c == 0 { -1.0 } else { 1.0 };
                let f = vec![
                    shift + rng.random_range(-0.5..0.5),
                    rng.random_range(-3.0..3.0),
                ];
                (f, BTreeSet::from([c]))
            })
            .unzip()
    }

    #[test]
    fn decision_rules() {
        let p = decide(&[2.0, -1.0, 0.0], false, 0.5);
        assert_eq!(p.labels, BTreeSet::from([0]));
        assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let logit = |s: f64| (s / (1.0 - s)).ln();
        let p = decide(&[logit(0.9), logit(0.4), logit(0.6)], true, 0.5);
        assert_eq!(p.labels, BTreeSet::from([0, 2]));
        assert!(decide(&[1.0, 2.0, 3.0], true, 0.999).labels.is_empty());
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let (x, y) = toy(64, 1);
        let probe = fit_linear_probe(&x, &y, 2, false, &cfg(50)).unwrap();
        for (f, l) in x.iter().zip(&y) {
            assert_eq!(&probe.predict(f).unwrap().labels, l);
        }
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let x = feats(&mut rng, 200);
        let y: Vec<BTreeSet<usize>> = (0..200)
            .map(|_| BTreeSet::from([rng.random_range(0..4)]))
            .collect();
        let probe = fit_linear_probe(&x, &y, 4, false, &cfg(20)).unwrap();
        let xt = feats(&mut rng, 400);
        let yt: Vec<usize> = (0..400).map(|_| rng.random_range(0..4)).collect();
        let preds: Vec<usize> = xt
            .iter()
            .map(|f| *probe.predict(f).unwrap().labels.first().unwrap())
            .collect();
        let acc = crate::metrics::mca(&preds, &yt).unwrap();
        assert!((acc - 0.25).abs() <= 0.10, "accuracy {acc}");
    }

    #[test]
    fn zero_epochs_leave_the_initialization() {
        let (x, y) = toy(10, 2);
        let probe = fit_linear_probe(&x, &y, 2, false, &cfg(0)).unwrap();
        assert!(probe.weight.iter().chain(&probe.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        let y = vec![BTreeSet::from([1]), BTreeSet::from([1])];
        assert!(fit_linear_probe(&x, &y, 3, false, &cfg(1)).is_err());
    }

    #[test]
    fn multi_label_learns_independent_classes() {
        let x: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i % 2) as f64, ((i / 2) % 2) as f64])
            .collect();
        let y: Vec<BTreeSet<usize>> = x
            .iter()
            .map(|f| {
                let mut s = BTreeSet::new();
                if f[0] > 0.5 {
                    s.insert(0);
                }
                if f[1] > 0.5 {
                    s.insert(1);
                }
                s.insert(2);
                s
            })
            .collect();
        let probe = fit_linear_probe(&x, &y, 3, true, &cfg(100)).unwrap();
        for (f, l) in x.iter().zip(&y) {
            assert_eq!(&probe.predict(f).unwrap().labels, l);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (x, y) = toy(30, 3);
        let a = fit_linear_probe(&x, &y, 2, false, &cfg(5)).unwrap();
        let b = fit_linear_probe(&x, &y, 2, false, &cfg(5)).unwrap();
        assert_eq!(a, b);
    }
}
