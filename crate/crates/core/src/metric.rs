//! Large-margin triplet learning of a linear embedding head over frozen features.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 128;

const FSMH_MAGIC: &[u8; 4] = b"FSMH";
const FSMH_VERSION: u32 = 1;

/// Linear map `R^d_in -> R^d_emb`, no bias. Weights are stored row-major
/// with one row per input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    d_in: usize,
    d_emb: usize,
    weights: Vec<f64>,
}

impl EmbeddingHead {
    pub fn new(d_in: usize, d_emb: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != d_in * d_emb {
            return Err(Error::DimensionMismatch {
                expected: d_in * d_emb,
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(invalid("embedding head has non-finite weights"));
        }
        Ok(EmbeddingHead { d_in, d_emb, weights })
    }

    pub fn zeros(d_in: usize, d_emb: usize) -> Self {
        EmbeddingHead {
            d_in,
            d_emb,
            weights: vec![0.0; d_in * d_emb],
        }
    }

    /// Copies the first `min(d_in, d_emb)` coordinates, zero elsewhere.
    pub fn identity(d_in: usize, d_emb: usize) -> Self {
        let mut head = Self::zeros(d_in, d_emb);
        for i in 0..d_in.min(d_emb) {
            head.weights[i * d_emb + i] = 1.0;
        }
        head
    }

    /// Random semi-orthogonal matrix (orthonormal along the smaller side)
    /// scaled by `1/sqrt(d_in)`.
    pub fn random(d_in: usize, d_emb: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = (d_in.max(d_emb), d_in.min(d_emb));
        let gaussian = DMatrix::<f64>::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
        let q = gaussian.qr().q();
        let scale = 1.0 / (d_in as f64).sqrt();
        let mut weights = vec![0.0; d_in * d_emb];
        for i in 0..d_in {
            for j in 0..d_emb {
                let v = if d_in >= d_emb { q[(i, j)] } else { q[(j, i)] };
                weights[i * d_emb + j] = v * scale;
            }
        }
        EmbeddingHead { d_in, d_emb, weights }
    }

    pub fn input_dim(&self) -> usize {
        self.d_in
    }

    pub fn output_dim(&self) -> usize {
        self.d_emb
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn embed(&self, features: &[f32]) -> Result<Vec<f64>> {
        if features.len() != self.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.d_in,
                actual: features.len(),
            });
        }
        let mut out = vec![0.0; self.d_emb];
        for (row, &x) in self.weights.chunks_exact(self.d_emb).zip(features) {
            let x = x as f64;
            if x != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }

    pub fn embed_all(&self, features: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        features.iter().map(|f| self.embed(f)).collect()
    }

    fn embed_diff(&self, a: &[f32], b: &[f32]) -> (Vec<f64>, Vec<f64>) {
        let delta: Vec<f64> = a.iter().zip(b).map(|(x, y)| *x as f64 - *y as f64).collect();
        let mut u = vec![0.0; self.d_emb];
        for (row, &d) in self.weights.chunks_exact(self.d_emb).zip(&delta) {
            for (o, w) in u.iter_mut().zip(row) {
                *o += w * d;
            }
        }
        (delta, u)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.weights.len());
        out.extend_from_slice(FSMH_MAGIC);
        out.extend_from_slice(&FSMH_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_in as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_emb as u32).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&(*w as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            kind: "FSMH",
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != FSMH_MAGIC {
            return Err(bad("missing FSMH header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != FSMH_VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let (d_in, d_emb) = (word(8), word(12));
        if bytes.len() != 16 + 4 * d_in * d_emb {
            return Err(bad("payload size does not match header"));
        }
        let weights = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(d_in, d_emb, weights).map_err(|e| bad(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(0, |a - p| - |a - n| + margin)` with plain Euclidean norms.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    (distance(anchor, positive) - distance(anchor, negative) + margin).max(0.0)
}

/// Triplet loss of raw features through `head`, with its gradient with
/// respect to the head weights (same layout as [`EmbeddingHead::weights`]).
pub fn triplet_loss_grad(
    head: &EmbeddingHead,
    anchor: &[f32],
    positive: &[f32],
    negative: &[f32],
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    for f in [anchor, positive, negative] {
        if f.len() != head.d_in {
            return Err(Error::DimensionMismatch {
                expected: head.d_in,
                actual: f.len(),
            });
        }
    }
    let mut grad = vec![0.0; head.weights.len()];
    let (dp, up) = head.embed_diff(anchor, positive);
    let (dn, un) = head.embed_diff(anchor, negative);
    let (np, nn) = (norm(&up), norm(&un));
    let loss = np - nn + margin;
    if loss <= 0.0 {
        return Ok((0.0, grad));
    }
    // d|W^T d| / dW = d (W^T d / |W^T d|)^T; zero-length terms contribute nothing.
    let mut accumulate = |delta: &[f64], u: &[f64], n: f64, sign: f64| {
        if n <= 0.0 {
            return;
        }
        for (row, &d) in grad.chunks_exact_mut(head.d_emb).zip(delta) {
            let s = sign * d / n;
            for (g, &uj) in row.iter_mut().zip(u) {
                *g += s * uj;
            }
        }
    };
    accumulate(&dp, &up, np, 1.0);
    accumulate(&dn, &un, nn, -1.0);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Samples `count` triplets uniformly: an anchor from a class with at least
/// two members, a different same-class positive, and a negative from any
/// other class. `labels[i]` is the class of sample `i`, `None` if unlabeled.
pub fn mine_triplets(labels: &[Option<u32>], count: usize, seed: u64) -> Result<Vec<Triplet>> {
    let mut classes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            classes.entry(*l).or_default().push(i);
        }
    }
    if classes.len() < 2 {
        return Err(Error::InsufficientLabels(format!(
            "need at least two classes, found {}",
            classes.len()
        )));
    }
    let anchors: Vec<usize> = classes
        .values()
        .filter(|m| m.len() >= 2)
        .flatten()
        .copied()
        .collect();
    if anchors.is_empty() {
        return Err(Error::InsufficientLabels(
            "no class has two or more samples".into(),
        ));
    }
    let labelled: Vec<usize> = classes.values().flatten().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = *anchors.choose(&mut rng).unwrap();
        let class = labels[anchor].unwrap();
        let members = &classes[&class];
        let positive = loop {
            let p = *members.choose(&mut rng).unwrap();
            if p != anchor {
                break p;
            }
        };
        let others = labelled.len() - members.len();
        let mut k = rng.random_range(0..others);
        let negative = *labelled
            .iter()
            .find(|&&i| {
                if labels[i] == Some(class) {
                    return false;
                }
                if k == 0 {
                    return true;
                }
                k -= 1;
                false
            })
            .unwrap();
        out.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub triplets_per_epoch: usize,
    pub learning_rate: f64,
    /// The learning rate is divided by this factor after every epoch.
    pub lr_decay: f64,
    /// Triplets averaged per SGD step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.05,
            momentum: 0.8,
            weight_decay: 0.0005,
            epochs: 3,
            triplets_per_epoch: 1000,
            learning_rate: 0.1,
            lr_decay: 10.0,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.margin >= 0.0
            && self.margin < 1.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.learning_rate >= 0.0
            && self.lr_decay > 0.0
            && self.epochs > 0
            && self.triplets_per_epoch > 0
            && self.batch_size > 0;
        if !ok {
            return Err(invalid(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// One training call: SGD with momentum over `epochs × triplets_per_epoch`
/// mined triplets. Weight decay shrinks the weights by `1 - weight_decay`
/// every step, independently of the learning rate. Returns the updated
/// head and the mean triplet loss of each epoch, measured before each step.
pub fn train_round(
    features: &[Vec<f32>],
    labels: &[Option<u32>],
    head: &EmbeddingHead,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(EmbeddingHead, Vec<f64>)> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            actual: labels.len(),
        });
    }
    let triplets = mine_triplets(labels, cfg.epochs * cfg.triplets_per_epoch, cfg.seed)?;
    let mut head = head.clone();
    let mut velocity = vec![0.0; head.weights.len()];
    let mut batch_grad = vec![0.0; head.weights.len()];
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;
    for (epoch, chunk) in triplets.chunks(cfg.triplets_per_epoch).enumerate() {
        let mut total = 0.0;
        for batch in chunk.chunks(cfg.batch_size) {
            batch_grad.fill(0.0);
            for t in batch {
                let (loss, grad) = triplet_loss_grad(
                    &head,
                    &features[t.anchor],
                    &features[t.positive],
                    &features[t.negative],
                    cfg.margin,
                )?;
                total += loss;
                for (b, g) in batch_grad.iter_mut().zip(&grad) {
                    *b += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let shrink = 1.0 - cfg.weight_decay;
            for ((w, v), g) in head.weights.iter_mut().zip(&mut velocity).zip(&batch_grad) {
                *v = cfg.momentum * *v + g * scale;
                *w = *w * shrink - lr * *v;
            }
        }
        let mean = total / chunk.len() as f64;
        losses.push(mean);
        on_epoch(epoch + 1, mean);
        lr /= cfg.lr_decay;
    }
    Ok((head, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_zero_heads() {
        let phi: Vec<f32> = (0..6).map(|i| i as f32 + 0.5).collect();
        let id = EmbeddingHead::identity(6, 4);
        assert_eq!(id.embed(&phi).unwrap(), vec![0.5, 1.5, 2.5, 3.5]);
        let wide = EmbeddingHead::identity(2, 4);
        assert_eq!(wide.embed(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(EmbeddingHead::zeros(6, 3).embed(&phi).unwrap(), vec![0.0; 3]);
        assert!(matches!(id.embed(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn random_head_matches_dot_product_oracle() {
        let head = EmbeddingHead::random(10, 4, 3);
        let phi: Vec<f32> = (0..10).map(|i| (i as f32 * 0.37).sin()).collect();
        let got = head.embed(&phi).unwrap();
        for (j, g) in got.iter().enumerate() {
            let expect: f64 = phi.iter().enumerate().map(|(i, &p)| head.weights()[i * 4 + j] * p as f64).sum();
            assert!((g - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn random_head_is_scaled_semi_orthogonal() {
        for (d_in, d_emb) in [(12, 5), (5, 12)] {
            let head = EmbeddingHead::random(d_in, d_emb, 9);
            let w = DMatrix::from_row_slice(d_in, d_emb, head.weights());
            let gram = if d_in >= d_emb { w.transpose() * &w } else { &w * w.transpose() };
            let expect = 1.0 / d_in as f64;
            for i in 0..gram.nrows() {
                for j in 0..gram.ncols() {
                    let e = if i == j { expect } else { 0.0 };
                    assert!((gram[(i, j)] - e).abs() < 1e-12);
                }
            }
            assert_eq!(head, EmbeddingHead::random(d_in, d_emb, 9));
        }
    }

    #[test]
    fn loss_values() {
        let a = [0.0, 0.0];
        assert_eq!(triplet_loss(&a, &[0.1, 0.0], &[0.0, 0.2], 0.05), 0.0);
        assert!((triplet_loss(&a, &[0.3, 0.0], &[0.0, 0.2], 0.05) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn mining_shapes_and_errors() {
        let labels = [None, Some(1), Some(1), Some(2)];
        let t = mine_triplets(&labels, 20, 5).unwrap();
        for x in &t {
            assert!([1, 2].contains(&x.anchor) && [1, 2].contains(&x.positive));
            assert_ne!(x.anchor, x.positive);
            assert_eq!(x.negative, 3);
        }
        assert_eq!(t, mine_triplets(&labels, 20, 5).unwrap());
        assert!(matches!(
            mine_triplets(&[Some(1), Some(1)], 1, 0),
            Err(Error::InsufficientLabels(_))
        ));
        assert!(matches!(
            mine_triplets(&[Some(1), Some(2)], 1, 0),
            Err(Error::InsufficientLabels(_))
        ));
        assert!(matches!(mine_triplets(&[None, None], 1, 0), Err(Error::InsufficientLabels(_))));
    }

    #[test]
    fn zero_rates_leave_head_unchanged() {
        let features: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, (i * i) as f32 * 0.1, 1.0]).collect();
        let labels = [Some(1), Some(1), Some(1), Some(2), Some(2), Some(2)];
        let head = EmbeddingHead::random(3, 4, 1);
        let frozen = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let (out, losses) = train_round(&features, &labels, &head, &frozen, |_, _| {}).unwrap();
        assert_eq!(out, head);
        assert_eq!(losses.len(), 3);

        let decay_only = TrainConfig {
            learning_rate: 0.0,
            triplets_per_epoch: 10,
            batch_size: 10,
            epochs: 1,
            ..TrainConfig::default()
        };
        let (shrunk, _) = train_round(&features, &labels, &head, &decay_only, |_, _| {}).unwrap();
        for (a, b) in shrunk.weights().iter().zip(head.weights()) {
            assert!((a - b * (1.0 - 0.0005)).abs() < 1e-15);
        }
    }

    #[test]
    fn training_errors() {
        let head = EmbeddingHead::zeros(2, 2);
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_round(&[], &[], &head, &cfg, |_, _| {}),
            Err(Error::InsufficientLabels(_))
        ));
        let f = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(
            train_round(&f, &[Some(1), Some(1)], &head, &cfg, |_, _| {}),
            Err(Error::InsufficientLabels(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.fsmh");
        let head = EmbeddingHead::new(2, 3, vec![0.5, -1.0, 0.25, 2.0, 0.0, -0.125]).unwrap();
        head.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FSMH");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(EmbeddingHead::load(&path).unwrap(), head);
        assert!(EmbeddingHead::from_bytes(&bytes[..20], &path).is_err());
    }
}
