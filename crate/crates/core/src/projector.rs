//! 2D projection of embedded segments: fuzzy kNN graph, optional label
//! supervision, and a negative-sampling force layout.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rle::SegmentKey;

/// Lower bound on the per-point bandwidth; guards duplicate points.
pub const SIGMA_MIN: f64 = 1e-3;
const INIT_RADIUS: f64 = 10.0;
const GRAD_CLIP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub k: usize,
    pub min_dist: f64,
    /// Trade-off between label supervision and unsupervised structure.
    pub supervision: f64,
    pub epochs: usize,
    /// Epochs of the refinement run when inserting new points.
    pub transform_epochs: usize,
    pub negative_samples: usize,
    pub seed: u64,
}

impl ProjectionConfig {
    /// Main canvas defaults.
    pub fn global() -> Self {
        ProjectionConfig {
            k: 15,
            min_dist: 0.01,
            supervision: 0.5,
            epochs: 200,
            transform_epochs: 100,
            negative_samples: 5,
            seed: 0,
        }
    }

    /// Local re-projection defaults.
    pub fn local() -> Self {
        ProjectionConfig {
            k: 5,
            min_dist: 0.1,
            epochs: 100,
            ..Self::global()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(invalid(format!("k must be >= 2, got {}", self.k)));
        }
        if !(self.min_dist > 0.0 && self.min_dist < 1.0) {
            return Err(invalid(format!("min_dist must lie in (0, 1), got {}", self.min_dist)));
        }
        if !(0.0..=1.0).contains(&self.supervision) {
            return Err(invalid(format!("supervision must lie in [0, 1], got {}", self.supervision)));
        }
        Ok(())
    }
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self::global()
    }
}

/// Symmetrised fuzzy neighbour graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    pub k: usize,
    /// `k` nearest neighbours per point as `(index, distance)`, ascending.
    pub knn: Vec<Vec<(usize, f64)>>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Undirected edges `(i, j, weight)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize, f64)>,
}

impl FuzzyGraph {
    /// A graph from explicit edges, without neighbour data.
    pub fn from_edges(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, w) in &edges {
            if i >= n || j >= n || i == j || !(w > 0.0 && w <= 1.0) {
                return Err(invalid(format!("bad edge ({i}, {j}, {w}) for {n} points")));
            }
        }
        Ok(FuzzyGraph {
            n,
            k: 0,
            knn: vec![Vec::new(); n],
            rho: vec![0.0; n],
            sigma: vec![SIGMA_MIN; n],
            edges,
        })
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact `k` nearest neighbours of `query` among `points`, skipping `exclude`.
fn nearest(points: &[Vec<f64>], query: &[f64], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, p)| (j, euclidean(query, p)))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn membership_sum(dists: &[f64], rho: f64, sigma: f64) -> f64 {
    dists.iter().map(|d| (-(d - rho).max(0.0) / sigma).exp()).sum()
}

/// Solves for the bandwidth giving membership sum `log2(k)` by bisection.
/// Returns `(rho, sigma)`; `sigma` is clamped at [`SIGMA_MIN`].
pub fn calibrate(sorted_dists: &[f64], k: usize) -> (f64, f64) {
    let rho = sorted_dists.first().copied().unwrap_or(0.0);
    let target = (k as f64).log2();
    if membership_sum(sorted_dists, rho, SIGMA_MIN) >= target {
        return (rho, SIGMA_MIN);
    }
    let mut lo = SIGMA_MIN;
    let mut hi = 1.0f64.max(SIGMA_MIN * 2.0);
    let mut grow = 0;
    while membership_sum(sorted_dists, rho, hi) < target && grow < 200 {
        lo = hi;
        hi *= 2.0;
        grow += 1;
    }
    let mut sigma = hi;
    for _ in 0..200 {
        sigma = 0.5 * (lo + hi);
        let s = membership_sum(sorted_dists, rho, sigma);
        if (s - target).abs() < 1e-9 {
            break;
        }
        if s < target {
            lo = sigma;
        } else {
            hi = sigma;
        }
    }
    (rho, sigma.max(SIGMA_MIN))
}

/// Builds the fuzzy kNN graph. With labels, same-label edges are pulled
/// towards 1 and different-label edges towards 0 by `supervision`; edges
/// with an unlabeled endpoint are left unchanged.
pub fn fuzzy_knn(
    points: &[Vec<f64>],
    k: usize,
    labels: Option<&[Option<u32>]>,
    supervision: f64,
) -> Result<FuzzyGraph> {
    let n = points.len();
    if n <= k {
        return Err(invalid(format!("need more than k={k} points, got {n}")));
    }
    if k < 1 {
        return Err(invalid("k must be positive"));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(invalid(format!("{} labels for {n} points", l.len())));
        }
    }
    let knn: Vec<Vec<(usize, f64)>> = (0..n).map(|i| nearest(points, &points[i], k, Some(i))).collect();
    let mut rho = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut directed: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (i, nbrs) in knn.iter().enumerate() {
        let dists: Vec<f64> = nbrs.iter().map(|x| x.1).collect();
        let (r, s) = calibrate(&dists, k);
        rho.push(r);
        sigma.push(s);
        for &(j, d) in nbrs {
            let w = (-(d - r).max(0.0) / s).exp();
            let entry = directed.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
            if i < j {
                entry.0 = w;
            } else {
                entry.1 = w;
            }
        }
    }
    let edges = directed
        .into_iter()
        .filter_map(|((i, j), (a, b))| {
            let mut w = a + b - a * b;
            if let Some(labels) = labels {
                if let (Some(li), Some(lj)) = (labels[i], labels[j]) {
                    w = if li == lj {
                        w + supervision * (1.0 - w)
                    } else {
                        w * (1.0 - supervision)
                    };
                }
            }
            (w > 0.0).then_some((i, j, w.min(1.0)))
        })
        .collect();
    Ok(FuzzyGraph {
        n,
        k,
        knn,
        rho,
        sigma,
        edges,
    })
}

/// Least-squares fit of `1 / (1 + a d^(2b))` to the target membership
/// `1` for `d <= min_dist`, `exp(-(d - min_dist))` beyond, on 300 samples of `[0, 3]`.
pub fn fit_curve(min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x <= min_dist { 1.0 } else { (-(x - min_dist)).exp() })
        .collect();
    let cost = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    // Levenberg-Marquardt on two parameters.
    let (mut a, mut b) = (1.0, 1.0);
    let mut damping = 1e-3;
    let mut current = cost(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let denom = 1.0 + a * p;
            let r = 1.0 / denom - y;
            let da = -p / (denom * denom);
            let db = -a * p * 2.0 * x.ln() / (denom * denom);
            let j = [da, db];
            for u in 0..2 {
                jtr[u] += j[u] * r;
                for v in 0..2 {
                    jtj[u][v] += j[u] * j[v];
                }
            }
        }
        let m00 = jtj[0][0] * (1.0 + damping);
        let m11 = jtj[1][1] * (1.0 + damping);
        let det = m00 * m11 - jtj[0][1] * jtj[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let step_a = -(m11 * jtr[0] - jtj[0][1] * jtr[1]) / det;
        let step_b = -(m00 * jtr[1] - jtj[1][0] * jtr[0]) / det;
        let trial = cost(a + step_a, b + step_b);
        if trial < current {
            let improvement = current - trial;
            a += step_a;
            b += step_b;
            current = trial;
            damping = (damping / 10.0).max(1e-12);
            if improvement < 1e-16 && step_a.abs() < 1e-12 && step_b.abs() < 1e-12 {
                break;
            }
        } else {
            damping *= 10.0;
            if damping > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout2D {
    pub coords: Vec<[f64; 2]>,
    pub a: f64,
    pub b: f64,
}

fn clip(v: f64) -> f64 {
    v.clamp(-GRAD_CLIP, GRAD_CLIP)
}

fn random_disk(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let r = INIT_RADIUS * rng.random::<f64>().sqrt();
    let t = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    [r * t.cos(), r * t.sin()]
}

/// Adjacency weight lookup for repulsion weighting.
struct Weights {
    adj: Vec<Vec<(usize, f64)>>,
}

impl Weights {
    fn new(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        for a in &mut adj {
            a.sort_by_key(|x| x.0);
        }
        Weights { adj }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        let a = &self.adj[i];
        a.binary_search_by_key(&j, |x| x.0).map_or(0.0, |idx| a[idx].1)
    }
}

struct Optimizer {
    a: f64,
    b: f64,
    min_dist: f64,
    negative_samples: usize,
}

impl Optimizer {
    /// Moves `head` (and `tail` unless frozen) towards each other, never
    /// closer than `min_dist`.
    fn attract(&self, coords: &mut [[f64; 2]], head: usize, tail: usize, lr: f64, move_tail: bool) {
        let diff = [coords[head][0] - coords[tail][0], coords[head][1] - coords[tail][1]];
        let d2 = diff[0] * diff[0] + diff[1] * diff[1];
        let d = d2.sqrt();
        if d <= self.min_dist {
            return;
        }
        let coef = -2.0 * self.a * self.b * d2.powf(self.b - 1.0) / (1.0 + self.a * d2.powf(self.b));
        let mut step = [lr * clip(coef * diff[0]), lr * clip(coef * diff[1])];
        let movers = if move_tail { 2.0 } else { 1.0 };
        let shrink = movers * (step[0] * step[0] + step[1] * step[1]).sqrt();
        let allowed = d - self.min_dist;
        if shrink > allowed {
            let s = allowed / shrink;
            step = [step[0] * s, step[1] * s];
        }
        coords[head][0] += step[0];
        coords[head][1] += step[1];
        if move_tail {
            coords[tail][0] -= step[0];
            coords[tail][1] -= step[1];
        }
    }

    /// Pushes `head` away from `other`, weighted by `1 - w(head, other)`.
    fn repel(&self, coords: &mut [[f64; 2]], head: usize, other: usize, weight: f64, lr: f64) {
        let diff = [coords[head][0] - coords[other][0], coords[head][1] - coords[other][1]];
        let d2 = diff[0] * diff[0] + diff[1] * diff[1];
        let coef = (1.0 - weight) * 2.0 * self.b / ((0.001 + d2) * (1.0 + self.a * d2.powf(self.b)));
        if coef <= 0.0 {
            return;
        }
        if d2 > 0.0 {
            coords[head][0] += lr * clip(coef * diff[0]);
            coords[head][1] += lr * clip(coef * diff[1]);
        } else {
            coords[head][0] += lr * GRAD_CLIP;
        }
    }
}

/// Edge sampling schedule: an edge of weight `w` fires every `max_w / w` epochs.
struct Schedule {
    period: Vec<f64>,
    next: Vec<f64>,
}

impl Schedule {
    fn new(weights: impl Iterator<Item = f64>) -> Self {
        let w: Vec<f64> = weights.collect();
        let max = w.iter().copied().fold(0.0, f64::max);
        let period: Vec<f64> = w.iter().map(|&x| max / x).collect();
        Schedule {
            next: period.clone(),
            period,
        }
    }

    fn due(&mut self, e: usize, epoch: usize) -> bool {
        if self.next[e] <= (epoch + 1) as f64 {
            self.next[e] += self.period[e];
            true
        } else {
            false
        }
    }
}

/// Stochastic force layout of `graph`. Deterministic for a fixed seed.
pub fn layout(graph: &FuzzyGraph, cfg: &ProjectionConfig) -> Result<Layout2D> {
    if graph.n == 0 {
        return Err(invalid("cannot lay out an empty graph"));
    }
    let (a, b) = fit_curve(cfg.min_dist);
    if graph.n == 1 {
        return Ok(Layout2D {
            coords: vec![[0.0, 0.0]],
            a,
            b,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords: Vec<[f64; 2]> = (0..graph.n).map(|_| random_disk(&mut rng)).collect();
    let opt = Optimizer {
        a,
        b,
        min_dist: cfg.min_dist,
        negative_samples: cfg.negative_samples,
    };
    let weights = Weights::new(graph.n, &graph.edges);
    let mut schedule = Schedule::new(graph.edges.iter().map(|e| e.2));
    for epoch in 0..cfg.epochs {
        let lr = 1.0 - epoch as f64 / cfg.epochs as f64;
        for (e, &(i, j, _)) in graph.edges.iter().enumerate() {
            if !schedule.due(e, epoch) {
                continue;
            }
            for (head, tail) in [(i, j), (j, i)] {
                opt.attract(&mut coords, head, tail, lr, true);
                for _ in 0..opt.negative_samples {
                    let other = rng.random_range(0..graph.n);
                    if other == head {
                        continue;
                    }
                    opt.repel(&mut coords, head, other, weights.get(head, other), lr);
                }
            }
        }
    }
    Ok(Layout2D { coords, a, b })
}

/// Places new points into an existing layout without moving old points.
///
/// Each new point starts at the membership-weighted mean of its nearest old
/// points' coordinates (exactly on an old point it duplicates), then a short
/// refinement run with old coordinates frozen.
pub fn transform_new(
    new_points: &[Vec<f64>],
    old_points: &[Vec<f64>],
    old_layout: &Layout2D,
    cfg: &ProjectionConfig,
) -> Result<Vec<[f64; 2]>> {
    if old_points.is_empty() || old_layout.coords.is_empty() {
        return Err(invalid("cannot insert into an empty layout"));
    }
    if old_points.len() != old_layout.coords.len() {
        return Err(invalid("old points and layout differ in length"));
    }
    let n_old = old_points.len();
    let k = cfg.k.min(n_old);
    let mut coords: Vec<[f64; 2]> = old_layout.coords.clone();
    let mut edges = Vec::new();
    for (i, p) in new_points.iter().enumerate() {
        let nbrs = nearest(old_points, p, k, None);
        let dists: Vec<f64> = nbrs.iter().map(|x| x.1).collect();
        let (rho, sigma) = calibrate(&dists, k.max(2));
        let exact: Vec<usize> = nbrs.iter().filter(|x| x.1 == 0.0).map(|x| x.0).collect();
        let weighted: Vec<(usize, f64)> = if exact.is_empty() {
            nbrs.iter()
                .map(|&(j, d)| (j, (-(d - rho).max(0.0) / sigma).exp()))
                .collect()
        } else {
            exact.iter().map(|&j| (j, 1.0)).collect()
        };
        let total: f64 = weighted.iter().map(|x| x.1).sum();
        let mut c = [0.0, 0.0];
        for &(j, w) in &weighted {
            c[0] += w * old_layout.coords[j][0] / total;
            c[1] += w * old_layout.coords[j][1] / total;
        }
        coords.push(c);
        for &(j, d) in &nbrs {
            let w = (-(d - rho).max(0.0) / sigma).exp();
            if w > 0.0 {
                edges.push((n_old + i, j, w));
            }
        }
    }

    let opt = Optimizer {
        a: old_layout.a,
        b: old_layout.b,
        min_dist: cfg.min_dist,
        negative_samples: cfg.negative_samples,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a5f_0d1e);
    let weights = Weights::new(coords.len(), &edges);
    let mut schedule = Schedule::new(edges.iter().map(|e| e.2));
    for epoch in 0..cfg.transform_epochs {
        let lr = 0.1 * (1.0 - epoch as f64 / cfg.transform_epochs as f64);
        for (e, &(head, tail, _)) in edges.iter().enumerate() {
            if !schedule.due(e, epoch) {
                continue;
            }
            opt.attract(&mut coords, head, tail, lr, false);
            for _ in 0..opt.negative_samples {
                let other = rng.random_range(0..n_old);
                opt.repel(&mut coords, head, other, weights.get(head, other), lr);
            }
        }
    }
    Ok(coords.split_off(n_old))
}

/// Independent projection of a subset with local parameters.
pub fn local_reproject(points: &[Vec<f64>], labels: Option<&[Option<u32>]>, cfg: &ProjectionConfig) -> Result<Layout2D> {
    cfg.validate()?;
    if points.len() <= cfg.k {
        return Err(invalid(format!(
            "local projection needs more than {} points, got {}",
            cfg.k,
            points.len()
        )));
    }
    let graph = fuzzy_knn(points, cfg.k, labels, cfg.supervision)?;
    layout(&graph, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPoint {
    pub key: SegmentKey,
    pub x: f64,
    pub y: f64,
}

/// Writes the layout export: a JSON array of `{key, x, y}`.
pub fn write_layout_json(path: &Path, points: &[LayoutPoint]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, points)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn read_layout_json(path: &Path) -> Result<Vec<LayoutPoint>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
