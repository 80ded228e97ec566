//! Brute-force oracles and synthetic fixtures for tests.
//!
//! Everything here recomputes results along routes that share no code with
//! the library implementations: level sets by flood fill instead of
//! union-find, closed-form attributes instead of tree recursion, threshold
//! enumeration instead of a priority queue.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{Criterion, GradientImage};
use crate::session::LabelMask;

/// Pixel-graph edges `(p, q, weight)` in the canonical index order.
pub fn oracle_edges(g: &GradientImage) -> Vec<(usize, usize, f64)> {
    let (w, h) = (g.width(), g.height());
    let v = g.values();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                out.push((p, p + 1, (v[p] + v[p + 1]) / 2.0));
            }
            if y + 1 < h {
                out.push((p, p + w, (v[p] + v[p + w]) / 2.0));
            }
        }
    }
    out
}

fn components(n: usize, edges: &[(usize, usize, f64)], keep: impl Fn(f64) -> bool) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(p, q, w) in edges {
        if keep(w) {
            adj[p].push(q);
            adj[q].push(p);
        }
    }
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = next;
        let mut queue = VecDeque::from([s]);
        while let Some(p) = queue.pop_front() {
            for &q in &adj[p] {
                if comp[q] == usize::MAX {
                    comp[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    comp
}

/// Result of the watershed oracle on one image.
#[derive(Debug, Clone)]
pub struct WatershedOracle {
    pub width: usize,
    pub height: usize,
    /// Pixel sets of the regional minima.
    pub minima: Vec<BTreeSet<usize>>,
    /// Saliency per MST edge index.
    pub saliency: BTreeMap<usize, f64>,
    edges: Vec<(usize, usize, f64)>,
}

impl WatershedOracle {
    /// Region map of the cut at `threshold`, ids in first-pixel order.
    pub fn cut(&self, threshold: f64) -> Vec<u32> {
        let kept: Vec<(usize, usize, f64)> = self
            .saliency
            .iter()
            .filter(|(_, &s)| s < threshold)
            .map(|(&e, _)| (self.edges[e].0, self.edges[e].1, 0.0))
            .collect();
        let comp = components(self.width * self.height, &kept, |_| true);
        comp.into_iter().map(|c| c as u32).collect()
    }

    /// Distinct saliency values with midpoints between them, suitable as
    /// thresholds that exercise every distinct cut.
    pub fn probe_thresholds(&self) -> Vec<f64> {
        let mut vals: Vec<f64> = self.saliency.values().copied().collect();
        vals.push(0.0);
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let mut out: Vec<f64> = vals.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        out.push(vals.last().unwrap() + 1.0);
        out.retain(|t| *t > 0.0);
        out
    }
}

/// Watershed hierarchy by explicit level-set enumeration.
pub fn watershed_oracle(g: &GradientImage, criterion: Criterion) -> WatershedOracle {
    let n = g.len();
    let edges = oracle_edges(g);
    let mut levels: Vec<f64> = edges.iter().map(|e| e.2).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();

    // Every connected component (size >= 2) of every level set, with the
    // lowest level at which it exists.
    let mut nodes: Vec<(BTreeSet<usize>, f64)> = Vec::new();
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    for &level in &levels {
        let comp = components(n, &edges, |w| w <= level);
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (p, c) in comp.into_iter().enumerate() {
            groups.entry(c).or_default().push(p);
        }
        for (_, pixels) in groups {
            if pixels.len() >= 2 && seen.insert(pixels.clone()) {
                nodes.push((pixels.into_iter().collect(), level));
            }
        }
    }

    let parent_of = |set: &BTreeSet<usize>| -> Option<usize> {
        nodes
            .iter()
            .enumerate()
            .filter(|(_, (s, _))| s.len() > set.len() && set.is_subset(s))
            .min_by_key(|(_, (s, _))| s.len())
            .map(|(i, _)| i)
    };
    let parents: Vec<Option<usize>> = nodes.iter().map(|(s, _)| parent_of(s)).collect();
    let is_min: Vec<bool> = nodes
        .iter()
        .map(|(s, alt)| {
            !edges
                .iter()
                .any(|&(p, q, w)| w < *alt && s.contains(&p) && s.contains(&q))
        })
        .collect();
    let minima: Vec<BTreeSet<usize>> = nodes
        .iter()
        .zip(&is_min)
        .filter(|(_, &m)| m)
        .map(|((s, _), _)| s.clone())
        .collect();

    let parent_alt = |i: usize| parents[i].map_or(nodes[i].1, |p| nodes[p].1);
    let attr: Vec<f64> = (0..nodes.len())
        .map(|i| {
            let (set, _) = &nodes[i];
            match criterion {
                Criterion::Area => set.len() as f64,
                Criterion::Volume => set.len() as f64 * parent_alt(i),
                Criterion::Dynamics => {
                    let lowest = nodes
                        .iter()
                        .zip(&is_min)
                        .filter(|((s, _), &m)| m && s.is_subset(set))
                        .map(|((_, a), _)| *a)
                        .fold(f64::INFINITY, f64::min);
                    parent_alt(i) - lowest
                }
            }
        })
        .collect();

    // Within each node, merge its children through the edges at its altitude
    // in ascending index order; a merge between two minimum-bearing groups
    // extinguishes the smaller carried value.
    let mut saliency = BTreeMap::new();
    for (i, (set, alt)) in nodes.iter().enumerate() {
        let mut group_of: BTreeMap<usize, usize> = BTreeMap::new();
        let mut carried: Vec<Option<f64>> = Vec::new();
        for (j, (child, _)) in nodes.iter().enumerate() {
            if parents[j] == Some(i) {
                for &p in child {
                    group_of.insert(p, carried.len());
                }
                carried.push(Some(attr[j]));
            }
        }
        for &p in set {
            group_of.entry(p).or_insert_with(|| {
                carried.push(None);
                carried.len() - 1
            });
        }
        for (e, &(p, q, w)) in edges.iter().enumerate() {
            if w != *alt || !set.contains(&p) || !set.contains(&q) {
                continue;
            }
            let (gp, gq) = (group_of[&p], group_of[&q]);
            if gp == gq {
                continue;
            }
            let s = match (carried[gp], carried[gq]) {
                (Some(a), Some(b)) => a.min(b),
                _ => 0.0,
            };
            saliency.insert(e, s);
            let merged = match (carried[gp], carried[gq]) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
            carried[gp] = merged;
            for v in group_of.values_mut() {
                if *v == gq {
                    *v = gp;
                }
            }
        }
    }

    WatershedOracle {
        width: g.width(),
        height: g.height(),
        minima,
        saliency,
        edges,
    }
}

/// Relabels a region map to first-occurrence order.
pub fn canonical_labels(map: &[u32]) -> Vec<u32> {
    let mut remap = BTreeMap::new();
    map.iter()
        .map(|&l| {
            let next = remap.len() as u32;
            *remap.entry(l).or_insert(next)
        })
        .collect()
}

/// Minimax path cost from a seed set to every pixel of `segment`, by
/// enumerating thresholds and flood filling. Pixels outside the segment
/// (or unreachable) get `+inf`.
pub fn minimax_cost(g: &GradientImage, segment: &BTreeSet<usize>, seeds: &[usize]) -> Vec<f64> {
    let edges: Vec<(usize, usize, f64)> = oracle_edges(g)
        .into_iter()
        .filter(|(p, q, _)| segment.contains(p) && segment.contains(q))
        .collect();
    let mut levels: Vec<f64> = edges.iter().map(|e| e.2).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut cost = vec![f64::INFINITY; g.len()];
    for &s in seeds {
        cost[s] = f64::NEG_INFINITY;
    }
    for &level in &levels {
        let comp = components(g.len(), &edges, |w| w <= level);
        let seeded: BTreeSet<usize> = seeds.iter().map(|&s| comp[s]).collect();
        for &p in segment {
            if cost[p] == f64::INFINITY && seeded.contains(&comp[p]) {
                cost[p] = level;
            }
        }
    }
    cost
}

pub fn random_gradient(width: usize, height: usize, rng: &mut impl Rng) -> GradientImage {
    let values = (0..width * height).map(|_| rng.random::<f64>()).collect();
    GradientImage::new(width, height, values).unwrap()
}

/// Gradient with values on a coarse grid, so edge weights tie often.
pub fn quantized_gradient(width: usize, height: usize, levels: u32, rng: &mut impl Rng) -> GradientImage {
    let values = (0..width * height)
        .map(|_| rng.random_range(0..levels) as f64 / (levels - 1) as f64)
        .collect();
    GradientImage::new(width, height, values).unwrap()
}

/// Random 4-connected pixel set of `size` pixels grown from a random start.
pub fn random_connected_segment(width: usize, height: usize, size: usize, rng: &mut impl Rng) -> BTreeSet<usize> {
    let start = rng.random_range(0..width * height);
    let mut set = BTreeSet::from([start]);
    let mut frontier = vec![start];
    while set.len() < size && !frontier.is_empty() {
        let i = rng.random_range(0..frontier.len());
        let p = frontier[i];
        let (x, y) = (p % width, p / width);
        let mut options = Vec::new();
        if x > 0 {
            options.push(p - 1);
        }
        if x + 1 < width {
            options.push(p + 1);
        }
        if y > 0 {
            options.push(p - width);
        }
        if y + 1 < height {
            options.push(p + width);
        }
        options.retain(|q| !set.contains(q));
        match options.choose(rng) {
            Some(&q) => {
                set.insert(q);
                frontier.push(q);
            }
            None => {
                frontier.swap_remove(i);
            }
        }
    }
    set
}

/// Isotropic Gaussian clusters: `per_cluster` points around each center.
pub fn gaussian_clusters(
    centers: &[Vec<f64>],
    per_cluster: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> (Vec<Vec<f64>>, Vec<u32>) {
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_cluster {
            points.push(center.iter().map(|m| m + normal.sample(rng)).collect());
            labels.push(c as u32 + 1);
        }
    }
    (points, labels)
}

/// `count` random centers in `dim` dimensions, each coordinate N(0, spread²).
pub fn random_centers(count: usize, dim: usize, spread: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, spread).unwrap();
    (0..count)
        .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
        .collect()
}

/// Piecewise-constant synthetic scene.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// Ground-truth label per pixel, `1..=regions`.
    pub labels: Vec<u8>,
    /// Local-contrast gradient of the noisy image, min-max normalised.
    pub gradient: GradientImage,
}

fn voronoi_cells(width: usize, height: usize, sites: &[(f64, f64)]) -> Vec<usize> {
    let mut cell = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = |s: &(f64, f64)| (s.0 - cx).powi(2) + (s.1 - cy).powi(2);
            let nearest = (0..sites.len()).min_by(|&a, &b| d(&sites[a]).total_cmp(&d(&sites[b]))).unwrap();
            cell.push(nearest);
        }
    }
    cell
}

fn cells_are_regions(width: usize, height: usize, cell: &[usize], regions: usize, min_area: usize) -> bool {
    let mut area = vec![0usize; regions];
    for &c in cell {
        area[c] += 1;
    }
    if area.iter().any(|&a| a < min_area.max(1)) {
        return false;
    }
    let mut seen = vec![false; cell.len()];
    let mut pieces = 0;
    for start in 0..cell.len() {
        if seen[start] {
            continue;
        }
        pieces += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % width, p / width);
            let mut nbrs = Vec::with_capacity(4);
            if x > 0 {
                nbrs.push(p - 1);
            }
            if x + 1 < width {
                nbrs.push(p + 1);
            }
            if y > 0 {
                nbrs.push(p - width);
            }
            if y + 1 < height {
                nbrs.push(p + width);
            }
            for q in nbrs {
                if !seen[q] && cell[q] == cell[p] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    pieces == regions
}

/// Voronoi scene with `regions` connected cells of well-separated colours plus
/// Gaussian noise; the gradient is the largest colour difference to a 4-neighbour.
pub fn piecewise_scene(width: usize, height: usize, regions: usize, noise: f64, rng: &mut impl Rng) -> SyntheticScene {
    // Resample sites until every cell is one 4-connected piece of reasonable size.
    let min_area = width * height / (5 * regions);
    let (sites, cell) = loop {
        let sites: Vec<(f64, f64)> = (0..regions)
            .map(|_| (rng.random::<f64>() * width as f64, rng.random::<f64>() * height as f64))
            .collect();
        let cell = voronoi_cells(width, height, &sites);
        if cells_are_regions(width, height, &cell, regions, min_area) {
            break (sites, cell);
        }
    };
    debug_assert_eq!(sites.len(), regions);
    let mut colors: Vec<[f64; 3]> = Vec::new();
    while colors.len() < regions {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let far = colors.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) >= 0.35
        });
        if far {
            colors.push(c);
        }
    }
    let normal = Normal::new(0.0, noise).unwrap();
    let mut labels = Vec::with_capacity(width * height);
    let mut rgb = Vec::with_capacity(width * height * 3);
    for &nearest in &cell {
        labels.push(nearest as u8 + 1);
        for c in colors[nearest] {
            rgb.push((c + normal.sample(rng)).clamp(0.0, 1.0) as f32);
        }
    }
    let mut raw = vec![0.0; width * height];
    for p in 0..width * height {
        let (x, y) = (p % width, p / width);
        let mut best: f64 = 0.0;
        let mut consider = |q: usize| {
            let d = (0..3)
                .map(|c| (rgb[p * 3 + c] as f64 - rgb[q * 3 + c] as f64).abs())
                .fold(0.0, f64::max);
            best = best.max(d);
        };
        if x > 0 {
            consider(p - 1);
        }
        if x + 1 < width {
            consider(p + 1);
        }
        if y > 0 {
            consider(p - width);
        }
        if y + 1 < height {
            consider(p + width);
        }
        raw[p] = best;
    }
    let gradient = GradientImage::normalized(width, height, raw).unwrap();
    SyntheticScene {
        width,
        height,
        rgb,
        labels,
        gradient,
    }
}

/// File locations of a scene written by [`SyntheticScene::write`].
#[derive(Debug, Clone)]
pub struct ScenePaths {
    pub image: PathBuf,
    pub gradient: PathBuf,
    pub gt: PathBuf,
}

impl SyntheticScene {
    /// Writes `<name>.png` (RGB), `<name>.fsgr` (gradient) and `gt/<name>.png` (labels) under `dir`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<ScenePaths> {
        let paths = ScenePaths {
            image: dir.join(format!("{name}.png")),
            gradient: dir.join(format!("{name}.fsgr")),
            gt: dir.join("gt").join(format!("{name}.png")),
        };
        write_rgb_png(&paths.image, self.width, self.height, &self.rgb)?;
        self.gradient.save_fsgr(&paths.gradient)?;
        std::fs::create_dir_all(dir.join("gt"))?;
        self.gt_mask(name).save_png(&paths.gt, &[])?;
        Ok(paths)
    }

    pub fn gt_mask(&self, image_id: &str) -> LabelMask {
        LabelMask::new(image_id, self.width, self.height, self.labels.iter().map(|&l| l as u32).collect()).unwrap()
    }
}

/// Saves interleaved RGB in `[0, 1]` as an 8-bit PNG.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes).expect("buffer matches size");
    img.save(path)?;
    Ok(())
}

/// The 5×1 strip `[0.1, 0.1, 0.9, 0.1, 0.1]` with a matching colour image.
pub fn write_strip_fixture(dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
    let image = dir.join(format!("{name}.png"));
    let gradient = dir.join(format!("{name}.fsgr"));
    let rgb = [
        [0.9, 0.1, 0.1],
        [0.9, 0.1, 0.1],
        [0.5, 0.5, 0.5],
        [0.1, 0.1, 0.9],
        [0.1, 0.1, 0.9],
    ];
    let flat: Vec<f32> = rgb.iter().flatten().copied().collect();
    write_rgb_png(&image, 5, 1, &flat)?;
    GradientImage::new(5, 1, vec![0.1, 0.1, 0.9, 0.1, 0.1])?.save_fsgr(&gradient)?;
    Ok((image, gradient))
}
