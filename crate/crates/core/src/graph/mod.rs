//! Edge-weighted pixel graphs, watershed hierarchies and their horizontal cuts.
//!
//! Pixels are addressed by row-major linear index. The 4-adjacency graph is
//! enumerated deterministically: for each pixel in row-major order, its
//! horizontal edge (to the right) comes before its vertical edge (downward).

mod gradient;
mod hierarchy;
mod partition;

pub use gradient::GradientImage;
pub use hierarchy::{attributes, build_hierarchy, Criterion, CutConfig, Hierarchy, MstEdge};
pub use partition::{horizontal_cut, BBox, Partition, RegionInfo};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub p: usize,
    pub q: usize,
    pub weight: f64,
}

/// Weight of the edge between two 4-neighbours: the mean of their gradients.
pub fn edge_weight(g: &GradientImage, p: usize, q: usize) -> Result<f64> {
    if p >= g.len() || q >= g.len() {
        return Err(invalid(format!("pixel out of bounds: {p}, {q}")));
    }
    if !are_neighbors(g.width(), p, q) {
        return Err(invalid(format!("pixels {p} and {q} are not 4-neighbours")));
    }
    Ok(pair_weight(g, p, q))
}

#[inline]
pub(crate) fn pair_weight(g: &GradientImage, p: usize, q: usize) -> f64 {
    (g.at(p) + g.at(q)) / 2.0
}

pub(crate) fn are_neighbors(width: usize, p: usize, q: usize) -> bool {
    let (a, b) = if p < q { (p, q) } else { (q, p) };
    (b == a + 1 && b % width != 0) || b == a + width
}

/// Implicit 4-adjacency graph over a gradient image.
#[derive(Debug, Clone, Copy)]
pub struct PixelGraph<'a> {
    gradient: &'a GradientImage,
}

impl<'a> PixelGraph<'a> {
    pub fn new(gradient: &'a GradientImage) -> Self {
        PixelGraph { gradient }
    }

    pub fn edge_count(&self) -> usize {
        let (w, h) = (self.gradient.width(), self.gradient.height());
        if w == 0 || h == 0 {
            return 0;
        }
        2 * w * h - w - h
    }

    /// All edges in canonical index order.
    pub fn edges(&self) -> Vec<Edge> {
        let (w, h) = (self.gradient.width(), self.gradient.height());
        let mut edges = Vec::with_capacity(self.edge_count());
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    edges.push(self.edge(p, p + 1));
                }
                if y + 1 < h {
                    edges.push(self.edge(p, p + w));
                }
            }
        }
        edges
    }

    fn edge(&self, p: usize, q: usize) -> Edge {
        Edge {
            p,
            q,
            weight: pair_weight(self.gradient, p, q),
        }
    }
}

/// 4-neighbours of `p` inside a `width`×`height` grid, in the order
/// left, right, up, down.
pub(crate) fn neighbors4(width: usize, height: usize, p: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % width, p / width);
    let left = (x > 0).then(|| p - 1);
    let right = (x + 1 < width).then(|| p + 1);
    let up = (y > 0).then(|| p - width);
    let down = (y + 1 < height).then(|| p + width);
    [left, right, up, down].into_iter().flatten()
}
