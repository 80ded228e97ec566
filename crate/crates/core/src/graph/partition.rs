use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{neighbors4, Hierarchy};
use crate::error::{invalid, Error, Result};

pub(crate) struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins the sets of two roots and returns the new root.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> usize {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return a;
        }
        match self.rank[a].cmp(&self.rank[b]) {
            std::cmp::Ordering::Less => {
                self.parent[a] = b;
                b
            }
            std::cmp::Ordering::Greater => {
                self.parent[b] = a;
                a
            }
            std::cmp::Ordering::Equal => {
                self.parent[b] = a;
                self.rank[a] += 1;
                a
            }
        }
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn point(x: usize, y: usize) -> Self {
        BBox {
            x0: x,
            y0: y,
            x1: x,
            y1: y,
        }
    }

    pub fn include(&mut self, x: usize, y: usize) {
        self.x0 = self.x0.min(x);
        self.y0 = self.y0.min(y);
        self.x1 = self.x1.max(x);
        self.y1 = self.y1.max(y);
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionInfo {
    pub pixel_count: usize,
    pub bbox: BBox,
}

/// Disjoint cover of an image by regions; ids follow first-pixel row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    regions: Vec<RegionInfo>,
}

impl Partition {
    /// Builds a partition from an arbitrary region map. Ids are renumbered
    /// in first-pixel order; connectivity is not checked here.
    pub fn from_region_map(width: usize, height: usize, map: &[u32]) -> Result<Self> {
        if map.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: map.len(),
            });
        }
        let mut remap = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(map.len());
        let mut regions: Vec<RegionInfo> = Vec::new();
        for (p, &raw) in map.iter().enumerate() {
            let (x, y) = (p % width, p / width);
            let id = *remap.entry(raw).or_insert_with(|| {
                regions.push(RegionInfo {
                    pixel_count: 0,
                    bbox: BBox::point(x, y),
                });
                (regions.len() - 1) as u32
            });
            let r = &mut regions[id as usize];
            r.pixel_count += 1;
            r.bbox.include(x, y);
            labels.push(id);
        }
        Ok(Partition {
            width,
            height,
            labels,
            regions,
        })
    }

    /// Splits every region of a map into its 4-connected components.
    pub fn connected_from_region_map(width: usize, height: usize, map: &[u32]) -> Result<Self> {
        if map.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: map.len(),
            });
        }
        let mut comp = vec![u32::MAX; map.len()];
        let mut next = 0u32;
        let mut queue = VecDeque::new();
        for start in 0..map.len() {
            if comp[start] != u32::MAX {
                continue;
            }
            comp[start] = next;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                for q in neighbors4(width, height, p) {
                    if comp[q] == u32::MAX && map[q] == map[start] {
                        comp[q] = next;
                        queue.push_back(q);
                    }
                }
            }
            next += 1;
        }
        Self::from_region_map(width, height, &comp)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Region id per pixel.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> &[RegionInfo] {
        &self.regions
    }

    /// Pixel lists per region, each sorted ascending.
    pub fn region_pixels(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self
            .regions
            .iter()
            .map(|r| Vec::with_capacity(r.pixel_count))
            .collect();
        for (p, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(p);
        }
        out
    }

    /// True when every region is a single 4-connected component.
    pub fn is_connected(&self) -> bool {
        Self::connected_from_region_map(self.width, self.height, &self.labels)
            .map(|c| c.region_count() == self.region_count())
            .unwrap_or(false)
    }
}

/// Connected components of the MST restricted to edges with saliency below `threshold`.
pub fn horizontal_cut(h: &Hierarchy, threshold: f64) -> Result<Partition> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(invalid(format!("cut threshold must be > 0, got {threshold}")));
    }
    let n = h.leaf_count();
    let mut uf = UnionFind::new(n);
    for e in h.mst_edges() {
        if e.saliency < threshold {
            uf.union(e.p, e.q);
        }
    }
    let roots: Vec<u32> = (0..n).map(|p| uf.find(p) as u32).collect();
    Partition::from_region_map(h.width(), h.height(), &roots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_hierarchy, Criterion, GradientImage};

    fn strip_hierarchy() -> Hierarchy {
        let g = GradientImage::new(5, 1, vec![0.1, 0.1, 0.9, 0.1, 0.1]).unwrap();
        build_hierarchy(&g, Criterion::Area).unwrap()
    }

    #[test]
    fn flat_image_single_region() {
        let h = build_hierarchy(&GradientImage::zeros(6, 4), Criterion::Volume).unwrap();
        let p = horizontal_cut(&h, 1.0).unwrap();
        assert_eq!(p.region_count(), 1);
        assert_eq!(p.regions()[0].pixel_count, 24);
    }

    #[test]
    fn strip_cuts() {
        let h = strip_hierarchy();
        let p1 = horizontal_cut(&h, 1.0).unwrap();
        assert_eq!(p1.labels(), &[0, 0, 0, 1, 1]);
        assert_eq!(
            p1.regions()[1],
            RegionInfo {
                pixel_count: 2,
                bbox: BBox {
                    x0: 3,
                    y0: 0,
                    x1: 4,
                    y1: 0
                }
            }
        );
        let p3 = horizontal_cut(&h, 3.0).unwrap();
        assert_eq!(p3.labels(), &[0, 0, 0, 0, 0]);
    }

    #[test]
    fn non_positive_threshold_rejected() {
        let h = strip_hierarchy();
        assert!(horizontal_cut(&h, 0.0).is_err());
        assert!(horizontal_cut(&h, f64::NAN).is_err());
    }

    #[test]
    fn region_map_renumbering_and_connectivity() {
        let p = Partition::from_region_map(3, 1, &[7, 3, 7]).unwrap();
        assert_eq!(p.labels(), &[0, 1, 0]);
        assert!(!p.is_connected());
        let c = Partition::connected_from_region_map(3, 1, &[7, 3, 7]).unwrap();
        assert_eq!(c.labels(), &[0, 1, 2]);
        assert!(c.is_connected());
    }
}
