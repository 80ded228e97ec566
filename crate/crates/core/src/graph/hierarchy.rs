use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GradientImage, PixelGraph};
use crate::error::{invalid, Error, Result};

/// Region attribute driving extinction values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Area,
    Volume,
    Dynamics,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Area, Criterion::Volume, Criterion::Dynamics];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Area => "area",
            Criterion::Volume => "volume",
            Criterion::Dynamics => "dynamics",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "area" => Ok(Criterion::Area),
            "volume" => Ok(Criterion::Volume),
            "dynamics" => Ok(Criterion::Dynamics),
            other => Err(invalid(format!("unknown attribute kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutConfig {
    pub criterion: Criterion,
    pub threshold: f64,
}

impl CutConfig {
    pub fn new(criterion: Criterion, threshold: f64) -> Result<Self> {
        let cfg = CutConfig {
            criterion,
            threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || self.threshold <= 0.0 {
            return Err(invalid(format!(
                "cut threshold must be finite and > 0, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

impl Default for CutConfig {
    fn default() -> Self {
        CutConfig {
            criterion: Criterion::Volume,
            threshold: 1000.0,
        }
    }
}

/// An edge of the minimum spanning tree with its watershed saliency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    /// Index in the canonical pixel-graph enumeration.
    pub edge: usize,
    pub p: usize,
    pub q: usize,
    pub weight: f64,
    pub saliency: f64,
}

/// Canonical (quasi-flat-zone) merge tree of a gradient image together with
/// the extinction saliency of each MST edge.
///
/// Nodes `0..n` are the pixels; internal nodes follow in creation order, so
/// every child index is smaller than its parent's. The root is its own parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    width: usize,
    height: usize,
    criterion: Criterion,
    parents: Vec<usize>,
    altitudes: Vec<f64>,
    attribute: Vec<f64>,
    minima: Vec<bool>,
    mst: Vec<MstEdge>,
    bpt_parents: Vec<usize>,
}

impl Hierarchy {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn leaf_count(&self) -> usize {
        self.width * self.height
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn altitudes(&self) -> &[f64] {
        &self.altitudes
    }

    pub fn root(&self) -> usize {
        self.parents.len() - 1
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node < self.leaf_count()
    }

    /// Attribute values for the build criterion, per canonical node.
    pub fn attribute(&self) -> &[f64] {
        &self.attribute
    }

    pub fn is_minimum(&self, node: usize) -> bool {
        self.minima[node]
    }

    pub fn minima(&self) -> impl Iterator<Item = usize> + '_ {
        self.minima
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }

    /// MST edges in ascending merge order.
    pub fn mst_edges(&self) -> &[MstEdge] {
        &self.mst
    }

    /// Parent array of the binary partition tree before canonicalisation
    /// (`2n - 1` nodes, root last).
    pub fn binary_parents(&self) -> &[usize] {
        &self.bpt_parents
    }

    /// Saliency indexed by pixel-graph edge; non-MST edges carry `None`.
    pub fn saliency_by_edge(&self) -> Vec<Option<f64>> {
        let mut out = vec![None; 2 * self.leaf_count() - self.width - self.height];
        for e in &self.mst {
            out[e.edge] = Some(e.saliency);
        }
        out
    }
}

/// Builds the watershed hierarchy of `g` ordered by extinction values of `criterion`.
pub fn build_hierarchy(g: &GradientImage, criterion: Criterion) -> Result<Hierarchy> {
    let n = g.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "hierarchy needs at least 2 pixels, got {n}"
        )));
    }
    let edges = PixelGraph::new(g).edges();
    let mut order: Vec<usize> = (0..edges.len()).collect();
    // Stable: equal weights keep ascending edge index.
    order.sort_by(|&a, &b| edges[a].weight.total_cmp(&edges[b].weight));

    // Binary partition tree by Kruskal.
    let total = 2 * n - 1;
    let mut bpt_parent: Vec<usize> = (0..total).collect();
    let mut bpt_alt = vec![0.0; total];
    let mut children = vec![(0usize, 0usize); n - 1];
    let mut merge_edge = vec![0usize; n - 1];
    let mut uf = super::partition::UnionFind::new(n);
    let mut comp_node: Vec<usize> = (0..n).collect();
    let mut next = n;
    for &e in &order {
        let (ru, rv) = (uf.find(edges[e].p), uf.find(edges[e].q));
        if ru == rv {
            continue;
        }
        let (cu, cv) = (comp_node[ru], comp_node[rv]);
        bpt_parent[cu] = next;
        bpt_parent[cv] = next;
        bpt_alt[next] = edges[e].weight;
        children[next - n] = (cu, cv);
        merge_edge[next - n] = e;
        let r = uf.union(ru, rv);
        comp_node[r] = next;
        next += 1;
        if next == total {
            break;
        }
    }
    debug_assert_eq!(next, total);

    // Quasi-flat-zone canonicalisation: an internal node with the same
    // altitude as its parent is folded into it.
    let root = total - 1;
    let mut rep: Vec<usize> = (0..total).collect();
    for x in (n..root).rev() {
        let p = bpt_parent[x];
        if bpt_alt[x] == bpt_alt[p] {
            rep[x] = rep[p];
        }
    }
    let mut canon_id = vec![usize::MAX; total];
    for (i, id) in canon_id.iter_mut().enumerate().take(n) {
        *id = i;
    }
    let mut kept = n;
    for x in n..total {
        if rep[x] == x {
            canon_id[x] = kept;
            kept += 1;
        }
    }
    let mut parents = vec![0usize; kept];
    let mut altitudes = vec![0.0; kept];
    for x in 0..total {
        if x >= n && rep[x] != x {
            continue;
        }
        let c = canon_id[x];
        parents[c] = if x == root {
            c
        } else {
            canon_id[rep[bpt_parent[x]]]
        };
        if x >= n {
            altitudes[c] = bpt_alt[x];
        }
    }

    let tree = TreeView {
        n,
        parents: &parents,
        altitudes: &altitudes,
    };
    let minima = tree.minima();
    let attribute = tree.attribute(criterion);
    let mut has_min = minima.clone();
    for c in 0..kept - 1 {
        if has_min[c] {
            has_min[parents[c]] = true;
        }
    }

    // Extinction: each component carries the attribute of its surviving
    // minimum; a merge edge takes the smaller carried value.
    let mut carried: Vec<Option<f64>> = vec![None; n - 1];
    let mut mst = Vec::with_capacity(n - 1);
    for b in n..total {
        let side = |u: usize| -> Option<f64> {
            if u < n {
                None
            } else if rep[u] == rep[b] {
                carried[u - n]
            } else {
                let c = canon_id[u];
                has_min[c].then_some(attribute[c])
            }
        };
        let (u, v) = children[b - n];
        let (su, sv) = (side(u), side(v));
        let saliency = match (su, sv) {
            (Some(a), Some(c)) => a.min(c),
            _ => 0.0,
        };
        carried[b - n] = match (su, sv) {
            (Some(a), Some(c)) => Some(a.max(c)),
            (a, c) => a.or(c),
        };
        let e = edges[merge_edge[b - n]];
        mst.push(MstEdge {
            edge: merge_edge[b - n],
            p: e.p,
            q: e.q,
            weight: e.weight,
            saliency,
        });
    }

    Ok(Hierarchy {
        width: g.width(),
        height: g.height(),
        criterion,
        parents,
        altitudes,
        attribute,
        minima,
        mst,
        bpt_parents: bpt_parent,
    })
}

/// Per-node attribute values of a canonical hierarchy.
pub fn attributes(h: &Hierarchy, kind: Criterion) -> Vec<f64> {
    TreeView {
        n: h.leaf_count(),
        parents: &h.parents,
        altitudes: &h.altitudes,
    }
    .attribute(kind)
}

struct TreeView<'a> {
    n: usize,
    parents: &'a [usize],
    altitudes: &'a [f64],
}

impl TreeView<'_> {
    fn len(&self) -> usize {
        self.parents.len()
    }

    /// Internal nodes whose children are all leaves.
    fn minima(&self) -> Vec<bool> {
        let mut has_internal_child = vec![false; self.len()];
        for c in self.n..self.len() - 1 {
            has_internal_child[self.parents[c]] = true;
        }
        (0..self.len())
            .map(|i| i >= self.n && !has_internal_child[i])
            .collect()
    }

    fn parent_altitude(&self, c: usize) -> f64 {
        self.altitudes[self.parents[c]]
    }

    fn area(&self) -> Vec<f64> {
        let mut area = vec![0.0; self.len()];
        for c in 0..self.len() {
            if c < self.n {
                area[c] = 1.0;
            }
            if c + 1 < self.len() {
                area[self.parents[c]] += area[c];
            }
        }
        area
    }

    fn attribute(&self, kind: Criterion) -> Vec<f64> {
        let area = self.area();
        let last = self.len() - 1;
        match kind {
            Criterion::Area => area,
            Criterion::Volume => {
                let mut volume = vec![0.0; self.len()];
                for c in 0..self.len() {
                    volume[c] += area[c] * (self.parent_altitude(c) - self.altitudes[c]);
                    if c < last {
                        volume[self.parents[c]] += volume[c];
                    }
                }
                volume
            }
            Criterion::Dynamics => {
                // Lowest internal altitude in each subtree; leaves count as 0.
                let mut lowest = vec![f64::INFINITY; self.len()];
                for c in 0..self.len() {
                    if c < self.n {
                        lowest[c] = 0.0;
                    } else {
                        lowest[c] = lowest[c].min(self.altitudes[c]);
                        if c < last {
                            let p = self.parents[c];
                            lowest[p] = lowest[p].min(lowest[c]);
                        }
                    }
                }
                (0..self.len())
                    .map(|c| self.parent_altitude(c) - lowest[c])
                    .collect()
            }
        }
    }
}
