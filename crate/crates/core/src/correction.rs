//! Seeded watershed split of a single segment from positive/negative clicks.
//!
//! The split is the image foresting transform with max-arc path cost over
//! the segment's 4-adjacency graph. Equal costs are resolved first-in first-out.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{neighbors4, pair_weight, GradientImage};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickSet {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

/// Binary labelling of a segment; `positive[i]` belongs to `pixels[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitLabels {
    pub pixels: Vec<usize>,
    pub positive: Vec<bool>,
}

impl SplitLabels {
    pub fn positive_pixels(&self) -> Vec<usize> {
        self.select(true)
    }

    pub fn negative_pixels(&self) -> Vec<usize> {
        self.select(false)
    }

    fn select(&self, side: bool) -> Vec<usize> {
        self.pixels
            .iter()
            .zip(&self.positive)
            .filter_map(|(&p, &l)| (l == side).then_some(p))
            .collect()
    }
}

#[derive(PartialEq)]
struct Entry {
    cost: f64,
    seq: u64,
    pixel: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // BinaryHeap is a max-heap: reverse both keys.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Labels every pixel of `segment` with the polarity of the seed reached by
/// the path of smallest maximum edge weight. With one seed set empty the
/// whole segment takes the other polarity.
pub fn split_segment(g: &GradientImage, segment: &[usize], clicks: &ClickSet) -> Result<SplitLabels> {
    let mut pixels: Vec<usize> = segment.to_vec();
    pixels.sort_unstable();
    pixels.dedup();
    if pixels.is_empty() {
        return Err(invalid("segment is empty"));
    }
    if let Some(p) = pixels.iter().find(|&&p| p >= g.len()) {
        return Err(invalid(format!("segment pixel {p} outside image")));
    }
    let index: HashMap<usize, usize> = pixels.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    check_connected(g, &pixels, &index)?;

    let pos: HashSet<usize> = clicks.positive.iter().copied().collect();
    for s in clicks.positive.iter().chain(&clicks.negative) {
        if !index.contains_key(s) {
            return Err(invalid(format!("seed {s} lies outside the segment")));
        }
    }
    if let Some(s) = clicks.negative.iter().find(|s| pos.contains(s)) {
        return Err(invalid(format!("seed {s} is both positive and negative")));
    }
    if clicks.positive.is_empty() && clicks.negative.is_empty() {
        return Err(invalid("no seeds given"));
    }
    if clicks.negative.is_empty() || clicks.positive.is_empty() {
        let side = clicks.negative.is_empty();
        return Ok(SplitLabels {
            positive: vec![side; pixels.len()],
            pixels,
        });
    }

    let (w, h) = (g.width(), g.height());
    let mut cost = vec![f64::INFINITY; pixels.len()];
    let mut label = vec![false; pixels.len()];
    let mut done = vec![false; pixels.len()];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let seeds = clicks
        .positive
        .iter()
        .map(|&s| (s, true))
        .chain(clicks.negative.iter().map(|&s| (s, false)));
    for (s, polarity) in seeds {
        let i = index[&s];
        if cost[i] == f64::NEG_INFINITY {
            continue;
        }
        cost[i] = f64::NEG_INFINITY;
        label[i] = polarity;
        heap.push(Entry {
            cost: f64::NEG_INFINITY,
            seq,
            pixel: s,
        });
        seq += 1;
    }

    while let Some(Entry { cost: c, pixel: p, .. }) = heap.pop() {
        let i = index[&p];
        if done[i] || c > cost[i] {
            continue;
        }
        done[i] = true;
        for q in neighbors4(w, h, p) {
            let Some(&j) = index.get(&q) else { continue };
            if done[j] {
                continue;
            }
            let candidate = c.max(pair_weight(g, p, q));
            if candidate < cost[j] {
                cost[j] = candidate;
                label[j] = label[i];
                heap.push(Entry {
                    cost: candidate,
                    seq,
                    pixel: q,
                });
                seq += 1;
            }
        }
    }

    Ok(SplitLabels {
        pixels,
        positive: label,
    })
}

fn check_connected(g: &GradientImage, pixels: &[usize], index: &HashMap<usize, usize>) -> Result<()> {
    let mut seen = vec![false; pixels.len()];
    let mut stack = vec![pixels[0]];
    seen[0] = true;
    let mut reached = 1;
    while let Some(p) = stack.pop() {
        for q in neighbors4(g.width(), g.height(), p) {
            if let Some(&j) = index.get(&q) {
                if !seen[j] {
                    seen[j] = true;
                    reached += 1;
                    stack.push(q);
                }
            }
        }
    }
    if reached != pixels.len() {
        return Err(invalid("segment is not 4-connected"));
    }
    Ok(())
}
