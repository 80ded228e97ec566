//! Label masks, ground-truth protocols and evaluation metrics.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::Partition;

use super::PaletteEntry;

/// Ground-truth label excluded from every metric.
pub const VOID_LABEL: u32 = 255;

/// Per-pixel label ids for one image; 0 means unlabeled / background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: labels.len(),
            });
        }
        Ok(LabelMask {
            image_id: image_id.into(),
            width,
            height,
            labels,
        })
    }

    pub fn zeros(image_id: impl Into<String>, width: usize, height: usize) -> Self {
        LabelMask {
            image_id: image_id.into(),
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    /// Reads raw sample values of a single-channel (grey or indexed) PNG.
    pub fn load_png(path: &Path, image_id: impl Into<String>) -> Result<Self> {
        let format_err = |reason: String| Error::Format {
            kind: "label mask",
            path: path.to_path_buf(),
            reason,
        };
        let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| format_err("image too large".into()))?];
        let frame = reader.next_frame(&mut buf)?;
        let (w, h) = (frame.width as usize, frame.height as usize);
        if !matches!(frame.color_type, png::ColorType::Grayscale | png::ColorType::Indexed) {
            return Err(format_err(format!("expected a single-channel PNG, got {:?}", frame.color_type)));
        }
        let bits = frame.bit_depth as usize;
        let line = frame.line_size;
        let mut labels = Vec::with_capacity(w * h);
        for y in 0..h {
            let row = &buf[y * line..(y + 1) * line];
            for x in 0..w {
                let v = match bits {
                    16 => u16::from_be_bytes([row[2 * x], row[2 * x + 1]]) as u32,
                    8 => row[x] as u32,
                    1 | 2 | 4 => {
                        let per_byte = 8 / bits;
                        let byte = row[x / per_byte];
                        let shift = 8 - bits * (x % per_byte + 1);
                        ((byte >> shift) & ((1u8 << bits) - 1)) as u32
                    }
                    _ => return Err(format_err(format!("unsupported bit depth {bits}"))),
                };
                labels.push(v);
            }
        }
        Self::new(image_id, w, h, labels)
    }

    /// Writes an 8-bit indexed PNG whose palette maps each label id to its colour.
    pub fn save_png(&self, path: &Path, palette: &[PaletteEntry]) -> Result<()> {
        let max = self.labels.iter().copied().max().unwrap_or(0);
        if max > 255 {
            return Err(invalid(format!("label {max} does not fit an 8-bit mask")));
        }
        let top = palette.iter().map(|p| p.id).max().unwrap_or(0).max(max) as usize;
        let mut colors = vec![0u8; 3 * (top + 1)];
        for p in palette {
            colors[3 * p.id as usize..3 * p.id as usize + 3].copy_from_slice(&p.color);
        }
        let file = BufWriter::new(File::create(path)?);
        let mut encoder = png::Encoder::new(file, self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_palette(colors);
        let mut writer = encoder.write_header()?;
        let data: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        writer.write_image_data(&data)?;
        writer.finish()?;
        Ok(())
    }

    fn check_same_shape(&self, other: &LabelMask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(invalid(format!(
                "mask size {}x{} differs from {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

fn check_cover(partition: &Partition, gt: &LabelMask) -> Result<()> {
    if (partition.width(), partition.height()) != (gt.width, gt.height) {
        return Err(invalid(format!(
            "ground truth {}x{} does not cover {}x{} partition",
            gt.width,
            gt.height,
            partition.width(),
            partition.height()
        )));
    }
    Ok(())
}

/// Intersects every region with every ground-truth class; each connected
/// piece of a non-empty intersection becomes a region.
pub fn gt_constrained_partition(partition: &Partition, gt: &LabelMask) -> Result<Partition> {
    check_cover(partition, gt)?;
    let mut ids: HashMap<(u32, u32), u32> = HashMap::new();
    let map: Vec<u32> = partition
        .labels()
        .iter()
        .zip(&gt.labels)
        .map(|(&r, &c)| {
            let next = ids.len() as u32;
            *ids.entry((r, c)).or_insert(next)
        })
        .collect();
    Partition::connected_from_region_map(partition.width(), partition.height(), &map)
}

/// Most frequent ground-truth label per region, void excluded; ties go to
/// the smallest id. `None` for regions covered only by void.
pub fn oracle_majority_labels(partition: &Partition, gt: &LabelMask) -> Result<Vec<Option<u32>>> {
    check_cover(partition, gt)?;
    let mut counts: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); partition.region_count()];
    for (&r, &c) in partition.labels().iter().zip(&gt.labels) {
        if c != VOID_LABEL {
            *counts[r as usize].entry(c).or_default() += 1;
        }
    }
    Ok(counts
        .iter()
        .map(|m| {
            // BTreeMap iterates ascending, so the first maximum is the smallest id.
            m.iter()
                .fold(None, |best: Option<(u32, usize)>, (&l, &n)| match best {
                    Some((_, bn)) if bn >= n => best,
                    _ => Some((l, n)),
                })
                .map(|(l, _)| l)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    BinaryIou,
    InstanceIou,
    Agreement,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::BinaryIou, EvalMode::InstanceIou, EvalMode::Agreement];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::BinaryIou => "binary-iou",
            EvalMode::InstanceIou => "instance-iou",
            EvalMode::Agreement => "agreement",
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown evaluation mode '{s}'")))
    }
}

/// 4-connected components of equal, non-background, non-void labels.
fn components(mask: &LabelMask) -> (Vec<u32>, Vec<u32>) {
    let n = mask.labels.len();
    let mut comp = vec![u32::MAX; n];
    let mut comp_label = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        let l = mask.labels[start];
        if comp[start] != u32::MAX || l == 0 || l == VOID_LABEL {
            continue;
        }
        let id = comp_label.len() as u32;
        comp_label.push(l);
        comp[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            for q in crate::graph::neighbors4(mask.width, mask.height, p) {
                if comp[q] == u32::MAX && mask.labels[q] == l {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
    }
    (comp, comp_label)
}

/// Score of one prediction against its ground truth; `None` when the
/// metric is undefined (no instances, or only void pixels).
pub fn evaluate_image(pred: &LabelMask, gt: &LabelMask, mode: EvalMode) -> Result<Option<f64>> {
    pred.check_same_shape(gt)?;
    let cared = |i: usize| gt.labels[i] != VOID_LABEL;
    let n = gt.labels.len();
    Ok(match mode {
        EvalMode::BinaryIou => {
            let (mut inter, mut union) = (0usize, 0usize);
            for i in (0..n).filter(|&i| cared(i)) {
                let (a, b) = (pred.labels[i] != 0, gt.labels[i] != 0);
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
            Some(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
        }
        EvalMode::Agreement => {
            let total = (0..n).filter(|&i| cared(i)).count();
            let same = (0..n).filter(|&i| cared(i) && pred.labels[i] == gt.labels[i]).count();
            (total > 0).then(|| same as f64 / total as f64)
        }
        EvalMode::InstanceIou => {
            let (gcomp, glabel) = components(gt);
            let (pcomp, plabel) = components(pred);
            if glabel.is_empty() {
                return Ok(None);
            }
            let mut gsize = vec![0usize; glabel.len()];
            let mut psize = vec![0usize; plabel.len()];
            let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
            for i in (0..n).filter(|&i| cared(i)) {
                if gcomp[i] != u32::MAX {
                    gsize[gcomp[i] as usize] += 1;
                }
                if pcomp[i] != u32::MAX {
                    psize[pcomp[i] as usize] += 1;
                    if gcomp[i] != u32::MAX && plabel[pcomp[i] as usize] == glabel[gcomp[i] as usize] {
                        *overlap.entry((gcomp[i], pcomp[i])).or_default() += 1;
                    }
                }
            }
            let mut best: Vec<Option<(usize, u32)>> = vec![None; glabel.len()];
            for (&(g, p), &inter) in &overlap {
                let slot = &mut best[g as usize];
                let better = match *slot {
                    None => true,
                    Some((bi, bp)) => inter > bi || (inter == bi && p < bp),
                };
                if better {
                    *slot = Some((inter, p));
                }
            }
            let total: f64 = best
                .iter()
                .enumerate()
                .map(|(g, b)| match b {
                    Some((inter, p)) => *inter as f64 / (gsize[g] + psize[*p as usize] - inter) as f64,
                    None => 0.0,
                })
                .sum();
            Some(total / glabel.len() as f64)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: EvalMode,
    pub per_image: Vec<ImageScore>,
    /// Over images with a defined score; NaN when there are none.
    pub mean: f64,
    pub median: f64,
}

/// Scores paired predictions and ground truths and aggregates them.
pub fn evaluate(preds: &[LabelMask], gts: &[LabelMask], mode: EvalMode) -> Result<Metrics> {
    if preds.len() != gts.len() {
        return Err(invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            Ok(ImageScore {
                image_id: g.image_id.clone(),
                score: evaluate_image(p, g, mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores: Vec<f64> = per_image.iter().filter_map(|s| s.score).collect();
    scores.sort_by(f64::total_cmp);
    let (mean, median) = if scores.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let m = scores.len();
        let median = if m % 2 == 1 {
            scores[m / 2]
        } else {
            0.5 * (scores[m / 2 - 1] + scores[m / 2])
        };
        (scores.iter().sum::<f64>() / m as f64, median)
    };
    Ok(Metrics {
        mode,
        per_image,
        mean,
        median,
    })
}

/// Paints per-region labels into a mask; `None` and `Some(0)` stay 0.
pub fn mask_from_region_labels(image_id: &str, partition: &Partition, labels: &[Option<u32>]) -> Result<LabelMask> {
    if labels.len() != partition.region_count() {
        return Err(invalid(format!(
            "{} labels for {} regions",
            labels.len(),
            partition.region_count()
        )));
    }
    let values = partition
        .labels()
        .iter()
        .map(|&r| labels[r as usize].unwrap_or(0))
        .collect();
    LabelMask::new(image_id, partition.width(), partition.height(), values)
}
