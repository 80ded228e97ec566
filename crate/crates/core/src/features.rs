//! Per-segment feature vectors.
//!
//! Segments are cropped from their image with a border, background pixels
//! are zeroed and the crop is resized to 224×224. A descriptor is then
//! computed either by the built-in colour/orientation histogram or looked up
//! in an external feature file keyed by segment.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::Rgb32FImage;

use crate::error::{invalid, Error, Result};
use crate::graph::BBox;
use crate::rle::{RunLength, SegmentKey};

pub const CROP_SIZE: usize = 224;
pub const DEFAULT_BORDER_FRACTION: f64 = 0.1;
pub const COLOR_BINS: usize = 8;
pub const ORIENTATION_BINS: usize = 16;
/// Dimension of the built-in descriptor.
pub const BUILTIN_DIM: usize = COLOR_BINS * COLOR_BINS * COLOR_BINS + ORIENTATION_BINS;

// Below this, luminance differences are interpolation rounding, not structure.
const GRADIENT_FLOOR: f64 = 1e-5;

const FSAF_MAGIC: &[u8; 4] = b"FSAF";
const FSAF_VERSION: u32 = 1;

/// A masked 224×224 RGB crop of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCrop {
    /// Interleaved RGB, row-major, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// Segment membership per crop pixel.
    pub mask: Vec<bool>,
    /// Source window in image coordinates (inclusive).
    pub window: BBox,
}

impl SegmentCrop {
    pub fn rgb(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * CROP_SIZE + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Crops the bounding box of `mask` expanded by `border_fraction` of its
/// size on each side, zeroes non-mask pixels and resizes bilinearly.
pub fn crop_segment(image: &Rgb32FImage, mask: &RunLength, border_fraction: f64) -> Result<SegmentCrop> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if mask.is_empty() {
        return Err(invalid("cannot crop an empty mask"));
    }
    if !(border_fraction >= 0.0 && border_fraction.is_finite()) {
        return Err(invalid(format!("border fraction must be >= 0, got {border_fraction}")));
    }
    let mut bbox: Option<BBox> = None;
    for p in mask.pixels() {
        if p >= w * h {
            return Err(invalid(format!("mask pixel {p} outside {w}x{h} image")));
        }
        let (x, y) = (p % w, p / w);
        match bbox.as_mut() {
            Some(b) => b.include(x, y),
            None => bbox = Some(BBox::point(x, y)),
        }
    }
    let bbox = bbox.unwrap();
    let window = expand_window(bbox, border_fraction, w, h);
    let (ww, wh) = (window.width(), window.height());

    // Masked source window.
    let mut src = vec![0f32; ww * wh * 3];
    let mut inside = vec![false; ww * wh];
    let raw = image.as_raw();
    for p in mask.pixels() {
        let (x, y) = (p % w, p / w);
        let (lx, ly) = (x - window.x0, y - window.y0);
        let i = ly * ww + lx;
        inside[i] = true;
        src[i * 3..i * 3 + 3].copy_from_slice(&raw[p * 3..p * 3 + 3]);
    }

    let mut pixels = vec![0f32; CROP_SIZE * CROP_SIZE * 3];
    let mut out_mask = vec![false; CROP_SIZE * CROP_SIZE];
    let sx = ww as f64 / CROP_SIZE as f64;
    let sy = wh as f64 / CROP_SIZE as f64;
    for oy in 0..CROP_SIZE {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (wh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(wh - 1);
        let ty = (fy - y0 as f64) as f32;
        let ny = (((oy as f64 + 0.5) * sy) as usize).min(wh - 1);
        for ox in 0..CROP_SIZE {
            let nx = (((ox as f64 + 0.5) * sx) as usize).min(ww - 1);
            let o = oy * CROP_SIZE + ox;
            if !inside[ny * ww + nx] {
                continue;
            }
            out_mask[o] = true;
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (ww - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(ww - 1);
            let tx = (fx - x0 as f64) as f32;
            for c in 0..3 {
                let at = |x: usize, y: usize| src[(y * ww + x) * 3 + c];
                let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                pixels[o * 3 + c] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    Ok(SegmentCrop {
        pixels,
        mask: out_mask,
        window,
    })
}

fn expand_window(bbox: BBox, fraction: f64, width: usize, height: usize) -> BBox {
    let bx = (fraction * bbox.width() as f64).round() as usize;
    let by = (fraction * bbox.height() as f64).round() as usize;
    BBox {
        x0: bbox.x0.saturating_sub(bx),
        y0: bbox.y0.saturating_sub(by),
        x1: (bbox.x1 + bx).min(width - 1),
        y1: (bbox.y1 + by).min(height - 1),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub key: SegmentKey,
    pub values: Vec<f32>,
}

/// Colour histogram (8 bins per channel) followed by a magnitude-weighted
/// gradient-orientation histogram, each block L2-normalised.
pub fn builtin_descriptor(crop: &SegmentCrop) -> Vec<f32> {
    let mut color = vec![0f64; COLOR_BINS * COLOR_BINS * COLOR_BINS];
    let bin = |v: f32| ((v as f64 * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1);
    for (i, _) in crop.mask.iter().enumerate().filter(|(_, &m)| m) {
        let [r, g, b] = crop.rgb(i % CROP_SIZE, i / CROP_SIZE);
        color[(bin(r) * COLOR_BINS + bin(g)) * COLOR_BINS + bin(b)] += 1.0;
    }

    let luma = |x: usize, y: usize| {
        let [r, g, b] = crop.rgb(x, y);
        (r as f64 + g as f64 + b as f64) / 3.0
    };
    let inside = |x: usize, y: usize| crop.mask[y * CROP_SIZE + x];
    let mut orient = vec![0f64; ORIENTATION_BINS];
    for y in 1..CROP_SIZE - 1 {
        for x in 1..CROP_SIZE - 1 {
            if !(inside(x, y) && inside(x - 1, y) && inside(x + 1, y) && inside(x, y - 1) && inside(x, y + 1)) {
                continue;
            }
            let gx = luma(x + 1, y) - luma(x - 1, y);
            let gy = luma(x, y + 1) - luma(x, y - 1);
            let mag = gx.hypot(gy);
            if mag < GRADIENT_FLOOR {
                continue;
            }
            let t = (gy.atan2(gx) + PI) / (2.0 * PI);
            orient[((t * ORIENTATION_BINS as f64) as usize) % ORIENTATION_BINS] += mag;
        }
    }
    if orient.iter().sum::<f64>() < 1e-12 {
        orient.fill(1.0);
    }

    let mut out = Vec::with_capacity(BUILTIN_DIM);
    for block in [color, orient] {
        let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = if norm > 0.0 { norm } else { 1.0 };
        out.extend(block.iter().map(|v| (v / norm) as f32));
    }
    out
}

/// Source of segment features.
#[derive(Debug, Clone)]
pub enum FeatureProvider {
    Builtin,
    File(FeatureFile),
}

impl FeatureProvider {
    pub fn dimension(&self) -> usize {
        match self {
            FeatureProvider::Builtin => BUILTIN_DIM,
            FeatureProvider::File(f) => f.dimension(),
        }
    }

    /// The built-in provider reads the crop; the file provider ignores it.
    pub fn describe(&self, key: SegmentKey, crop: impl FnOnce() -> Result<SegmentCrop>) -> Result<FeatureVector> {
        let values = match self {
            FeatureProvider::Builtin => builtin_descriptor(&crop()?),
            FeatureProvider::File(f) => f.get(key).ok_or(Error::MissingFeature(key))?.to_vec(),
        };
        Ok(FeatureVector { key, values })
    }
}

/// In-memory `FSAF` feature table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureFile {
    dimension: usize,
    keys: Vec<SegmentKey>,
    values: Vec<f32>,
    index: HashMap<SegmentKey, usize>,
}

impl FeatureFile {
    pub fn new(dimension: usize) -> Self {
        FeatureFile {
            dimension,
            ..Default::default()
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[SegmentKey] {
        &self.keys
    }

    /// Inserts or replaces the record for `key`.
    pub fn insert(&mut self, key: SegmentKey, values: &[f32]) -> Result<()> {
        if values.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite feature for segment {key}")));
        }
        match self.index.get(&key) {
            Some(&i) => self.values[i * self.dimension..(i + 1) * self.dimension].copy_from_slice(values),
            None => {
                self.index.insert(key, self.keys.len());
                self.keys.push(key);
                self.values.extend_from_slice(values);
            }
        }
        Ok(())
    }

    pub fn get(&self, key: SegmentKey) -> Option<&[f32]> {
        self.index
            .get(&key)
            .map(|&i| &self.values[i * self.dimension..(i + 1) * self.dimension])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.keys.len() * (8 + 4 * self.dimension));
        out.extend_from_slice(FSAF_MAGIC);
        out.extend_from_slice(&FSAF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        for (i, key) in self.keys.iter().enumerate() {
            out.extend_from_slice(&key.0.to_le_bytes());
            for v in &self.values[i * self.dimension..(i + 1) * self.dimension] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            kind: "FSAF",
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != FSAF_MAGIC {
            return Err(bad("missing FSAF header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != FSAF_VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let (count, dim) = (word(8), word(12));
        let record = 8 + 4 * dim;
        if bytes.len() != 16 + count * record {
            return Err(bad("payload size does not match header"));
        }
        let mut file = FeatureFile::new(dim);
        for r in 0..count {
            let base = 16 + r * record;
            let key = SegmentKey(u64::from_le_bytes(bytes[base..base + 8].try_into().unwrap()));
            let values: Vec<f32> = bytes[base + 8..base + record]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            file.insert(key, &values).map_err(|e| bad(&e.to_string()))?;
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn solid(w: u32, h: u32, c: [f32; 3]) -> Rgb32FImage {
        Rgb32FImage::from_pixel(w, h, Rgb(c))
    }

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn full_mask_without_border_is_plain_resize() {
        let img = Rgb32FImage::from_fn(8, 4, |x, y| Rgb([x as f32 / 8.0, y as f32 / 4.0, 0.5]));
        let mask = RunLength::from_pixels(0..32);
        let crop = crop_segment(&img, &mask, 0.0).unwrap();
        assert!(crop.mask.iter().all(|&m| m));
        assert_eq!(crop.window, BBox { x0: 0, y0: 0, x1: 7, y1: 3 });
        // Corner samples clamp to the corner source pixels.
        assert_eq!(crop.rgb(0, 0), [0.0, 0.0, 0.5]);
        assert_eq!(crop.rgb(CROP_SIZE - 1, CROP_SIZE - 1), [7.0 / 8.0, 3.0 / 4.0, 0.5]);
    }

    #[test]
    fn single_pixel_mask_fills_crop() {
        let img = solid(5, 5, [0.2, 0.4, 0.6]);
        let crop = crop_segment(&img, &RunLength::from_pixels([12]), 0.1).unwrap();
        assert_eq!(crop.window, BBox::point(2, 2));
        assert!(crop.mask.iter().all(|&m| m));
        assert!(crop.pixels.chunks(3).all(|c| c == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn border_expands_window() {
        let img = solid(300, 300, [1.0, 1.0, 1.0]);
        let pixels = (100..200).flat_map(|y| (100..200).map(move |x| y * 300 + x));
        let crop = crop_segment(&img, &RunLength::from_pixels(pixels), 0.1).unwrap();
        assert_eq!((crop.window.width(), crop.window.height()), (120, 120));
        assert_eq!(crop.window.x0, 90);
        let corner = crop_segment(&img, &RunLength::from_pixels(0..10), 0.5).unwrap();
        assert_eq!(corner.window, BBox { x0: 0, y0: 0, x1: 14, y1: 1 });
    }

    #[test]
    fn pixels_outside_mask_are_zero() {
        let img = solid(10, 10, [0.9, 0.8, 0.7]);
        let mask = RunLength::from_pixels([11, 12, 13, 22, 23, 33, 44, 45]);
        let crop = crop_segment(&img, &mask, 0.2).unwrap();
        for (i, &m) in crop.mask.iter().enumerate() {
            if !m {
                assert_eq!(&crop.pixels[i * 3..i * 3 + 3], &[0.0, 0.0, 0.0]);
            }
        }
        assert!(crop.mask.iter().any(|&m| m) && crop.mask.iter().any(|&m| !m));
    }

    #[test]
    fn empty_mask_rejected() {
        let img = solid(4, 4, [0.0; 3]);
        assert!(crop_segment(&img, &RunLength::default(), 0.1).is_err());
        assert!(crop_segment(&img, &RunLength::from_pixels([16]), 0.1).is_err());
    }

    #[test]
    fn uniform_segment_descriptor() {
        let img = solid(20, 20, [0.3, 0.6, 0.9]);
        let crop = crop_segment(&img, &RunLength::from_pixels(0..400), 0.0).unwrap();
        let d = builtin_descriptor(&crop);
        assert_eq!(d.len(), BUILTIN_DIM);
        let color = &d[..512];
        assert_eq!(color.iter().filter(|&&v| v > 0.0).count(), 1);
        assert!((color[(2 * 8 + 4) * 8 + 7] - 1.0).abs() < 1e-6);
        let orient = &d[512..];
        assert!(orient.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert!((norm(color) - 1.0).abs() < 1e-6 && (norm(orient) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn descriptor_blocks_are_unit_norm_on_textured_segment() {
        let img = Rgb32FImage::from_fn(30, 30, |x, y| {
            let v = ((x * 7 + y * 13) % 11) as f32 / 10.0;
            Rgb([v, 1.0 - v, (x as f32) / 30.0])
        });
        let mask = RunLength::from_pixels((0..900).filter(|p| (p % 30) < 20));
        let crop = crop_segment(&img, &mask, 0.1).unwrap();
        let d = builtin_descriptor(&crop);
        assert!((norm(&d[..512]) - 1.0).abs() < 1e-6);
        assert!((norm(&d[512..]) - 1.0).abs() < 1e-6);
        assert_eq!(d, builtin_descriptor(&crop.clone()));
    }

    #[test]
    fn identical_segments_identical_vectors() {
        let img = Rgb32FImage::from_fn(10, 10, |x, y| Rgb([(x % 5) as f32 / 5.0, (y % 5) as f32 / 5.0, 0.1]));
        let a = crop_segment(&img, &RunLength::from_pixels([0, 1, 2, 10, 11, 12]), 0.1).unwrap();
        let b = crop_segment(&img, &RunLength::from_pixels([5, 6, 7, 15, 16, 17]), 0.1).unwrap();
        assert_eq!(builtin_descriptor(&a), builtin_descriptor(&b));
    }

    #[test]
    fn file_provider_passes_values_through() {
        let mut file = FeatureFile::new(2048);
        let values: Vec<f32> = (0..2048).map(|i| i as f32 * 0.5 - 3.0).collect();
        file.insert(SegmentKey(42), &values).unwrap();
        let provider = FeatureProvider::File(file);
        assert_eq!(provider.dimension(), 2048);
        let v = provider
            .describe(SegmentKey(42), || unreachable!("file provider never crops"))
            .unwrap();
        assert_eq!(v.values, values);
        let missing = provider.describe(SegmentKey(7), || unreachable!());
        assert!(matches!(missing, Err(Error::MissingFeature(SegmentKey(7)))));
    }

    #[test]
    fn feature_file_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fsaf");
        let mut file = FeatureFile::new(3);
        file.insert(SegmentKey(1), &[1.0, 2.0, 3.0]).unwrap();
        file.insert(SegmentKey(u64::MAX), &[-1.0, 0.0, 0.5]).unwrap();
        file.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FSAF");
        assert_eq!(bytes.len(), 16 + 2 * (8 + 12));
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(FeatureFile::load(&path).unwrap(), file);
        assert!(file.insert(SegmentKey(3), &[1.0]).is_err());
        assert!(FeatureFile::from_bytes(&bytes[..30], &path).is_err());
    }
}
