use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};

const FSGR_MAGIC: &[u8; 4] = b"FSGR";
const FSGR_VERSION: u32 = 1;

/// Single-channel edge-strength map with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl GradientImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: values.len(),
            });
        }
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(invalid(format!("gradient value {v} outside [0, 1]")));
        }
        Ok(GradientImage {
            width,
            height,
            values,
        })
    }

    /// Min-max normalises arbitrary finite values into `[0, 1]`. A constant
    /// input maps to all zeros.
    pub fn normalized(width: usize, height: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(invalid("gradient contains non-finite values"));
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let values = if span > 0.0 {
            raw.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self::new(width, height, values)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        GradientImage {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, pixel: usize) -> f64 {
        self.values[pixel]
    }

    /// Loads an 8/16-bit grayscale PNG or an `FSGR` raw float file, detected
    /// by content. The result is min-max normalised.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(FSGR_MAGIC) {
            return Self::decode_fsgr(&bytes, path);
        }
        let img = image::load_from_memory(&bytes)?;
        let luma = img.to_luma16();
        let (w, h) = luma.dimensions();
        let raw = luma.into_raw().into_iter().map(f64::from).collect();
        Self::normalized(w as usize, h as usize, raw)
    }

    fn decode_fsgr(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            kind: "FSGR",
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 {
            return Err(bad("truncated header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != FSGR_VERSION {
            return Err(bad("unsupported version"));
        }
        let (w, h) = (word(8) as usize, word(12) as usize);
        let body = &bytes[16..];
        if body.len() != w * h * 4 {
            return Err(bad("payload size does not match dimensions"));
        }
        let raw = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::normalized(w, h, raw)
    }

    /// Writes the values as an `FSGR` raw float file.
    pub fn save_fsgr(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 4);
        out.extend_from_slice(FSGR_MAGIC);
        out.extend_from_slice(&FSGR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }
}
