//! PNG previews: image with segment contours and label tints.

use std::io::Cursor;

use crate::error::{invalid, Error, Result};
use crate::rle::SegmentKey;

use super::Session;

const CONTOUR: [u8; 3] = [255, 255, 255];
const HIGHLIGHT: [u8; 3] = [255, 220, 0];
const TINT: f32 = 0.5;

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(Cursor::new(&mut out), width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    Ok(out)
}

impl Session {
    /// Renders an image with region contours; labeled segments are tinted by
    /// their palette colour and `highlight` gets a distinct contour.
    pub fn overlay_png(&self, image_id: &str, highlight: Option<SegmentKey>) -> Result<Vec<u8>> {
        let idx = self.image_index(image_id)?;
        let img = &self.images[idx];
        if let Some(k) = highlight {
            match self.segments.get(&k) {
                Some(s) if s.image_id == image_id => {}
                Some(_) => return Err(invalid(format!("segment {k} is not in image {image_id}"))),
                None => return Err(Error::UnknownSegment(k)),
            }
        }
        let (w, h) = (img.width(), img.height());
        let regions = img.partition.labels();
        let tint: Vec<Option<[u8; 3]>> = img
            .segments
            .iter()
            .map(|k| {
                self.segments[k]
                    .label
                    .and_then(|l| self.palette.iter().find(|p| p.id == l))
                    .map(|p| p.color)
            })
            .collect();
        let hl_region = highlight.and_then(|k| img.segments.iter().position(|s| *s == k));
        let mut data = Vec::with_capacity(w * h * 3);
        for p in 0..w * h {
            let (x, y) = (p % w, p / w);
            let r = regions[p];
            let boundary = crate::graph::neighbors4(w, h, p).any(|q| regions[q] != r);
            let px = img.rgb.get_pixel(x as u32, y as u32).0;
            let mut rgb = px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round());
            if let Some(c) = tint[r as usize] {
                for (v, c) in rgb.iter_mut().zip(c) {
                    *v = (1.0 - TINT) * *v + TINT * c as f32;
                }
            }
            let out = if boundary && hl_region == Some(r as usize) {
                HIGHLIGHT
            } else if boundary {
                CONTOUR
            } else {
                rgb.map(|v| v.round() as u8)
            };
            data.extend_from_slice(&out);
        }
        encode(w, h, png::ColorType::Rgb, &data)
    }

    /// RGBA crop of one segment's bounding box, pixels outside the segment
    /// transparent, nearest-neighbour scaled so the longer side is at most `max_side`.
    pub fn thumbnail_png(&self, key: SegmentKey, max_side: usize) -> Result<Vec<u8>> {
        if max_side == 0 {
            return Err(invalid("thumbnail size must be positive"));
        }
        let seg = self.segments.get(&key).ok_or(Error::UnknownSegment(key))?;
        let img = &self.images[self.image_index(&seg.image_id)?];
        let w = img.width();
        let b = seg.bbox;
        let (bw, bh) = (b.x1 - b.x0 + 1, b.y1 - b.y0 + 1);
        let scale = (max_side as f64 / bw.max(bh) as f64).min(1.0);
        let tw = ((bw as f64 * scale).round() as usize).max(1);
        let th = ((bh as f64 * scale).round() as usize).max(1);
        let mut inside = vec![false; bw * bh];
        for p in seg.pixels.pixels() {
            inside[(p / w - b.y0) * bw + (p % w - b.x0)] = true;
        }
        let mut data = Vec::with_capacity(tw * th * 4);
        for ty in 0..th {
            let sy = (ty * bh / th).min(bh - 1);
            for tx in 0..tw {
                let sx = (tx * bw / tw).min(bw - 1);
                let px = img.rgb.get_pixel((b.x0 + sx) as u32, (b.y0 + sy) as u32).0;
                let rgb = px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
                let alpha = if inside[sy * bw + sx] { 255 } else { 0 };
                data.extend_from_slice(&[rgb[0], rgb[1], rgb[2], alpha]);
            }
        }
        encode(tw, th, png::ColorType::Rgba, &data)
    }
}
