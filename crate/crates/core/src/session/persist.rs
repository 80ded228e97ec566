//! Session directory: `session.json` manifest plus binary sidecars.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureFile;
use crate::graph::{CutConfig, Partition};
use crate::metric::EmbeddingHead;
use crate::projector::{read_layout_json, write_layout_json};
use crate::rle::{Run, RunLength, SegmentKey};

use super::{Event, ImageState, PaletteEntry, ProviderSpec, Segment, Session, SessionConfig, SESSION_VERSION};

pub const MANIFEST_FILE: &str = "session.json";
pub const FEATURES_FILE: &str = "features.fsaf";
pub const HEAD_FILE: &str = "head.fsmh";
pub const LAYOUT_FILE: &str = "layout.json";
pub const SEGMENTS_FILE: &str = "segments.fsrl";

const FSRL_MAGIC: &[u8; 4] = b"FSRL";
const FSRL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    id: String,
    image: PathBuf,
    gradient: PathBuf,
    width: usize,
    height: usize,
    cut: CutConfig,
    segments: Vec<SegmentKey>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    images: Vec<ImageRecord>,
    palette: Vec<PaletteEntry>,
    provider: ProviderSpec,
    config: SessionConfig,
    cursor: usize,
    rounds: u64,
    labels: BTreeMap<SegmentKey, u32>,
    events: Vec<Event>,
}

/// Encodes segment run-lengths as an `FSRL` file.
pub fn encode_fsrl<'a>(records: impl IntoIterator<Item = (SegmentKey, &'a RunLength)>) -> Vec<u8> {
    let records: Vec<_> = records.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(FSRL_MAGIC);
    out.extend_from_slice(&FSRL_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (key, runs) in records {
        out.extend_from_slice(&key.0.to_le_bytes());
        out.extend_from_slice(&(runs.runs().len() as u32).to_le_bytes());
        for r in runs.runs() {
            out.extend_from_slice(&r.start.to_le_bytes());
            out.extend_from_slice(&r.length.to_le_bytes());
        }
    }
    out
}

pub fn decode_fsrl(bytes: &[u8], path: &Path) -> Result<Vec<(SegmentKey, RunLength)>> {
    let bad = |reason: &str| Error::Format {
        kind: "FSRL",
        path: path.to_path_buf(),
        reason: reason.to_owned(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != FSRL_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    if u32_at(take(4)?) != FSRL_VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u32_at(take(4)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let key = SegmentKey(u64::from_le_bytes(take(8)?.try_into().unwrap()));
        let n = u32_at(take(4)?) as usize;
        let mut runs = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let start = u32_at(take(4)?);
            let length = u32_at(take(4)?);
            runs.push(Run { start, length });
        }
        let rl = RunLength::from_runs(runs).ok_or_else(|| bad("invalid runs"))?;
        out.push((key, rl));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

impl Session {
    /// Writes the session into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            version: SESSION_VERSION,
            images: self
                .images
                .iter()
                .map(|i| ImageRecord {
                    id: i.id.clone(),
                    image: i.image_path.clone(),
                    gradient: i.gradient_path.clone(),
                    width: i.width(),
                    height: i.height(),
                    cut: i.cut,
                    segments: i.segments.clone(),
                })
                .collect(),
            palette: self.palette.clone(),
            provider: self.provider_spec.clone(),
            config: self.config.clone(),
            cursor: self.cursor,
            rounds: self.rounds,
            labels: self
                .segments
                .values()
                .filter_map(|s| s.label.map(|l| (s.key, l)))
                .collect(),
            events: self.events.clone(),
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;

        self.feature_file()?.save(&dir.join(FEATURES_FILE))?;
        self.head.save(&dir.join(HEAD_FILE))?;
        write_layout_json(&dir.join(LAYOUT_FILE), &self.layout_points())?;
        let fsrl = encode_fsrl(self.segments().map(|s| (s.key, &s.pixels)));
        fs::write(dir.join(SEGMENTS_FILE), fsrl)?;
        Ok(())
    }

    /// Restores a session written by [`Session::save`]. Image and gradient
    /// files are re-read from their recorded paths.
    pub fn load(dir: &Path) -> Result<Session> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        let bad = |path: &Path, reason: String| Error::Format {
            kind: "session",
            path: path.to_path_buf(),
            reason,
        };
        if manifest.version != SESSION_VERSION {
            return Err(bad(&manifest_path, format!("unsupported version {}", manifest.version)));
        }
        let provider = manifest.provider.open()?;
        let features = FeatureFile::load(&dir.join(FEATURES_FILE))?;
        let head = EmbeddingHead::load(&dir.join(HEAD_FILE))?;
        if head.input_dim() != provider.dimension() || features.dimension() != provider.dimension() {
            return Err(bad(&manifest_path, "feature dimension disagrees with provider".into()));
        }
        let segments_path = dir.join(SEGMENTS_FILE);
        let mut runs: HashMap<SegmentKey, RunLength> =
            decode_fsrl(&fs::read(&segments_path)?, &segments_path)?.into_iter().collect();

        let mut images = Vec::new();
        let mut registry = BTreeMap::new();
        for rec in manifest.images {
            let mut state = ImageState::open(rec.id.clone(), &rec.image, &rec.gradient, rec.cut)?;
            if (state.width(), state.height()) != (rec.width, rec.height) {
                return Err(bad(&rec.image, format!("expected {}x{}", rec.width, rec.height)));
            }
            let n = rec.width * rec.height;
            let mut map = vec![u32::MAX; n];
            let mut pieces = Vec::new();
            for (i, key) in rec.segments.iter().enumerate() {
                let rl = runs
                    .remove(key)
                    .ok_or_else(|| bad(&segments_path, format!("segment {key} missing")))?;
                for p in rl.pixels() {
                    if p >= n || map[p] != u32::MAX {
                        return Err(bad(&segments_path, format!("segment {key} overlaps or leaves image")));
                    }
                    map[p] = i as u32;
                }
                pieces.push((*key, rl));
            }
            if map.contains(&u32::MAX) {
                return Err(bad(&segments_path, format!("segments do not cover image {}", rec.id)));
            }
            let partition = Partition::from_region_map(rec.width, rec.height, &map)?;
            pieces.sort_by_key(|(_, rl)| rl.first());
            for ((key, rl), info) in pieces.into_iter().zip(partition.regions()) {
                let values = features.get(key).ok_or(Error::MissingFeature(key))?.to_vec();
                registry.insert(
                    key,
                    Segment {
                        key,
                        image_id: rec.id.clone(),
                        pixels: rl,
                        bbox: info.bbox,
                        label: manifest.labels.get(&key).copied(),
                        features: values,
                        coords: None,
                    },
                );
                state.segments.push(key);
            }
            state.partition = partition;
            images.push(state);
        }
        let layout_path = dir.join(LAYOUT_FILE);
        let mut shown = Vec::new();
        for p in read_layout_json(&layout_path)? {
            let seg = registry
                .get_mut(&p.key)
                .ok_or_else(|| bad(&layout_path, format!("unknown segment {}", p.key)))?;
            seg.coords = Some([p.x, p.y]);
            shown.push(p.key);
        }
        Ok(Session {
            images,
            segments: registry,
            palette: manifest.palette,
            provider_spec: manifest.provider,
            provider,
            head,
            shown,
            cursor: manifest.cursor,
            events: manifest.events,
            config: manifest.config,
            rounds: manifest.rounds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fsrl_round_trip_and_rejects_garbage() {
        let a = RunLength::from_pixels([0, 1, 2, 7]);
        let b = RunLength::from_pixels([3]);
        let bytes = encode_fsrl([(SegmentKey(1), &a), (SegmentKey(u64::MAX), &b)]);
        let back = decode_fsrl(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, vec![(SegmentKey(1), a), (SegmentKey(u64::MAX), b)]);
        assert!(decode_fsrl(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode_fsrl(b"NOPE\x01\0\0\0\0\0\0\0", Path::new("x")).is_err());
    }
}
