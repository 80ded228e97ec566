//! Annotation state: images, partitions, segments, labels, embedding head
//! and canvas layout.

mod eval;
mod overlay;
mod persist;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use image::Rgb32FImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correction::{split_segment, ClickSet};
use crate::error::{invalid, Error, Result};
use crate::features::{crop_segment, FeatureFile, FeatureProvider, DEFAULT_BORDER_FRACTION};
use crate::graph::{build_hierarchy, horizontal_cut, BBox, CutConfig, GradientImage, Hierarchy, Partition};
use crate::metric::{train_round, EmbeddingHead, TrainConfig, DEFAULT_EMBED_DIM};
use crate::projector::{fit_curve, fuzzy_knn, layout, local_reproject, transform_new, Layout2D, LayoutPoint, ProjectionConfig};
use crate::rle::{RunLength, SegmentKey};

pub use eval::{
    evaluate, evaluate_image, gt_constrained_partition, mask_from_region_labels, oracle_majority_labels, EvalMode,
    ImageScore, LabelMask, Metrics, VOID_LABEL,
};

pub const SESSION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: u32,
    pub name: String,
    pub color: [u8; 3],
}

/// Where features come from; persisted in the session manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderSpec {
    Builtin,
    File(PathBuf),
}

impl ProviderSpec {
    fn open(&self) -> Result<FeatureProvider> {
        Ok(match self {
            ProviderSpec::Builtin => FeatureProvider::Builtin,
            ProviderSpec::File(p) => FeatureProvider::File(FeatureFile::load(p)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub projection: ProjectionConfig,
    pub local_projection: ProjectionConfig,
    pub train: TrainConfig,
    pub border_fraction: f64,
    pub embed_dim: usize,
    /// Seeds the initial embedding head.
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            projection: ProjectionConfig::global(),
            local_projection: ProjectionConfig::local(),
            train: TrainConfig::default(),
            border_fraction: DEFAULT_BORDER_FRACTION,
            embed_dim: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub key: SegmentKey,
    pub image_id: String,
    pub pixels: RunLength,
    pub bbox: BBox,
    pub label: Option<u32>,
    pub features: Vec<f32>,
    pub coords: Option<[f64; 2]>,
}

impl Segment {
    pub fn pixel_count(&self) -> usize {
        self.pixels.pixel_count()
    }
}

/// Axis-aligned canvas rectangle, inclusive on all sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanvasRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CanvasRect {
    /// Normalises so that `x0 <= x1` and `y0 <= y1`.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        CanvasRect {
            x0: x0.min(x1),
            y0: y0.min(y1),
            x1: x0.max(x1),
            y1: y0.max(y1),
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let r = Self::new(self.x0, self.y0, self.x1, self.y1);
        p[0] >= r.x0 && p[0] <= r.x1 && p[1] >= r.y0 && p[1] <= r.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub time: u64,
    pub action: String,
    pub detail: serde_json::Value,
}

fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChangeReport {
    pub kept: Vec<SegmentKey>,
    pub added: Vec<SegmentKey>,
    pub removed: Vec<SegmentKey>,
}

impl ChangeReport {
    pub fn is_unchanged(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub cut: CutConfig,
    pub shown: bool,
    pub segments: usize,
}

struct ImageState {
    id: String,
    image_path: PathBuf,
    gradient_path: PathBuf,
    rgb: Rgb32FImage,
    gradient: GradientImage,
    hierarchy: Option<Hierarchy>,
    cut: CutConfig,
    partition: Partition,
    /// Segment keys in region-id order.
    segments: Vec<SegmentKey>,
}

impl ImageState {
    fn open(id: String, image_path: &Path, gradient_path: &Path, cut: CutConfig) -> Result<Self> {
        let rgb = image::open(image_path)?.to_rgb32f();
        let gradient = GradientImage::load(gradient_path)?;
        if (rgb.width() as usize, rgb.height() as usize) != (gradient.width(), gradient.height()) {
            return Err(invalid(format!(
                "image {} is {}x{} but its gradient is {}x{}",
                image_path.display(),
                rgb.width(),
                rgb.height(),
                gradient.width(),
                gradient.height()
            )));
        }
        let (w, h) = (gradient.width(), gradient.height());
        Ok(ImageState {
            id,
            image_path: image_path.to_path_buf(),
            gradient_path: gradient_path.to_path_buf(),
            rgb,
            gradient,
            hierarchy: None,
            cut,
            partition: Partition::from_region_map(w, h, &vec![0; w * h])?,
            segments: Vec::new(),
        })
    }

    fn width(&self) -> usize {
        self.gradient.width()
    }

    fn height(&self) -> usize {
        self.gradient.height()
    }

    fn cut_partition(&mut self, cut: CutConfig) -> Result<Partition> {
        cut.validate()?;
        if self.gradient.len() < 2 {
            return Partition::from_region_map(self.width(), self.height(), &vec![0; self.gradient.len()]);
        }
        if self.hierarchy.as_ref().map(|h| h.criterion()) != Some(cut.criterion) {
            self.hierarchy = Some(build_hierarchy(&self.gradient, cut.criterion)?);
        }
        horizontal_cut(self.hierarchy.as_ref().unwrap(), cut.threshold)
    }
}

/// Data needed for one training round, detached from the session.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<Option<u32>>,
    pub head: EmbeddingHead,
    pub config: TrainConfig,
}

impl TrainJob {
    pub fn run(&self, on_epoch: impl FnMut(usize, f64)) -> Result<(EmbeddingHead, Vec<f64>)> {
        train_round(&self.features, &self.labels, &self.head, &self.config, on_epoch)
    }
}

pub struct Session {
    images: Vec<ImageState>,
    segments: BTreeMap<SegmentKey, Segment>,
    palette: Vec<PaletteEntry>,
    provider_spec: ProviderSpec,
    provider: FeatureProvider,
    head: EmbeddingHead,
    /// Shown segments in canvas insertion order; each has coordinates.
    shown: Vec<SegmentKey>,
    /// Number of images (in ingestion order) whose segments are shown.
    cursor: usize,
    events: Vec<Event>,
    config: SessionConfig,
    rounds: u64,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("images", &self.images.len())
            .field("segments", &self.segments.len())
            .field("shown", &self.shown.len())
            .field("cursor", &self.cursor)
            .finish()
    }
}

fn image_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

impl Session {
    /// Loads images and gradients, cuts each hierarchy and describes every segment.
    pub fn ingest(
        images: &[PathBuf],
        gradients: &[PathBuf],
        cut: CutConfig,
        provider: ProviderSpec,
        config: SessionConfig,
    ) -> Result<Session> {
        if images.len() != gradients.len() {
            return Err(invalid(format!("{} images but {} gradients", images.len(), gradients.len())));
        }
        cut.validate()?;
        config.projection.validate()?;
        config.local_projection.validate()?;
        config.train.validate()?;
        let opened = provider.open()?;
        let d_in = opened.dimension();
        let mut session = Session {
            images: Vec::new(),
            segments: BTreeMap::new(),
            palette: Vec::new(),
            provider_spec: provider,
            provider: opened,
            head: EmbeddingHead::random(d_in, config.embed_dim, config.seed),
            shown: Vec::new(),
            cursor: 0,
            events: Vec::new(),
            config,
            rounds: 0,
        };
        let mut seen = HashSet::new();
        for (img, grad) in images.iter().zip(gradients) {
            let id = image_id_for(img);
            if !seen.insert(id.clone()) {
                return Err(invalid(format!("duplicate image id '{id}'")));
            }
            let mut state = ImageState::open(id, img, grad, cut)?;
            let partition = state.cut_partition(cut)?;
            let built = session.build_segments(&state, &partition)?;
            state.segments = built.iter().map(|s| s.key).collect();
            state.partition = partition;
            log::info!("ingested {} with {} segments", state.id, built.len());
            for s in built {
                session.segments.insert(s.key, s);
            }
            session.images.push(state);
        }
        session.log(
            "ingest",
            serde_json::json!({
                "images": session.images.len(),
                "segments": session.segments.len(),
                "criterion": cut.criterion.as_str(),
                "threshold": cut.threshold,
            }),
        );
        Ok(session)
    }

    fn log(&mut self, action: &str, detail: serde_json::Value) {
        self.events.push(Event {
            seq: self.events.len() as u64,
            time: timestamp(),
            action: action.to_owned(),
            detail,
        });
    }

    fn describe(&self, image: &ImageState, key: SegmentKey, pixels: &RunLength) -> Result<Vec<f32>> {
        let v = self
            .provider
            .describe(key, || crop_segment(&image.rgb, pixels, self.config.border_fraction))?;
        Ok(v.values)
    }

    /// Segments for every region of `partition`, described in parallel.
    fn build_segments(&self, image: &ImageState, partition: &Partition) -> Result<Vec<Segment>> {
        let regions = partition.region_pixels();
        regions
            .into_par_iter()
            .zip(partition.regions().par_iter())
            .map(|(pixels, info)| self.make_segment(image, RunLength::from_pixels(pixels), info.bbox))
            .collect()
    }

    fn make_segment(&self, image: &ImageState, pixels: RunLength, bbox: BBox) -> Result<Segment> {
        let key = SegmentKey::compute(&image.id, &pixels);
        let features = match self.segments.get(&key) {
            Some(existing) => existing.features.clone(),
            None => self.describe(image, key, &pixels)?,
        };
        Ok(Segment {
            key,
            image_id: image.id.clone(),
            pixels,
            bbox,
            label: None,
            features,
            coords: None,
        })
    }

    fn image_index(&self, id: &str) -> Result<usize> {
        self.images
            .iter()
            .position(|i| i.id == id)
            .ok_or_else(|| Error::UnknownImage(id.to_owned()))
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn provider(&self) -> &ProviderSpec {
        &self.provider_spec
    }

    pub fn feature_dimension(&self) -> usize {
        self.provider.dimension()
    }

    pub fn images(&self) -> Vec<ImageInfo> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, s)| ImageInfo {
                id: s.id.clone(),
                width: s.width(),
                height: s.height(),
                cut: s.cut,
                shown: i < self.cursor,
                segments: s.segments.len(),
            })
            .collect()
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }

    /// Re-describes every segment with `spec`. A change of feature dimension
    /// resets the head; shown segments are laid out again.
    pub fn set_provider(&mut self, spec: ProviderSpec) -> Result<()> {
        let opened = spec.open()?;
        let jobs: Vec<(usize, SegmentKey)> = self
            .images
            .iter()
            .enumerate()
            .flat_map(|(i, img)| img.segments.iter().map(move |k| (i, *k)))
            .collect();
        let border = self.config.border_fraction;
        let described = jobs
            .par_iter()
            .map(|&(i, key)| {
                let pixels = &self.segments[&key].pixels;
                let v = opened.describe(key, || crop_segment(&self.images[i].rgb, pixels, border))?;
                Ok((key, v.values))
            })
            .collect::<Result<Vec<_>>>()?;
        if opened.dimension() != self.head.input_dim() {
            self.head = EmbeddingHead::random(opened.dimension(), self.config.embed_dim, self.config.seed);
            self.rounds = 0;
        }
        for (key, values) in described {
            self.segments.get_mut(&key).unwrap().features = values;
        }
        self.provider = opened;
        self.provider_spec = spec;
        let shown = self.shown.clone();
        self.full_layout(&shown)?;
        self.log("features", serde_json::json!({ "dimension": self.provider.dimension() }));
        Ok(())
    }

    /// Replaces the global and local projection settings for later layouts.
    pub fn set_projection_config(&mut self, global: ProjectionConfig, local: ProjectionConfig) -> Result<()> {
        global.validate()?;
        local.validate()?;
        self.config.projection = global;
        self.config.local_projection = local;
        Ok(())
    }

    pub fn set_train_config(&mut self, cfg: TrainConfig) -> Result<()> {
        cfg.validate()?;
        self.config.train = cfg;
        Ok(())
    }

    /// Raw features of all segments, in registry order.
    pub fn feature_file(&self) -> Result<FeatureFile> {
        let mut features = FeatureFile::new(self.provider.dimension());
        for s in self.segments() {
            features.insert(s.key, &s.features)?;
        }
        Ok(features)
    }

    pub fn image_rgb(&self, id: &str) -> Result<&Rgb32FImage> {
        Ok(&self.images[self.image_index(id)?].rgb)
    }

    pub fn gradient(&self, id: &str) -> Result<&GradientImage> {
        Ok(&self.images[self.image_index(id)?].gradient)
    }

    pub fn partition(&self, id: &str) -> Result<&Partition> {
        Ok(&self.images[self.image_index(id)?].partition)
    }

    pub fn cut(&self, id: &str) -> Result<CutConfig> {
        Ok(self.images[self.image_index(id)?].cut)
    }

    pub fn segment(&self, key: SegmentKey) -> Option<&Segment> {
        self.segments.get(&key)
    }

    /// All segments, by image then region order.
    pub fn segments(&self) -> impl Iterator<Item = &Segment> + '_ {
        self.images
            .iter()
            .flat_map(move |i| i.segments.iter().map(move |k| &self.segments[k]))
    }

    pub fn segments_of(&self, id: &str) -> Result<Vec<&Segment>> {
        let img = &self.images[self.image_index(id)?];
        Ok(img.segments.iter().map(|k| &self.segments[k]).collect())
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn shown_keys(&self) -> &[SegmentKey] {
        &self.shown
    }

    pub fn batch_cursor(&self) -> usize {
        self.cursor
    }

    pub fn head(&self) -> &EmbeddingHead {
        &self.head
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn palette(&self) -> &[PaletteEntry] {
        &self.palette
    }

    /// Adds a palette entry with the next free id, or returns the id of an entry with the same name.
    pub fn add_label(&mut self, name: &str, color: [u8; 3]) -> Result<u32> {
        if let Some(p) = self.palette.iter().find(|p| p.name == name) {
            return Ok(p.id);
        }
        let id = self.palette.iter().map(|p| p.id).max().unwrap_or(0) + 1;
        self.insert_label(id, name, color)?;
        Ok(id)
    }

    /// Adds a palette entry with an explicit id; ids must lie in `1..255`.
    pub fn insert_label(&mut self, id: u32, name: &str, color: [u8; 3]) -> Result<()> {
        if id == 0 || id >= VOID_LABEL {
            return Err(invalid(format!("label id {id} outside 1..{VOID_LABEL}")));
        }
        if self.palette.iter().any(|p| p.id == id) {
            return Err(invalid(format!("label id {id} already in palette")));
        }
        self.palette.push(PaletteEntry {
            id,
            name: name.to_owned(),
            color,
        });
        self.palette.sort_by_key(|p| p.id);
        self.log("add-label", serde_json::json!({ "id": id, "name": name }));
        Ok(())
    }

    fn check_label(&self, label: u32) -> Result<()> {
        if self.palette.iter().any(|p| p.id == label) {
            Ok(())
        } else {
            Err(Error::UnknownLabel(label))
        }
    }

    /// Sets or clears one segment's label.
    pub fn set_label(&mut self, key: SegmentKey, label: Option<u32>) -> Result<()> {
        if let Some(l) = label {
            self.check_label(l)?;
        }
        let seg = self.segments.get_mut(&key).ok_or(Error::UnknownSegment(key))?;
        seg.label = label;
        self.log("set-label", serde_json::json!({ "key": key.to_string(), "label": label }));
        Ok(())
    }

    /// Embedded features of the given segments through the current head.
    pub fn embedded(&self, keys: &[SegmentKey]) -> Result<Vec<Vec<f64>>> {
        keys.iter()
            .map(|k| {
                let seg = self.segments.get(k).ok_or(Error::UnknownSegment(*k))?;
                self.head.embed(&seg.features)
            })
            .collect()
    }

    fn labels_of(&self, keys: &[SegmentKey]) -> Vec<Option<u32>> {
        keys.iter().map(|k| self.segments[k].label).collect()
    }

    /// Lays out `keys` from scratch, with label supervision.
    fn full_layout(&mut self, keys: &[SegmentKey]) -> Result<()> {
        let cfg = self.config.projection;
        let coords = match keys.len() {
            0 => Vec::new(),
            1 => vec![[0.0, 0.0]],
            n => {
                let points = self.embedded(keys)?;
                let labels = self.labels_of(keys);
                let k = cfg.k.min(n - 1);
                let graph = fuzzy_knn(&points, k, Some(&labels), cfg.supervision)?;
                layout(&graph, &cfg)?.coords
            }
        };
        for (k, c) in keys.iter().zip(coords) {
            self.segments.get_mut(k).unwrap().coords = Some(c);
        }
        Ok(())
    }

    /// Appends `keys` to the canvas without moving shown segments.
    fn insert_shown(&mut self, keys: &[SegmentKey]) -> Result<()> {
        if keys.is_empty() {
            return Ok(());
        }
        if self.shown.is_empty() {
            self.full_layout(keys)?;
        } else {
            let cfg = self.config.projection;
            let old = self.embedded(&self.shown)?;
            let old_layout = Layout2D {
                coords: self.shown.iter().map(|k| self.segments[k].coords.unwrap()).collect(),
                a: 0.0,
                b: 0.0,
            };
            let (a, b) = fit_curve(cfg.min_dist);
            let old_layout = Layout2D { a, b, ..old_layout };
            let new = self.embedded(keys)?;
            let placed = transform_new(&new, &old, &old_layout, &cfg)?;
            for (k, c) in keys.iter().zip(placed) {
                self.segments.get_mut(k).unwrap().coords = Some(c);
            }
        }
        self.shown.extend_from_slice(keys);
        Ok(())
    }

    fn remove_shown(&mut self, removed: &HashSet<SegmentKey>) {
        self.shown.retain(|k| !removed.contains(k));
    }

    /// Reveals the segments of up to `n` further images, in ingestion order.
    pub fn next_batch(&mut self, n: usize) -> Result<Vec<SegmentKey>> {
        let end = (self.cursor + n).min(self.images.len());
        let keys: Vec<SegmentKey> = self.images[self.cursor..end]
            .iter()
            .flat_map(|i| i.segments.iter().copied())
            .collect();
        self.insert_shown(&keys)?;
        let images = end - self.cursor;
        self.cursor = end;
        self.log("batch", serde_json::json!({ "images": images, "segments": keys.len() }));
        Ok(keys)
    }

    /// Labels every shown segment whose coordinates fall inside `rect`.
    pub fn assign_label_box(&mut self, rect: CanvasRect, label: u32) -> Result<usize> {
        self.check_label(label)?;
        let hits: Vec<SegmentKey> = self
            .shown
            .iter()
            .copied()
            .filter(|k| self.segments[k].coords.is_some_and(|c| rect.contains(c)))
            .collect();
        for k in &hits {
            self.segments.get_mut(k).unwrap().label = Some(label);
        }
        self.log(
            "label-box",
            serde_json::json!({ "rect": [rect.x0, rect.y0, rect.x1, rect.y1], "label": label, "count": hits.len() }),
        );
        Ok(hits.len())
    }

    /// Installs a new partition for one image, keeping segments whose pixel sets survive.
    fn replace_partition(&mut self, idx: usize, partition: Partition) -> Result<ChangeReport> {
        let image = &self.images[idx];
        let regions = partition.region_pixels();
        let fresh: Vec<Segment> = regions
            .into_par_iter()
            .zip(partition.regions().par_iter())
            .map(|(pixels, info)| {
                let runs = RunLength::from_pixels(pixels);
                let key = SegmentKey::compute(&image.id, &runs);
                match self.segments.get(&key) {
                    Some(existing) => Ok(existing.clone()),
                    None => self.make_segment(image, runs, info.bbox),
                }
            })
            .collect::<Result<_>>()?;
        let old: HashSet<SegmentKey> = image.segments.iter().copied().collect();
        let new: HashSet<SegmentKey> = fresh.iter().map(|s| s.key).collect();
        let report = ChangeReport {
            kept: fresh.iter().filter(|s| old.contains(&s.key)).map(|s| s.key).collect(),
            added: fresh.iter().filter(|s| !old.contains(&s.key)).map(|s| s.key).collect(),
            removed: image.segments.iter().filter(|k| !new.contains(k)).copied().collect(),
        };
        let shown = idx < self.cursor;
        let removed: HashSet<SegmentKey> = report.removed.iter().copied().collect();
        for k in &removed {
            self.segments.remove(k);
        }
        if shown {
            self.remove_shown(&removed);
        }
        let image = &mut self.images[idx];
        image.segments = fresh.iter().map(|s| s.key).collect();
        image.partition = partition;
        for s in fresh {
            self.segments.entry(s.key).or_insert(s);
        }
        if shown {
            self.insert_shown(&report.added)?;
        }
        Ok(report)
    }

    /// Re-cuts one image's hierarchy; unchanged segments keep label, features and coordinates.
    pub fn recut(&mut self, image_id: &str, cut: CutConfig) -> Result<ChangeReport> {
        let idx = self.image_index(image_id)?;
        let partition = self.images[idx].cut_partition(cut)?;
        let report = self.replace_partition(idx, partition)?;
        self.images[idx].cut = cut;
        self.log(
            "recut",
            serde_json::json!({
                "image": image_id,
                "criterion": cut.criterion.as_str(),
                "threshold": cut.threshold,
                "kept": report.kept.len(),
                "added": report.added.len(),
                "removed": report.removed.len(),
            }),
        );
        Ok(report)
    }

    /// Replaces a segment by the positive and negative parts of a seeded split.
    /// Both click sets must be non-empty; the children are unlabeled.
    pub fn apply_split(&mut self, key: SegmentKey, clicks: &ClickSet) -> Result<(SegmentKey, SegmentKey)> {
        if clicks.positive.is_empty() || clicks.negative.is_empty() {
            return Err(invalid("a split needs both positive and negative clicks"));
        }
        let seg = self.segments.get(&key).ok_or(Error::UnknownSegment(key))?;
        let idx = self.image_index(&seg.image_id)?;
        let pixels: Vec<usize> = seg.pixels.pixels().collect();
        let split = split_segment(&self.images[idx].gradient, &pixels, clicks)?;
        let (pos, neg) = (split.positive_pixels(), split.negative_pixels());
        let image = &self.images[idx];
        let (w, h) = (image.width(), image.height());
        let mut map: Vec<u32> = image.partition.labels().to_vec();
        let fresh = image.partition.region_count() as u32;
        for &p in &neg {
            map[p] = fresh;
        }
        let partition = Partition::from_region_map(w, h, &map)?;
        let report = self.replace_partition(idx, partition)?;
        let pos_key = SegmentKey::compute(&self.images[idx].id, &RunLength::from_pixels(pos));
        let neg_key = SegmentKey::compute(&self.images[idx].id, &RunLength::from_pixels(neg));
        debug_assert!(report.removed == vec![key]);
        self.log(
            "split",
            serde_json::json!({
                "key": key.to_string(),
                "positive": pos_key.to_string(),
                "negative": neg_key.to_string(),
            }),
        );
        Ok((pos_key, neg_key))
    }

    /// Snapshot of labeled segments and the current head for a training round.
    pub fn train_job(&self) -> TrainJob {
        let labeled: Vec<&Segment> = self.segments().filter(|s| s.label.is_some()).collect();
        TrainJob {
            features: labeled.iter().map(|s| s.features.clone()).collect(),
            labels: labeled.iter().map(|s| s.label).collect(),
            head: self.head.clone(),
            config: TrainConfig {
                seed: self.config.train.seed.wrapping_add(self.rounds),
                ..self.config.train
            },
        }
    }

    /// Installs a trained head and records the round.
    pub fn commit_head(&mut self, head: EmbeddingHead, losses: &[f64]) -> Result<()> {
        if (head.input_dim(), head.output_dim()) != (self.head.input_dim(), self.head.output_dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.head.input_dim(),
                actual: head.input_dim(),
            });
        }
        self.head = head;
        self.rounds += 1;
        self.log("train", serde_json::json!({ "round": self.rounds, "losses": losses }));
        Ok(())
    }

    /// One training round on all labeled segments.
    pub fn train(&mut self, on_epoch: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
        let (head, losses) = self.train_job().run(on_epoch)?;
        self.commit_head(head, &losses)?;
        Ok(losses)
    }

    /// Lays out all shown segments again with the current head and labels.
    pub fn reproject(&mut self) -> Result<()> {
        let keys = self.shown.clone();
        self.full_layout(&keys)?;
        self.log("reproject", serde_json::json!({ "segments": keys.len() }));
        Ok(())
    }

    /// Independent local projection of a subset, leaving the canvas unchanged.
    pub fn local_projection(&self, keys: &[SegmentKey]) -> Result<Vec<LayoutPoint>> {
        let points = self.embedded(keys)?;
        let labels = self.labels_of(keys);
        let l = local_reproject(&points, Some(&labels), &self.config.local_projection)?;
        Ok(keys
            .iter()
            .zip(l.coords)
            .map(|(&key, c)| LayoutPoint { key, x: c[0], y: c[1] })
            .collect())
    }

    /// Canvas coordinates of the shown segments, in insertion order.
    pub fn layout_points(&self) -> Vec<LayoutPoint> {
        self.shown
            .iter()
            .map(|k| {
                let c = self.segments[k].coords.unwrap();
                LayoutPoint { key: *k, x: c[0], y: c[1] }
            })
            .collect()
    }

    /// Replaces one image's partition by its intersection with ground-truth classes.
    pub fn constrain_to_gt(&mut self, image_id: &str, gt: &LabelMask) -> Result<ChangeReport> {
        let idx = self.image_index(image_id)?;
        let partition = gt_constrained_partition(&self.images[idx].partition, gt)?;
        let report = self.replace_partition(idx, partition)?;
        self.log(
            "gt-constrain",
            serde_json::json!({ "image": image_id, "segments": self.images[idx].segments.len() }),
        );
        Ok(report)
    }

    /// Labels each segment of an image by ground-truth majority. Class 0 and
    /// void leave segments unlabeled; missing classes join the palette.
    pub fn apply_oracle_labels(&mut self, image_id: &str, gt: &LabelMask) -> Result<usize> {
        let idx = self.image_index(image_id)?;
        let votes = oracle_majority_labels(&self.images[idx].partition, gt)?;
        let keys = self.images[idx].segments.clone();
        let mut count = 0;
        for (k, v) in keys.iter().zip(votes) {
            let label = v.filter(|&l| l != 0 && l != VOID_LABEL);
            if let Some(l) = label {
                if self.check_label(l).is_err() {
                    self.insert_label(l, &format!("class-{l}"), default_color(l))?;
                }
                count += 1;
            }
            self.segments.get_mut(k).unwrap().label = label;
        }
        self.log("oracle-labels", serde_json::json!({ "image": image_id, "labeled": count }));
        Ok(count)
    }

    /// Per-image masks: pixels of labeled segments carry the label id, others 0.
    pub fn label_masks(&self) -> Vec<LabelMask> {
        self.images
            .iter()
            .map(|img| {
                let labels: Vec<Option<u32>> = img.segments.iter().map(|k| self.segments[k].label).collect();
                mask_from_region_labels(&img.id, &img.partition, &labels).expect("registry matches partition")
            })
            .collect()
    }

    /// Writes `<image id>.png` indexed masks plus `palette.json` into `dir`.
    pub fn export_masks(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for mask in self.label_masks() {
            let path = dir.join(format!("{}.png", mask.image_id));
            mask.save_png(&path, &self.palette)?;
            written.push(path);
        }
        let mut json = serde_json::to_vec_pretty(&self.palette)?;
        json.push(b'\n');
        std::fs::write(dir.join("palette.json"), json)?;
        Ok(written)
    }
}

/// Deterministic distinct-ish colour for an id.
pub fn default_color(id: u32) -> [u8; 3] {
    const BASE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
    ];
    let c = BASE[(id.wrapping_sub(1) % 8) as usize];
    let shade = ((id.wrapping_sub(1) / 8) % 3) as u8 * 40;
    [c[0].saturating_sub(shade), c[1].saturating_sub(shade), c[2].saturating_sub(shade)]
}
