//! Python module `segscape`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use segscape::correction::ClickSet;
use segscape::graph::{Criterion, CutConfig};
use segscape::metric::TrainConfig;
use segscape::projector::ProjectionConfig;
use segscape::session::{CanvasRect, EvalMode, LabelMask, ProviderSpec, SessionConfig};
use segscape::{Error, SegmentKey};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::UnknownImage(_) | Error::UnknownSegment(_) | Error::UnknownLabel(_) | Error::MissingFeature(_) => {
            PyKeyError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument(_)
        | Error::DegenerateInput(_)
        | Error::DimensionMismatch { .. }
        | Error::InsufficientLabels(_)
        | Error::Format { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for segscape::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn criterion(name: &str) -> PyResult<Criterion> {
    name.parse().py()
}

fn key(s: &str) -> PyResult<SegmentKey> {
    s.parse().map_err(|_| PyValueError::new_err(format!("malformed segment key '{s}'")))
}

/// Per-pixel boundary strength on a 4-connected grid.
#[pyclass(name = "GradientImage", module = "segscape", frozen)]
struct PyGradient(segscape::graph::GradientImage);

#[pymethods]
impl PyGradient {
    #[new]
    fn new(width: usize, height: usize, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self(segscape::graph::GradientImage::new(width, height, values).py()?))
    }

    /// Reads an FSGR file or a grayscale PNG.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(segscape::graph::GradientImage::load(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_fsgr(&path).py()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }
}

#[pyclass(name = "Partition", module = "segscape", frozen)]
struct PyPartition(segscape::graph::Partition);

#[pymethods]
impl PyPartition {
    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    /// Region id per pixel, row-major.
    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn region_count(&self) -> usize {
        self.0.region_count()
    }

    fn is_connected(&self) -> bool {
        self.0.is_connected()
    }
}

#[pyclass(name = "Hierarchy", module = "segscape", frozen)]
struct PyHierarchy(segscape::graph::Hierarchy);

#[pymethods]
impl PyHierarchy {
    #[getter]
    fn criterion(&self) -> &'static str {
        self.0.criterion().as_str()
    }

    /// Partition obtained by removing every edge with saliency at or above `threshold`.
    fn cut(&self, threshold: f64) -> PyResult<PyPartition> {
        Ok(PyPartition(segscape::graph::horizontal_cut(&self.0, threshold).py()?))
    }
}

#[pyfunction]
#[pyo3(signature = (gradient, criterion = "volume"))]
fn build_hierarchy(gradient: &PyGradient, criterion: &str) -> PyResult<PyHierarchy> {
    Ok(PyHierarchy(
        segscape::graph::build_hierarchy(&gradient.0, self::criterion(criterion)?).py()?,
    ))
}

/// Splits a segment by seeded watershed; returns one bool per pixel of `pixels`
/// (True = positive side).
#[pyfunction]
fn split_segment(gradient: &PyGradient, pixels: Vec<usize>, positive: Vec<usize>, negative: Vec<usize>) -> PyResult<Vec<bool>> {
    let clicks = ClickSet { positive, negative };
    let out = segscape::correction::split_segment(&gradient.0, &pixels, &clicks).py()?;
    let side: std::collections::HashMap<usize, bool> = out.pixels.into_iter().zip(out.positive).collect();
    Ok(pixels.iter().map(|p| side[p]).collect())
}

#[pyfunction]
fn triplet_loss(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>, margin: f64) -> PyResult<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(PyValueError::new_err("triplet vectors differ in length"));
    }
    Ok(segscape::metric::triplet_loss(&anchor, &positive, &negative, margin))
}

/// Linear embedding head without bias.
#[pyclass(name = "EmbeddingHead", module = "segscape", frozen)]
struct PyHead(segscape::metric::EmbeddingHead);

#[pymethods]
impl PyHead {
    #[new]
    #[pyo3(signature = (input_dim, output_dim, seed = 0))]
    fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        Self(segscape::metric::EmbeddingHead::random(input_dim, output_dim, seed))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(segscape::metric::EmbeddingHead::load(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.0.output_dim()
    }

    fn embed(&self, features: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f64>>> {
        self.0.embed_all(&features).py()
    }
}

/// One metric-learning round; returns the trained head and the mean loss per epoch.
#[pyfunction]
#[pyo3(signature = (features, labels, head, epochs = 3, triplets_per_epoch = 1000, learning_rate = 0.1, margin = 0.05, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train_round(
    features: Vec<Vec<f32>>,
    labels: Vec<Option<u32>>,
    head: &PyHead,
    epochs: usize,
    triplets_per_epoch: usize,
    learning_rate: f64,
    margin: f64,
    seed: u64,
) -> PyResult<(PyHead, Vec<f64>)> {
    let cfg = TrainConfig {
        epochs,
        triplets_per_epoch,
        learning_rate,
        margin,
        seed,
        ..TrainConfig::default()
    };
    let (trained, losses) = segscape::metric::train_round(&features, &labels, &head.0, &cfg, |_, _| {}).py()?;
    Ok((PyHead(trained), losses))
}

/// 2D neighbour-embedding layout of `points`; returns `(x, y)` per point.
#[pyfunction]
#[pyo3(signature = (points, labels = None, k = 15, min_dist = 0.01, supervision = 0.5, epochs = 200, seed = 0))]
fn project(
    points: Vec<Vec<f64>>,
    labels: Option<Vec<Option<u32>>>,
    k: usize,
    min_dist: f64,
    supervision: f64,
    epochs: usize,
    seed: u64,
) -> PyResult<Vec<(f64, f64)>> {
    let cfg = ProjectionConfig {
        k,
        min_dist,
        supervision,
        epochs,
        seed,
        ..ProjectionConfig::global()
    };
    cfg.validate().py()?;
    let graph = segscape::projector::fuzzy_knn(&points, k, labels.as_deref(), supervision).py()?;
    let l = segscape::projector::layout(&graph, &cfg).py()?;
    Ok(l.coords.into_iter().map(|c| (c[0], c[1])).collect())
}

fn eval_mode(name: &str) -> PyResult<EvalMode> {
    name.parse().py()
}

fn metrics_dict<'py>(py: Python<'py>, m: &segscape::session::Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mode", m.mode.as_str())?;
    d.set_item("mean", m.mean)?;
    d.set_item("median", m.median)?;
    let per: Vec<(String, Option<f64>)> = m.per_image.iter().map(|s| (s.image_id.clone(), s.score)).collect();
    d.set_item("per_image", per)?;
    Ok(d)
}

/// Scores predicted mask PNGs against ground-truth PNGs, pairwise in order.
#[pyfunction]
#[pyo3(signature = (pred_paths, gt_paths, mode = "instance-iou"))]
fn evaluate_masks<'py>(py: Python<'py>, pred_paths: Vec<PathBuf>, gt_paths: Vec<PathBuf>, mode: &str) -> PyResult<Bound<'py, PyDict>> {
    if pred_paths.len() != gt_paths.len() {
        return Err(PyValueError::new_err("prediction and ground-truth lists differ in length"));
    }
    let load = |paths: &[PathBuf]| -> PyResult<Vec<LabelMask>> {
        paths
            .iter()
            .enumerate()
            .map(|(i, p)| LabelMask::load_png(p, i.to_string()).py())
            .collect()
    };
    let m = segscape::session::evaluate(&load(&pred_paths)?, &load(&gt_paths)?, eval_mode(mode)?).py()?;
    metrics_dict(py, &m)
}

/// An annotation session over a set of images.
#[pyclass(name = "Session", module = "segscape")]
struct PySession(segscape::session::Session);

fn segment_dict<'py>(py: Python<'py>, s: &segscape::session::Segment) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("key", s.key.to_string())?;
    d.set_item("image", &s.image_id)?;
    d.set_item("pixels", s.pixel_count())?;
    d.set_item("bbox", (s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1))?;
    d.set_item("label", s.label)?;
    d.set_item("coords", s.coords.map(|c| (c[0], c[1])))?;
    Ok(d)
}

#[pymethods]
impl PySession {
    /// Cuts each image's hierarchy and describes the segments. `feature_file`
    /// switches from the built-in descriptor to a precomputed FSAF table.
    #[staticmethod]
    #[pyo3(signature = (images, gradients, criterion = "volume", threshold = 1000.0, feature_file = None, seed = 0))]
    fn ingest(
        images: Vec<PathBuf>,
        gradients: Vec<PathBuf>,
        criterion: &str,
        threshold: f64,
        feature_file: Option<PathBuf>,
        seed: u64,
    ) -> PyResult<Self> {
        let cut = CutConfig::new(self::criterion(criterion)?, threshold).py()?;
        let provider = feature_file.map_or(ProviderSpec::Builtin, ProviderSpec::File);
        let config = SessionConfig {
            seed,
            ..SessionConfig::default()
        };
        Ok(Self(
            segscape::session::Session::ingest(&images, &gradients, cut, provider, config).py()?,
        ))
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self(segscape::session::Session::load(&dir).py()?))
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save(&dir).py()
    }

    fn image_ids(&self) -> Vec<String> {
        self.0.image_ids()
    }

    fn segment_count(&self) -> usize {
        self.0.segment_count()
    }

    fn segments<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.0.segments().map(|s| segment_dict(py, s)).collect()
    }

    fn segment<'py>(&self, py: Python<'py>, key: &str) -> PyResult<Bound<'py, PyDict>> {
        let k = self::key(key)?;
        let s = self.0.segment(k).ok_or_else(|| to_py(Error::UnknownSegment(k)))?;
        segment_dict(py, s)
    }

    fn partition(&self, image: &str) -> PyResult<PyPartition> {
        Ok(PyPartition(self.0.partition(image).py()?.clone()))
    }

    /// Reveals the segments of up to `n` further images; returns their keys.
    fn next_batch(&mut self, n: usize) -> PyResult<Vec<String>> {
        Ok(self.0.next_batch(n).py()?.iter().map(|k| k.to_string()).collect())
    }

    /// Canvas coordinates of the shown segments as `(key, x, y)`.
    fn layout(&self) -> Vec<(String, f64, f64)> {
        self.0
            .layout_points()
            .into_iter()
            .map(|p| (p.key.to_string(), p.x, p.y))
            .collect()
    }

    fn palette(&self) -> Vec<(u32, String, (u8, u8, u8))> {
        self.0
            .palette()
            .iter()
            .map(|p| (p.id, p.name.clone(), (p.color[0], p.color[1], p.color[2])))
            .collect()
    }

    #[pyo3(signature = (name, color = None))]
    fn add_label(&mut self, name: &str, color: Option<(u8, u8, u8)>) -> PyResult<u32> {
        let next = self.0.palette().iter().map(|p| p.id).max().unwrap_or(0) + 1;
        let c = color.map_or_else(|| segscape::session::default_color(next), |(r, g, b)| [r, g, b]);
        self.0.add_label(name, c).py()
    }

    #[pyo3(signature = (key, label))]
    fn set_label(&mut self, key: &str, label: Option<u32>) -> PyResult<()> {
        self.0.set_label(self::key(key)?, label).py()
    }

    /// Labels every shown segment whose coordinates fall in the rectangle.
    fn assign_label_box(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, label: u32) -> PyResult<usize> {
        self.0.assign_label_box(CanvasRect::new(x0, y0, x1, y1), label).py()
    }

    /// Re-cuts one image; returns `(kept, added, removed)` key lists.
    fn recut(&mut self, image: &str, criterion: &str, threshold: f64) -> PyResult<(Vec<String>, Vec<String>, Vec<String>)> {
        let cut = CutConfig::new(self::criterion(criterion)?, threshold).py()?;
        let r = self.0.recut(image, cut).py()?;
        let s = |v: &[SegmentKey]| v.iter().map(|k| k.to_string()).collect::<Vec<_>>();
        Ok((s(&r.kept), s(&r.added), s(&r.removed)))
    }

    /// Splits a segment at pixel-index clicks; returns the two new keys.
    fn split(&mut self, key: &str, positive: Vec<usize>, negative: Vec<usize>) -> PyResult<(String, String)> {
        let (p, n) = self.0.apply_split(self::key(key)?, &ClickSet { positive, negative }).py()?;
        Ok((p.to_string(), n.to_string()))
    }

    /// One training round on the labeled segments; returns per-epoch losses.
    fn train(&mut self, py: Python<'_>) -> PyResult<Vec<f64>> {
        let job = self.0.train_job();
        let (head, losses) = py.detach(|| job.run(|_, _| {})).py()?;
        self.0.commit_head(head, &losses).py()?;
        Ok(losses)
    }

    fn reproject(&mut self) -> PyResult<()> {
        self.0.reproject().py()
    }

    fn local_projection(&self, keys: Vec<String>) -> PyResult<Vec<(String, f64, f64)>> {
        let keys = keys.iter().map(|k| self::key(k)).collect::<PyResult<Vec<_>>>()?;
        Ok(self
            .0
            .local_projection(&keys)
            .py()?
            .into_iter()
            .map(|p| (p.key.to_string(), p.x, p.y))
            .collect())
    }

    fn head(&self) -> PyHead {
        PyHead(self.0.head().clone())
    }

    /// Labels an image's segments by ground-truth majority; returns how many got a label.
    fn apply_oracle_labels(&mut self, image: &str, gt_path: PathBuf) -> PyResult<usize> {
        let gt = LabelMask::load_png(&gt_path, image).py()?;
        self.0.apply_oracle_labels(image, &gt).py()
    }

    fn constrain_to_gt(&mut self, image: &str, gt_path: PathBuf) -> PyResult<usize> {
        let gt = LabelMask::load_png(&gt_path, image).py()?;
        Ok(self.0.constrain_to_gt(image, &gt).py()?.added.len())
    }

    fn export_masks(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        self.0.export_masks(&dir).py()
    }

    /// Scores the current label masks against `<gt_dir>/<image id>.png`.
    #[pyo3(signature = (gt_dir, mode = "instance-iou"))]
    fn evaluate<'py>(&self, py: Python<'py>, gt_dir: PathBuf, mode: &str) -> PyResult<Bound<'py, PyDict>> {
        let preds = self.0.label_masks();
        let gts = preds
            .iter()
            .map(|p| LabelMask::load_png(&gt_dir.join(format!("{}.png", p.image_id)), p.image_id.as_str()).py())
            .collect::<PyResult<Vec<_>>>()?;
        let m = segscape::session::evaluate(&preds, &gts, eval_mode(mode)?).py()?;
        metrics_dict(py, &m)
    }

    fn overlay_png(&self, image: &str, highlight: Option<&str>) -> PyResult<Vec<u8>> {
        let h = highlight.map(key).transpose()?;
        self.0.overlay_png(image, h).py()
    }
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGradient>()?;
    m.add_class::<PyPartition>()?;
    m.add_class::<PyHierarchy>()?;
    m.add_class::<PyHead>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(build_hierarchy, m)?)?;
    m.add_function(wrap_pyfunction!(split_segment, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train_round, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_masks, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[pymodule]
#[pyo3(name = "segscape")]
fn segscape_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
