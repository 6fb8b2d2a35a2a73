//! Python bindings for the cenpbg pipeline.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cenpbg::bench::{self, BenchOptions};
use cenpbg::connectivity::{self, Candidates};
use cenpbg::geom::{self, Vec3};
use cenpbg::image;
use cenpbg::ingest::{self, ScanRange};
use cenpbg::losses;
use cenpbg::raster::{self, Channels};
use cenpbg::render;
use cenpbg::synth;

create_exception!(cenpbg_py, FormatError, PyValueError, "Malformed or unsupported input file.");

fn err(e: cenpbg::Error) -> PyErr {
    match e {
        cenpbg::Error::Domain(m) => PyValueError::new_err(m),
        e @ (cenpbg::Error::Format { .. } | cenpbg::Error::UnsupportedVersion { .. }) => {
            FormatError::new_err(e.to_string())
        }
        e @ cenpbg::Error::Io { .. } => PyIOError::new_err(e.to_string()),
    }
}

fn channels(name: &str) -> PyResult<Channels> {
    match name {
        "color" => Ok(Channels::Color),
        "descriptor" => Ok(Channels::Descriptor),
        _ => Err(PyValueError::new_err(format!("unknown channels {name:?}"))),
    }
}

/// Rigid camera-to-world transform.
#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone)]
struct PyPose(geom::Pose);

#[pymethods]
impl PyPose {
    /// Builds a pose from 12 row-major values of `[R | t]`.
    #[new]
    fn new(rows: [f64; 12]) -> PyResult<Self> {
        geom::Pose::from_rows(&rows).map(PyPose).map_err(err)
    }

    #[staticmethod]
    fn identity() -> Self {
        PyPose(geom::Pose::identity())
    }

    #[staticmethod]
    fn from_translation(x: f64, y: f64, z: f64) -> PyResult<Self> {
        geom::Pose::from_translation(Vec3::new(x, y, z)).map(PyPose).map_err(err)
    }

    fn to_rows(&self) -> [f64; 12] {
        self.0.to_rows()
    }

    fn camera_center(&self) -> [f64; 3] {
        let c = self.0.camera_center();
        [c.x, c.y, c.z]
    }

    /// Camera-frame coordinates of a world point.
    fn world_to_camera(&self, p: [f64; 3]) -> PyResult<[f64; 3]> {
        let c = self.0.world_to_camera(&Vec3::from(p)).map_err(err)?;
        Ok([c.x, c.y, c.z])
    }

    fn __repr__(&self) -> String {
        let c = self.0.camera_center();
        format!("Pose(center=[{}, {}, {}])", c.x, c.y, c.z)
    }
}

/// Pinhole camera model.
#[pyclass(name = "Intrinsics", from_py_object)]
#[derive(Clone)]
struct PyIntrinsics(geom::Intrinsics);

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> PyResult<Self> {
        geom::Intrinsics::new(fx, fy, cx, cy, width, height).map(PyIntrinsics).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ingest::read_intrinsics(&path).map(PyIntrinsics).map_err(err)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height
    }

    /// Intrinsics of pyramid level `t`.
    fn scale(&self, level: u32) -> PyResult<Self> {
        self.0.scale(level).map(PyIntrinsics).map_err(err)
    }

    /// `(u, v, depth)` of a camera-frame point, or None behind the camera.
    fn project(&self, c: [f64; 3]) -> Option<(f64, f64, f64)> {
        self.0.project(&geom::CamPoint::new(c[0], c[1], c[2])).image()
    }

    fn __repr__(&self) -> String {
        let k = &self.0;
        format!("Intrinsics(fx={}, fy={}, cx={}, cy={}, {}x{})", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
    }
}

/// Accumulated world-frame points with per-scan ranges.
#[pyclass(name = "PointCloudMap", from_py_object)]
#[derive(Clone)]
struct PyMap(ingest::PointCloudMap);

#[pymethods]
impl PyMap {
    /// Map from world points grouped into consecutive scans of `scan_sizes`.
    #[new]
    #[pyo3(signature = (positions, scan_sizes, colors=None))]
    fn new(positions: Vec<[f32; 3]>, scan_sizes: Vec<usize>, colors: Option<Vec<[f32; 3]>>) -> PyResult<Self> {
        let mut first = 0;
        let ranges = scan_sizes
            .iter()
            .enumerate()
            .map(|(i, &count)| {
                let r = ScanRange {
                    scan_id: i as u64,
                    first,
                    count,
                };
                first += count;
                r
            })
            .collect();
        let mut map = ingest::PointCloudMap::new(positions, ranges).map_err(err)?;
        if let Some(c) = colors {
            map = map.with_colors(c).map_err(err)?;
        }
        Ok(PyMap(map))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ingest::load_map(&path).map(PyMap).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ingest::save_map(&path, &self.0).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn positions(&self) -> Vec<[f32; 3]> {
        self.0.positions().to_vec()
    }

    fn colors(&self) -> Option<Vec<[f32; 3]>> {
        self.0.colors().map(<[_]>::to_vec)
    }

    /// `(scan_id, first, count)` per scan.
    fn scan_ranges(&self) -> Vec<(u64, usize, usize)> {
        self.0.scan_ranges().iter().map(|r| (r.scan_id, r.first, r.count)).collect()
    }

    #[pyo3(signature = (dim=8, seed=0))]
    fn with_random_descriptors(&self, dim: usize, seed: u64) -> PyResult<Self> {
        self.0.clone().with_random_descriptors(dim, seed).map(PyMap).map_err(err)
    }
}

/// Posed frames, intrinsics and the map they observe.
#[pyclass(name = "Sequence", from_py_object)]
#[derive(Clone)]
struct PySequence(ingest::Sequence);

#[pymethods]
impl PySequence {
    #[new]
    fn new(frames: Vec<(u64, PyPose)>, intrinsics: PyIntrinsics, map: PyMap) -> PyResult<Self> {
        let frames = frames.into_iter().map(|(id, p)| (id, p.0)).collect();
        ingest::Sequence::new(frames, intrinsics.0, map.0).map(PySequence).map_err(err)
    }

    #[getter]
    fn frame_ids(&self) -> Vec<u64> {
        self.0.frames.iter().map(|f| f.0).collect()
    }

    #[getter]
    fn intrinsics(&self) -> PyIntrinsics {
        PyIntrinsics(self.0.intrinsics)
    }

    #[getter]
    fn map(&self) -> PyMap {
        PyMap(self.0.map.clone())
    }

    fn pose(&self, frame_id: u64) -> PyResult<PyPose> {
        self.0
            .pose(frame_id)
            .cloned()
            .map(PyPose)
            .ok_or_else(|| PyIndexError::new_err(format!("no frame {frame_id}")))
    }

    /// `(train_ids, test_ids)`, holding out every 10th frame.
    fn split(&self) -> PyResult<(Vec<u64>, Vec<u64>)> {
        ingest::split_train_test(&self.frame_ids()).map_err(err)
    }
}

/// Frame-to-scan-window links.
#[pyclass(name = "ConnectivityGraph", from_py_object)]
#[derive(Clone)]
struct PyGraph(connectivity::ConnectivityGraph);

#[pymethods]
impl PyGraph {
    /// Links the listed frames of `sequence` (all by default).
    #[staticmethod]
    #[pyo3(signature = (sequence, n=5, frame_ids=None))]
    fn build(sequence: &PySequence, n: u32, frame_ids: Option<Vec<u64>>) -> PyResult<Self> {
        let seq = &sequence.0;
        let frames: Vec<_> = match frame_ids {
            None => seq.frames.clone(),
            Some(ids) => ids
                .iter()
                .map(|&id| {
                    seq.pose(id)
                        .map(|p| (id, p.clone()))
                        .ok_or_else(|| PyIndexError::new_err(format!("no frame {id}")))
                })
                .collect::<PyResult<_>>()?,
        };
        connectivity::build_graph_from_frames(&frames, &seq.map, n).map(PyGraph).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        connectivity::load_graph(&path).map(PyGraph).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        connectivity::save_graph(&path, &self.0).map_err(err)
    }

    #[getter]
    fn n(&self) -> u32 {
        self.0.n()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn frame_ids(&self) -> Vec<u64> {
        self.0.entries().keys().copied().collect()
    }

    /// Inclusive scan-id window of a frame.
    fn window(&self, frame_id: u64) -> PyResult<(u64, u64)> {
        self.0
            .entry(frame_id)
            .map(|e| (e.window.first, e.window.last))
            .ok_or_else(|| PyIndexError::new_err(format!("frame {frame_id} is not in the graph")))
    }

    fn nearest_frame(&self, pose: &PyPose) -> PyResult<u64> {
        connectivity::nearest_frame(&self.0, &pose.0).map_err(err)
    }

    /// Map indices of the scans in a frame's window.
    fn candidates(&self, map: &PyMap, frame_id: u64) -> PyResult<Vec<usize>> {
        Ok(connectivity::retrieve_candidates(&self.0, &map.0, frame_id).map_err(err)?.iter().collect())
    }
}

/// Points that survive pruning, sorted by map index.
#[pyclass(name = "VisibleSet", from_py_object)]
#[derive(Clone)]
struct PyVisible(connectivity::VisibleSet);

#[pymethods]
impl PyVisible {
    #[getter]
    fn point_indices(&self) -> Vec<usize> {
        self.0.point_indices.clone()
    }

    #[getter]
    fn pixels(&self) -> Vec<(u32, u32)> {
        self.0.pixel_of.clone()
    }

    #[getter]
    fn depths(&self) -> Vec<f64> {
        self.0.depth_of.clone()
    }

    #[getter]
    fn source_frame(&self) -> Option<u64> {
        self.0.source_frame
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Nearest-frame retrieval followed by z-buffer pruning.
#[pyfunction]
fn visible_from(graph: &PyGraph, map: &PyMap, pose: &PyPose, intrinsics: &PyIntrinsics) -> PyResult<PyVisible> {
    connectivity::visible_from(&graph.0, &map.0, &pose.0, &intrinsics.0).map(PyVisible).map_err(err)
}

/// Z-buffer pruning of explicit candidates (the whole map by default).
#[pyfunction]
#[pyo3(signature = (map, pose, intrinsics, candidates=None))]
fn prune_visible(map: &PyMap, pose: &PyPose, intrinsics: &PyIntrinsics, candidates: Option<Vec<usize>>) -> PyResult<PyVisible> {
    let c = match candidates {
        None => Candidates::all(&map.0),
        Some(v) => {
            if let Some(i) = v.iter().find(|&&i| i >= map.0.len()) {
                return Err(PyIndexError::new_err(format!("point index {i} outside map")));
            }
            Candidates::Indices(v)
        }
    };
    Ok(PyVisible(connectivity::prune_visible(&c, &map.0, &pose.0, &intrinsics.0)))
}

/// One pyramid level: features, depth and mask.
#[pyclass(name = "RasterImage", from_py_object)]
#[derive(Clone)]
struct PyRaster(raster::RasterImage);

#[pymethods]
impl PyRaster {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        raster::load_raster(&path).map(PyRaster).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        raster::save_raster(&path, &self.0).map_err(err)
    }

    #[getter]
    fn level(&self) -> u32 {
        self.0.level
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels
    }

    fn mask(&self) -> Vec<bool> {
        self.0.mask.clone()
    }

    fn depth(&self) -> Vec<f32> {
        self.0.depth.clone()
    }

    fn features(&self) -> Vec<f32> {
        self.0.features.clone()
    }

    fn occupancy(&self) -> f64 {
        raster::occupancy(&self.0)
    }
}

#[pyclass(name = "RasterPyramid", from_py_object)]
#[derive(Clone)]
struct PyPyramid(raster::RasterPyramid);

#[pymethods]
impl PyPyramid {
    fn levels(&self) -> Vec<PyRaster> {
        self.0.levels.iter().cloned().map(PyRaster).collect()
    }

    fn level(&self, t: u32) -> PyResult<PyRaster> {
        self.0
            .level(t)
            .cloned()
            .map(PyRaster)
            .ok_or_else(|| PyIndexError::new_err(format!("no level {t}")))
    }

    fn __len__(&self) -> usize {
        self.0.levels.len()
    }
}

#[pyfunction]
#[pyo3(signature = (map, indices, pose, intrinsics, levels=None, channels="color"))]
fn rasterize_pyramid(
    map: &PyMap,
    indices: Vec<usize>,
    pose: &PyPose,
    intrinsics: &PyIntrinsics,
    levels: Option<Vec<u32>>,
    channels: &str,
) -> PyResult<PyPyramid> {
    let levels = levels.unwrap_or_else(|| raster::DEFAULT_LEVELS.to_vec());
    raster::rasterize_pyramid(&map.0, &indices, &pose.0, &intrinsics.0, &levels, self::channels(channels)?)
        .map(PyPyramid)
        .map_err(err)
}

/// RGB image with values in [0, 1].
#[pyclass(name = "RgbImage", from_py_object)]
#[derive(Clone)]
struct PyImage(image::RgbImage);

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: u32, height: u32, data: Vec<f32>) -> PyResult<Self> {
        image::RgbImage::from_data(width, height, data).map(PyImage).map_err(err)
    }

    #[staticmethod]
    fn read_ppm(path: PathBuf) -> PyResult<Self> {
        image::read_ppm(&path).map(PyImage).map_err(err)
    }

    fn write_ppm(&self, path: PathBuf) -> PyResult<()> {
        image::write_ppm(&path, &self.0).map_err(err)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }

    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn get(&self, x: u32, y: u32) -> PyResult<[f32; 3]> {
        if x >= self.0.width() || y >= self.0.height() {
            return Err(PyIndexError::new_err(format!("pixel ({x}, {y}) outside image")));
        }
        Ok(self.0.get(x, y))
    }
}

#[pyfunction]
#[pyo3(signature = (pyramid, background=render::DEFAULT_BACKGROUND))]
fn render_rgb(pyramid: &PyPyramid, background: f32) -> PyResult<PyImage> {
    render::render_rgb(&pyramid.0, background).map(PyImage).map_err(err)
}

#[pyfunction]
fn psnr(img: &PyImage, reference: &PyImage) -> PyResult<f64> {
    render::psnr(&img.0, &reference.0).map_err(err)
}

#[pyfunction]
fn ssim(img: &PyImage, reference: &PyImage) -> PyResult<f64> {
    render::ssim(&img.0, &reference.0).map_err(err)
}

fn scale_scores(maps: Vec<Vec<Vec<f64>>>) -> PyResult<losses::ScaleScores> {
    let maps = maps
        .into_iter()
        .map(|rows| {
            let (r, c) = (rows.len(), rows.first().map_or(0, Vec::len));
            if rows.iter().any(|row| row.len() != c) {
                return Err(PyValueError::new_err("score map rows differ in length"));
            }
            losses::ScoreMap::new(r, c, rows.concat()).map_err(err)
        })
        .collect::<PyResult<_>>()?;
    losses::ScaleScores::new(maps).map_err(err)
}

/// Generator loss over per-scale score maps given as nested lists.
#[pyfunction]
fn generator_adv_loss(fake: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    Ok(losses::generator_adv_loss(&scale_scores(fake)?))
}

#[pyfunction]
fn discriminator_adv_loss(fake: Vec<Vec<Vec<f64>>>, real: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    losses::discriminator_adv_loss(&scale_scores(fake)?, &scale_scores(real)?).map_err(err)
}

/// Street-canyon scene with analytic surfaces.
#[pyclass(name = "SyntheticScene", from_py_object)]
#[derive(Clone)]
struct PyScene(synth::SyntheticScene);

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        synth::load_scene(&dir).map(PyScene).map_err(err)
    }

    fn dump(&self, dir: PathBuf) -> PyResult<()> {
        synth::dump_scene(&self.0, &dir).map_err(err)
    }

    fn sequence(&self) -> PyResult<PySequence> {
        self.0.sequence().map(PySequence).map_err(err)
    }

    #[getter]
    fn surface_count(&self) -> usize {
        self.0.surfaces.len()
    }

    /// Ground-truth image traced against the surfaces.
    #[pyo3(signature = (pose, background=render::DEFAULT_BACKGROUND))]
    fn paint(&self, pose: &PyPose, background: f32) -> PyResult<PyImage> {
        synth::paint(&self.0.surfaces, &pose.0, &self.0.intrinsics, background).map(PyImage).map_err(err)
    }

    /// Oracle verdict for each listed point.
    fn oracle_visibility(&self, map: &PyMap, indices: Vec<usize>, pose: &PyPose) -> Vec<bool> {
        synth::oracle_visibility(&map.0, &Candidates::Indices(indices), &pose.0, &self.0.intrinsics, &self.0.surfaces)
    }
}

#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn make_canyon(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<PyScene> {
    let mut p = synth::CanyonParams::default();
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            match key.as_str() {
                "length" => p.length = v.extract()?,
                "wall_gap" => p.wall_gap = v.extract()?,
                "wall_height" => p.wall_height = v.extract()?,
                "camera_height" => p.camera_height = v.extract()?,
                "point_spacing" => p.point_spacing = v.extract()?,
                "occluder_spacing" => p.occluder_spacing = v.extract()?,
                "lidar_range" => p.lidar_range = v.extract()?,
                "frame_step" => p.frame_step = v.extract()?,
                "occluders" => p.occluders = v.extract()?,
                "width" => p.width = v.extract()?,
                "height" => p.height = v.extract()?,
                "focal" => p.focal = v.extract()?,
                "seed" => p.seed = v.extract()?,
                _ => return Err(PyValueError::new_err(format!("unknown canyon parameter {key:?}"))),
            }
        }
    }
    synth::make_canyon(&p).map(PyScene).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (scans=300, points_per_scan=2000, seed=0))]
fn uniform_sequence(scans: usize, points_per_scan: usize, seed: u64) -> PyResult<PySequence> {
    let p = synth::UniformParams {
        scans,
        points_per_scan,
        seed,
        ..synth::UniformParams::default()
    };
    synth::uniform_sequence(&p).map(PySequence).map_err(err)
}

/// Runs one strategy over the listed frames and returns one dict per view.
#[pyfunction]
#[pyo3(signature = (strategy, sequence, graph, frame_ids, scene=None, recall=false))]
fn run_strategy<'py>(
    py: Python<'py>,
    strategy: &str,
    sequence: &PySequence,
    graph: Option<&PyGraph>,
    frame_ids: Vec<u64>,
    scene: Option<&PyScene>,
    recall: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let strategy: bench::Strategy = strategy.parse().map_err(err)?;
    let queries = frame_ids
        .iter()
        .map(|&id| {
            sequence
                .0
                .pose(id)
                .map(|p| (id, p.clone()))
                .ok_or_else(|| PyIndexError::new_err(format!("no frame {id}")))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let opts = BenchOptions {
        score: scene.is_some(),
        recall: recall && scene.is_some(),
        ..BenchOptions::default()
    };
    let surfaces = scene.map_or(&[][..], |s| &s.0.surfaces[..]);
    let report = bench::run_strategy(strategy, &sequence.0, graph.map(|g| &g.0), surfaces, &queries, &opts).map_err(err)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("frame_id", r.frame_id)?;
            d.set_item("retrieved", r.retrieved)?;
            d.set_item("visible", r.visible)?;
            d.set_item("leak", r.leak)?;
            d.set_item("precision", r.precision)?;
            d.set_item("recall", r.recall)?;
            d.set_item("prune_s", r.prune_s)?;
            d.set_item("raster_s", r.raster_s)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn cenpbg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FormatError", m.py().get_type::<FormatError>())?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyMap>()?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyVisible>()?;
    m.add_class::<PyRaster>()?;
    m.add_class::<PyPyramid>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(visible_from, m)?)?;
    m.add_function(wrap_pyfunction!(prune_visible, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize_pyramid, m)?)?;
    m.add_function(wrap_pyfunction!(render_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(generator_adv_loss, m)?)?;
    m.add_function(wrap_pyfunction!(discriminator_adv_loss, m)?)?;
    m.add_function(wrap_pyfunction!(make_canyon, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(run_strategy, m)?)?;
    Ok(())
}
