//! Sensor data ingestion: KITTI-style LiDAR scans, trajectory and intrinsics
//! files, scan accumulation into a [`PointCloudMap`], and train/test splits.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{read_file, write_file, Reader, MAGIC_LEN};
use crate::error::{Error, Result};
use crate::geom::{nearest_rotation, orthonormality_error, Intrinsics, Mat3, Pose, Vec3};
use crate::image::RgbImage;

/// Default descriptor width.
pub const DEFAULT_DESCRIPTOR_DIM: usize = 8;

/// Color assigned to map points that never projected into a reference image.
pub const NO_COLOR: [f32; 3] = [-1.0, -1.0, -1.0];

/// Rotations in pose files may deviate from orthonormal by this much before
/// being projected back onto SO(3).
pub const POSE_FILE_ROTATION_TOLERANCE: f64 = 1e-3;

pub const MAP_MAGIC: &[u8; MAGIC_LEN] = b"CENPBG-MAP\0";
pub const MAP_VERSION: u16 = 1;

const FLAG_COLORS: u8 = 1;
const FLAG_DESCRIPTORS: u8 = 2;

/// One LiDAR sweep in its sensor frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub scan_id: u64,
    pub points: Vec<[f64; 3]>,
    pub reflectance: Option<Vec<f32>>,
}

impl Scan {
    pub fn new(scan_id: u64, points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("scan {scan_id} has non-finite points")));
        }
        Ok(Scan {
            scan_id,
            points,
            reflectance: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn scan_id_from_path(path: &Path) -> Option<u64> {
    path.file_stem()?.to_str()?.parse().ok()
}

/// Reads a velodyne binary: little-endian `f32` quadruples `(x, y, z, r)`.
/// The scan id is the numeric file stem, or 0 when the stem is not a number.
pub fn read_scan(path: &Path) -> Result<Scan> {
    let data = read_file(path)?;
    if data.len() % 16 != 0 {
        let offset = data.len() - data.len() % 16;
        return Err(Error::format(
            path,
            format!(
                "length {} is not a multiple of 16; trailing partial point at byte offset {offset}",
                data.len()
            ),
        ));
    }
    let mut points = Vec::with_capacity(data.len() / 16);
    let mut reflectance = Vec::with_capacity(data.len() / 16);
    for (i, rec) in data.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[k * 4..k * 4 + 4].try_into().unwrap());
        let p = [f(0) as f64, f(1) as f64, f(2) as f64];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                path,
                format!("non-finite coordinate at byte offset {}", i * 16),
            ));
        }
        points.push(p);
        reflectance.push(f(3));
    }
    Ok(Scan {
        scan_id: scan_id_from_path(path).unwrap_or(0),
        points,
        reflectance: Some(reflectance),
    })
}

/// Writes a scan in the velodyne layout (coordinates narrowed to `f32`).
pub fn write_scan(path: &Path, scan: &Scan) -> Result<()> {
    write_file(path, |w| {
        let mut buf = Vec::with_capacity(scan.points.len() * 4);
        for (i, p) in scan.points.iter().enumerate() {
            let r = scan.reflectance.as_ref().map_or(0.0, |r| r[i]);
            buf.extend_from_slice(&[p[0] as f32, p[1] as f32, p[2] as f32, r]);
        }
        w.f32s(&buf)
    })
}

/// Reads every file in `dir` whose stem is a non-negative integer, sorted by
/// scan id.
pub fn read_scan_dir(dir: &Path) -> Result<Vec<Scan>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(id) = scan_id_from_path(&path) {
            paths.push((id, path));
        }
    }
    paths.sort();
    if let Some(w) = paths.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::format(dir, format!("two scan files share id {}", w[0].0)));
    }
    paths.par_iter().map(|(_, p)| read_scan(p)).collect()
}

/// Parses a trajectory file: `frame_id` followed by a row-major 3×4
/// camera-to-world matrix on each line. Blank lines and `#` comments are
/// skipped. Returned in file order.
pub fn read_poses(path: &Path) -> Result<Vec<(u64, Pose)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(path, &text)
}

pub(crate) fn parse_poses(path: &Path, text: &str) -> Result<Vec<(u64, Pose)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::format(path, format!("line {lineno}: {msg}"));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 13 {
            return Err(err(format!("expected 13 fields, found {}", fields.len())));
        }
        let frame_id: u64 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad frame id {:?}", fields[0])))?;
        let mut m = [0.0f64; 12];
        for (slot, tok) in m.iter_mut().zip(&fields[1..]) {
            *slot = tok
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| err(format!("bad number {tok:?}")))?;
        }
        if !seen.insert(frame_id) {
            return Err(err(format!("duplicate frame id {frame_id}")));
        }
        let r = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let ortho = orthonormality_error(&r);
        if ortho > POSE_FILE_ROTATION_TOLERANCE {
            return Err(err(format!("rotation is not orthonormal (error {ortho:e})")));
        }
        let r = nearest_rotation(&r).ok_or_else(|| err("rotation is a reflection".into()))?;
        let pose = Pose::new(r, Vec3::new(m[3], m[7], m[11]))
            .map_err(|e| err(e.to_string()))?
            .with_frame_id(frame_id);
        out.push((frame_id, pose));
    }
    Ok(out)
}

pub fn write_poses(path: &Path, poses: &[(u64, Pose)]) -> Result<()> {
    let mut text = String::new();
    for (id, pose) in poses {
        text.push_str(&id.to_string());
        for v in pose.to_rows() {
            text.push(' ');
            text.push_str(&v.to_string());
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `fx fy cx cy width height` from a one-line text file.
pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(Error::format(
            path,
            format!("expected 6 fields, found {}", fields.len()),
        ));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::format(path, format!("bad number {s:?}")))
    };
    let int = |s: &str| -> Result<u32> {
        s.parse()
            .map_err(|_| Error::format(path, format!("bad image dimension {s:?}")))
    };
    Intrinsics::new(
        num(fields[0])?,
        num(fields[1])?,
        num(fields[2])?,
        num(fields[3])?,
        int(fields[4])?,
        int(fields[5])?,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    let text = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Contiguous slice of map points contributed by one scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanRange {
    pub scan_id: u64,
    pub first: usize,
    pub count: usize,
}

impl ScanRange {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.first..self.first + self.count
    }
}

/// Row-major `N × dim` descriptor matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptors {
    dim: usize,
    data: Vec<f32>,
}

impl Descriptors {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || dim > u16::MAX as usize {
            return Err(Error::domain(format!("descriptor width {dim} is out of range")));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::domain("descriptor data is not a whole number of rows"));
        }
        Ok(Descriptors { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Accumulated world-frame points with per-scan provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudMap {
    positions: Vec<[f32; 3]>,
    colors: Option<Vec<[f32; 3]>>,
    descriptors: Option<Descriptors>,
    scan_ranges: Vec<ScanRange>,
}

impl PointCloudMap {
    pub fn new(positions: Vec<[f32; 3]>, scan_ranges: Vec<ScanRange>) -> Result<Self> {
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("map positions must be finite"));
        }
        let mut next = 0usize;
        for (i, r) in scan_ranges.iter().enumerate() {
            if r.first != next {
                return Err(Error::domain(format!(
                    "scan range {i} starts at {} but the previous one ends at {next}",
                    r.first
                )));
            }
            if i > 0 && scan_ranges[i - 1].scan_id >= r.scan_id {
                return Err(Error::domain("scan ranges are not sorted by scan id"));
            }
            next += r.count;
        }
        if next != positions.len() {
            return Err(Error::domain(format!(
                "scan ranges cover {next} points but the map has {}",
                positions.len()
            )));
        }
        Ok(PointCloudMap {
            positions,
            colors: None,
            descriptors: None,
            scan_ranges,
        })
    }

    /// Attaches colors; each must be in `[0, 1]` or equal [`NO_COLOR`].
    pub fn with_colors(mut self, colors: Vec<[f32; 3]>) -> Result<Self> {
        if colors.len() != self.len() {
            return Err(Error::domain("color count differs from point count"));
        }
        let ok = |c: &[f32; 3]| *c == NO_COLOR || c.iter().all(|v| (0.0..=1.0).contains(v));
        if !colors.iter().all(ok) {
            return Err(Error::domain("colors must lie in [0, 1]"));
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_descriptors(mut self, descriptors: Descriptors) -> Result<Self> {
        if descriptors.rows() != self.len() {
            return Err(Error::domain("descriptor rows differ from point count"));
        }
        self.descriptors = Some(descriptors);
        Ok(self)
    }

    /// Fills descriptors with seeded uniform values in `[-1, 1]`, the usual
    /// starting point before they are optimized.
    pub fn with_random_descriptors(self, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..self.len() * dim)
            .map(|_| rng.gen_range(-1.0f32..=1.0))
            .collect();
        let d = Descriptors::new(dim, data)?;
        self.with_descriptors(d)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[f32; 3]]> {
        self.colors.as_deref()
    }

    pub fn descriptors(&self) -> Option<&Descriptors> {
        self.descriptors.as_ref()
    }

    pub fn scan_ranges(&self) -> &[ScanRange] {
        &self.scan_ranges
    }

    pub fn scan_range(&self, scan_id: u64) -> Option<&ScanRange> {
        self.scan_ranges
            .binary_search_by_key(&scan_id, |r| r.scan_id)
            .ok()
            .map(|i| &self.scan_ranges[i])
    }

    /// Scan id owning point `index`.
    pub fn scan_of(&self, index: usize) -> Option<u64> {
        let i = self.scan_ranges.partition_point(|r| r.first + r.count <= index);
        self.scan_ranges
            .get(i)
            .filter(|r| r.range().contains(&index))
            .map(|r| r.scan_id)
    }

    #[inline]
    pub fn position(&self, i: usize) -> [f64; 3] {
        let p = self.positions[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }
}

/// Transforms every scan into the world frame and concatenates them in
/// scan-id order.
pub fn accumulate(scans: &[Scan], sensor_poses: &[Pose]) -> Result<PointCloudMap> {
    accumulate_with_extrinsic(scans, sensor_poses, None)
}

/// Like [`accumulate`], with an optional LiDAR-to-pose extrinsic applied to
/// each point before its pose.
pub fn accumulate_with_extrinsic(
    scans: &[Scan],
    sensor_poses: &[Pose],
    extrinsic: Option<&Pose>,
) -> Result<PointCloudMap> {
    if scans.len() != sensor_poses.len() {
        return Err(Error::domain(format!(
            "{} scans but {} poses",
            scans.len(),
            sensor_poses.len()
        )));
    }
    let mut order: Vec<usize> = (0..scans.len()).collect();
    order.sort_by_key(|&i| scans[i].scan_id);
    if let Some(w) = order.windows(2).find(|w| scans[w[0]].scan_id == scans[w[1]].scan_id) {
        return Err(Error::domain(format!("duplicate scan id {}", scans[w[0]].scan_id)));
    }
    let world: Vec<Vec<[f32; 3]>> = order
        .par_iter()
        .map(|&i| {
            let pose = match extrinsic {
                Some(e) => sensor_poses[i].compose(e),
                None => sensor_poses[i].clone(),
            };
            scans[i]
                .points
                .iter()
                .map(|p| {
                    let w = pose.local_to_world(&Vec3::new(p[0], p[1], p[2]));
                    [w[0] as f32, w[1] as f32, w[2] as f32]
                })
                .collect()
        })
        .collect();
    let mut positions = Vec::with_capacity(world.iter().map(Vec::len).sum());
    let mut ranges = Vec::with_capacity(scans.len());
    for (&i, pts) in order.iter().zip(world) {
        ranges.push(ScanRange {
            scan_id: scans[i].scan_id,
            first: positions.len(),
            count: pts.len(),
        });
        positions.extend(pts);
    }
    PointCloudMap::new(positions, ranges)
}

/// Assigns each point the nearest-pixel color of its own frame's reference
/// image. Points behind that camera, outside the image, or whose frame has no
/// image get [`NO_COLOR`].
pub fn colorize(
    map: PointCloudMap,
    frames: &[(u64, Pose)],
    k: &Intrinsics,
    images: &BTreeMap<u64, RgbImage>,
) -> Result<PointCloudMap> {
    if let Some(img) = images.values().find(|i| i.width() != k.width || i.height() != k.height) {
        return Err(Error::domain(format!(
            "reference image is {}x{}, intrinsics expect {}x{}",
            img.width(),
            img.height(),
            k.width,
            k.height
        )));
    }
    let poses: BTreeMap<u64, &Pose> = frames.iter().map(|(id, p)| (*id, p)).collect();
    let mut colors = vec![NO_COLOR; map.len()];
    for r in map.scan_ranges() {
        let (Some(pose), Some(img)) = (poses.get(&r.scan_id), images.get(&r.scan_id)) else {
            continue;
        };
        let tf = pose.transform();
        for i in r.range() {
            let c = tf.apply(map.position(i));
            let Some((u, v)) = k.project_raw(c[0], c[1], c[2]) else {
                continue;
            };
            if let Some((x, y)) = k.pixel(u, v) {
                colors[i] = img.get(x, y);
            }
        }
    }
    map.with_colors(colors)
}

/// Posed frames plus the map they observe.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<(u64, Pose)>,
    pub intrinsics: Intrinsics,
    pub map: PointCloudMap,
}

impl Sequence {
    pub fn new(frames: Vec<(u64, Pose)>, intrinsics: Intrinsics, map: PointCloudMap) -> Result<Self> {
        if let Some(w) = frames.windows(2).find(|w| w[0].0 >= w[1].0) {
            return Err(Error::domain(format!(
                "frame ids must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
        Ok(Sequence {
            frames,
            intrinsics,
            map,
        })
    }

    pub fn pose(&self, frame_id: u64) -> Option<&Pose> {
        self.frames
            .binary_search_by_key(&frame_id, |(id, _)| *id)
            .ok()
            .map(|i| &self.frames[i].1)
    }
}

/// Every 10th position (0-based) goes to the test list, the rest to train.
pub fn split_train_test(frame_ids: &[u64]) -> Result<(Vec<u64>, Vec<u64>)> {
    if frame_ids.is_empty() {
        return Err(Error::domain("cannot split an empty frame list"));
    }
    let (test, train): (Vec<_>, Vec<_>) = frame_ids
        .iter()
        .enumerate()
        .partition(|(pos, _)| pos % 10 == 0);
    Ok((
        train.into_iter().map(|(_, &id)| id).collect(),
        test.into_iter().map(|(_, &id)| id).collect(),
    ))
}

pub fn save_map(path: &Path, map: &PointCloudMap) -> Result<()> {
    write_file(path, |w| {
        w.bytes(MAP_MAGIC)?;
        w.u16(MAP_VERSION)?;
        w.u64(map.len() as u64)?;
        w.u16(map.descriptors.as_ref().map_or(0, |d| d.dim as u16))?;
        let mut flags = 0u8;
        if map.colors.is_some() {
            flags |= FLAG_COLORS;
        }
        if map.descriptors.is_some() {
            flags |= FLAG_DESCRIPTORS;
        }
        w.u8(flags)?;
        w.u64(map.scan_ranges.len() as u64)?;
        for r in &map.scan_ranges {
            w.u64(r.scan_id)?;
            w.u64(r.first as u64)?;
            w.u64(r.count as u64)?;
        }
        w.f32s(map.positions.as_flattened())?;
        if let Some(c) = &map.colors {
            w.f32s(c.as_flattened())?;
        }
        if let Some(d) = &map.descriptors {
            w.f32s(&d.data)?;
        }
        Ok(())
    })
}

fn triples(v: Vec<f32>) -> Vec<[f32; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn load_map(path: &Path) -> Result<PointCloudMap> {
    let data = read_file(path)?;
    let mut r = Reader::new(path, &data);
    r.header(MAP_MAGIC, MAP_VERSION)?;
    let n = usize::try_from(r.u64()?).map_err(|_| r.err("point count overflows"))?;
    let dim = r.u16()? as usize;
    let flags = r.u8()?;
    if flags & !(FLAG_COLORS | FLAG_DESCRIPTORS) != 0 {
        return Err(r.err(format!("unknown flag bits {flags:#04x}")));
    }
    let range_count = r.u64()? as usize;
    // each range entry is 24 bytes; bound the allocation by the file size
    if range_count > data.len() / 24 {
        return Err(r.err(format!("scan range count {range_count} exceeds file size")));
    }
    let mut ranges = Vec::with_capacity(range_count);
    for _ in 0..range_count {
        ranges.push(ScanRange {
            scan_id: r.u64()?,
            first: r.u64()? as usize,
            count: r.u64()? as usize,
        });
    }
    let len3 = n.checked_mul(3).ok_or_else(|| r.err("point count overflows"))?;
    let positions = triples(r.f32s(len3)?);
    let colors = if flags & FLAG_COLORS != 0 {
        Some(triples(r.f32s(len3)?))
    } else {
        None
    };
    let descriptors = if flags & FLAG_DESCRIPTORS != 0 {
        let count = n.checked_mul(dim).ok_or_else(|| r.err("descriptor size overflows"))?;
        Some(r.f32s(count)?)
    } else {
        None
    };
    r.expect_end()?;
    let bad = |e: Error| Error::format(path, e.to_string());
    let mut map = PointCloudMap::new(positions, ranges).map_err(bad)?;
    if let Some(c) = colors {
        map = map.with_colors(c).map_err(bad)?;
    }
    if let Some(d) = descriptors {
        map = map
            .with_descriptors(Descriptors::new(dim, d).map_err(bad)?)
            .map_err(bad)?;
    }
    Ok(map)
}
