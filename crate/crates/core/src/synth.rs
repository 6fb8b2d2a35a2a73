//! Synthetic street canyons with an exact ray-cast visibility oracle.
//!
//! A canyon is two parallel walls over a ground plane, optionally crossed by
//! opaque rectangles. Surfaces are sampled on a jittered grid, and each scan
//! holds the samples within LiDAR range of its frame. Because the geometry is
//! analytic, both per-point visibility and the ground-truth image of any view
//! can be computed exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::connectivity::Candidates;
use crate::error::{Error, Result};
use crate::geom::{pixel_in, Intrinsics, Pose, Vec3};
use crate::image::RgbImage;
use crate::ingest::{
    accumulate, read_intrinsics, read_poses, read_scan_dir, write_intrinsics, write_poses, write_scan,
    PointCloudMap, Scan, ScanRange, Sequence,
};

/// Segment-parameter margin below 1 that separates occluders from the
/// point's own surface.
pub const ORACLE_EPSILON: f64 = 1e-4;

const OCCLUDER_PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.2, 0.15],
    [0.15, 0.7, 0.3],
    [0.2, 0.3, 0.85],
    [0.85, 0.75, 0.15],
    [0.7, 0.2, 0.75],
    [0.1, 0.75, 0.8],
];

/// Parallelogram `origin + a·edge_u + b·edge_v`, `(a, b) ∈ [0, 1]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rect3 {
    pub origin: Vec3,
    pub edge_u: Vec3,
    pub edge_v: Vec3,
    pub color: [f32; 3],
}

impl Rect3 {
    pub fn new(origin: Vec3, edge_u: Vec3, edge_v: Vec3, color: [f32; 3]) -> Result<Self> {
        let n = edge_u.cross(&edge_v).norm();
        if !(n > 1e-12 * edge_u.norm() * edge_v.norm()) {
            return Err(Error::domain("rectangle edges are parallel or zero"));
        }
        if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::domain(format!("rectangle color {color:?} outside [0, 1]")));
        }
        Ok(Rect3 {
            origin,
            edge_u,
            edge_v,
            color,
        })
    }

    pub fn normal(&self) -> Vec3 {
        self.edge_u.cross(&self.edge_v)
    }

    pub fn point_at(&self, a: f64, b: f64) -> Vec3 {
        self.origin + a * self.edge_u + b * self.edge_v
    }

    /// Coordinates `(a, b)` of the orthogonal projection of `p` on the plane.
    pub fn local_coords(&self, p: &Vec3) -> (f64, f64) {
        let d = p - self.origin;
        let (uu, uv, vv) = (
            self.edge_u.dot(&self.edge_u),
            self.edge_u.dot(&self.edge_v),
            self.edge_v.dot(&self.edge_v),
        );
        let (du, dv) = (d.dot(&self.edge_u), d.dot(&self.edge_v));
        let det = uu * vv - uv * uv;
        ((du * vv - dv * uv) / det, (dv * uu - du * uv) / det)
    }

    /// Shaded color at local coordinates: the base color under a soft
    /// sinusoidal pattern measured in meters along each edge.
    pub fn texture(&self, a: f64, b: f64) -> [f32; 3] {
        let (x, y) = (a * self.edge_u.norm(), b * self.edge_v.norm());
        let tau = std::f64::consts::TAU;
        let shade = 1.0 + 0.12 * (tau * x / 7.0).sin() * (tau * y / 5.0).cos();
        self.color.map(|c| ((c as f64) * shade).clamp(0.0, 1.0) as f32)
    }
}

/// Nearest hit of the ray `origin + t·dir`, `t > 0`, as `(t, a, b)`.
fn ray_hit(origin: &Vec3, dir: &Vec3, rect: &Rect3) -> Option<(f64, f64, f64)> {
    let n = rect.normal();
    let denom = n.dot(dir);
    if denom.abs() <= 1e-12 * n.norm() * dir.norm() {
        return None;
    }
    let t = n.dot(&(rect.origin - origin)) / denom;
    if !(t > 0.0) {
        return None;
    }
    let (a, b) = rect.local_coords(&(origin + t * dir));
    ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some((t, a, b))
}

/// Smallest `t ∈ (0, 1)` at which the segment `origin + t·dir` crosses the
/// rectangle, if any.
pub fn ray_rect_intersect(origin: &Vec3, dir: &Vec3, rect: &Rect3) -> Option<f64> {
    ray_hit(origin, dir, rect).map(|h| h.0).filter(|&t| t < 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CanyonParams {
    /// Distance covered by the camera, meters.
    pub length: f64,
    pub wall_gap: f64,
    pub wall_height: f64,
    /// Height of the camera above the ground.
    pub camera_height: f64,
    /// Grid spacing on walls and ground.
    pub point_spacing: f64,
    /// Grid spacing on occluders.
    pub occluder_spacing: f64,
    pub lidar_range: f64,
    pub frame_step: f64,
    pub occluders: usize,
    pub width: u32,
    pub height: u32,
    /// Focal length in pixels; the principal point is the image center.
    pub focal: f64,
    pub seed: u64,
}

impl Default for CanyonParams {
    fn default() -> Self {
        CanyonParams {
            length: 100.0,
            wall_gap: 10.0,
            wall_height: 8.0,
            camera_height: 1.6,
            point_spacing: 0.25,
            occluder_spacing: 1.2,
            lidar_range: 12.0,
            frame_step: 1.0,
            occluders: 0,
            width: 1024,
            height: 512,
            focal: 512.0,
            seed: 0,
        }
    }
}

impl CanyonParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("wall_gap", self.wall_gap),
            ("wall_height", self.wall_height),
            ("camera_height", self.camera_height),
            ("point_spacing", self.point_spacing),
            ("occluder_spacing", self.occluder_spacing),
            ("lidar_range", self.lidar_range),
            ("frame_step", self.frame_step),
            ("focal", self.focal),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::domain(format!("{name} must be positive, got {v}")));
        }
        if self.camera_height >= self.wall_height {
            return Err(Error::domain("camera must sit below the wall tops"));
        }
        if self.lidar_range <= self.wall_gap {
            return Err(Error::domain("lidar_range must exceed wall_gap"));
        }
        if self.point_spacing > self.wall_gap || self.occluder_spacing > self.wall_gap {
            return Err(Error::domain("degenerate scene: point spacing exceeds the wall gap"));
        }
        if self.frame_count() == 0 {
            return Err(Error::domain("length is shorter than one frame step"));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.length / self.frame_step).floor() as usize
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }

    /// Depth of occluder `i` along the corridor.
    pub fn occluder_z(&self, i: usize) -> f64 {
        self.length * (i + 1) as f64 / (self.occluders + 1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub surfaces: Vec<Rect3>,
    /// Camera poses, frame id `t` at index `t`.
    pub trajectory: Vec<Pose>,
    /// Sensor-frame samples; the LiDAR shares the camera pose.
    pub scans: Vec<Scan>,
    pub scan_colors: Vec<Vec<[f32; 3]>>,
    pub intrinsics: Intrinsics,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn frames(&self) -> Vec<(u64, Pose)> {
        self.trajectory
            .iter()
            .enumerate()
            .map(|(t, p)| (t as u64, p.clone()))
            .collect()
    }

    /// Accumulated map carrying surface colors.
    pub fn map(&self) -> Result<PointCloudMap> {
        let map = accumulate(&self.scans, &self.trajectory)?;
        map.with_colors(self.scan_colors.concat())
    }

    pub fn sequence(&self) -> Result<Sequence> {
        Sequence::new(self.frames(), self.intrinsics, self.map()?)
    }
}

/// Surfaces of the canyon: left wall, right wall, ground, then occluders.
pub fn canyon_surfaces(p: &CanyonParams) -> Result<Vec<Rect3>> {
    let half = p.wall_gap / 2.0;
    let (z0, z1) = (-p.lidar_range, p.length + p.lidar_range);
    let top = p.camera_height - p.wall_height;
    let along = Vec3::new(0.0, 0.0, z1 - z0);
    let up = Vec3::new(0.0, p.wall_height, 0.0);
    let mut out = vec![
        Rect3::new(Vec3::new(-half, top, z0), along, up, [0.62, 0.5, 0.4])?,
        Rect3::new(Vec3::new(half, top, z0), along, up, [0.42, 0.5, 0.6])?,
        Rect3::new(
            Vec3::new(-half, p.camera_height, z0),
            Vec3::new(p.wall_gap, 0.0, 0.0),
            along,
            [0.45, 0.46, 0.44],
        )?,
    ];
    for i in 0..p.occluders {
        out.push(Rect3::new(
            Vec3::new(-half, top, p.occluder_z(i)),
            Vec3::new(p.wall_gap, 0.0, 0.0),
            up,
            OCCLUDER_PALETTE[i % OCCLUDER_PALETTE.len()],
        )?);
    }
    Ok(out)
}

/// Jittered grid over a rectangle: one sample per cell, offset by up to a
/// quarter cell in each direction.
fn sample_rect(rect: &Rect3, spacing: f64, rng: &mut ChaCha8Rng) -> Vec<(Vec3, [f32; 3])> {
    let na = (rect.edge_u.norm() / spacing).ceil().max(1.0) as usize;
    let nb = (rect.edge_v.norm() / spacing).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(na * nb);
    for j in 0..nb {
        for i in 0..na {
            let a = (i as f64 + 0.5 + rng.gen_range(-0.25..0.25)) / na as f64;
            let b = (j as f64 + 0.5 + rng.gen_range(-0.25..0.25)) / nb as f64;
            out.push((rect.point_at(a, b), rect.texture(a, b)));
        }
    }
    out
}

pub fn make_canyon(p: &CanyonParams) -> Result<SyntheticScene> {
    p.validate()?;
    let surfaces = canyon_surfaces(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut samples: Vec<(Vec3, [f32; 3])> = Vec::new();
    for (i, rect) in surfaces.iter().enumerate() {
        let spacing = if i < 3 { p.point_spacing } else { p.occluder_spacing };
        samples.extend(sample_rect(rect, spacing, &mut rng));
    }
    samples.sort_by(|a, b| a.0.z.total_cmp(&b.0.z));
    let zs: Vec<f64> = samples.iter().map(|s| s.0.z).collect();

    let trajectory: Vec<Pose> = (0..p.frame_count())
        .map(|t| Ok(Pose::from_translation(Vec3::new(0.0, 0.0, t as f64 * p.frame_step))?.with_frame_id(t as u64)))
        .collect::<Result<_>>()?;
    let r2 = p.lidar_range * p.lidar_range;
    let per_frame: Vec<(Scan, Vec<[f32; 3]>)> = trajectory
        .par_iter()
        .enumerate()
        .map(|(t, pose)| {
            let c = pose.camera_center();
            let lo = zs.partition_point(|&z| z < c.z - p.lidar_range);
            let hi = zs.partition_point(|&z| z <= c.z + p.lidar_range);
            let (mut pts, mut cols) = (Vec::new(), Vec::new());
            for (q, col) in &samples[lo..hi] {
                let d = q - c;
                if d.norm_squared() <= r2 {
                    pts.push([d.x, d.y, d.z]);
                    cols.push(*col);
                }
            }
            (Scan::new(t as u64, pts).expect("finite samples"), cols)
        })
        .collect();
    let (scans, scan_colors) = per_frame.into_iter().unzip();
    Ok(SyntheticScene {
        surfaces,
        trajectory,
        scans,
        scan_colors,
        intrinsics: p.intrinsics()?,
        seed: p.seed,
    })
}

fn occluded(center: &Vec3, point: &Vec3, surfaces: &[Rect3]) -> bool {
    let dir = point - center;
    surfaces
        .iter()
        .any(|s| ray_rect_intersect(center, &dir, s).is_some_and(|t| t < 1.0 - ORACLE_EPSILON))
}

/// In front of the camera, inside the image, and not hidden by any surface.
pub fn oracle_visible(map: &PointCloudMap, index: usize, pose: &Pose, k: &Intrinsics, surfaces: &[Rect3]) -> bool {
    let p = map.position(index);
    let c = pose.transform().apply(p);
    let in_frustum = k
        .project_raw(c[0], c[1], c[2])
        .is_some_and(|(u, v)| pixel_in(u, v, k.width, k.height).is_some());
    in_frustum && !occluded(&pose.camera_center(), &Vec3::from(p), surfaces)
}

/// Oracle verdict for every candidate, in candidate order.
pub fn oracle_visibility(
    map: &PointCloudMap,
    candidates: &Candidates,
    pose: &Pose,
    k: &Intrinsics,
    surfaces: &[Rect3],
) -> Vec<bool> {
    let idx: Vec<usize> = candidates.iter().collect();
    idx.par_iter()
        .map(|&i| oracle_visible(map, i, pose, k, surfaces))
        .collect()
}

/// Ground-truth image: each pixel-center ray takes the texture of the first
/// surface it hits, or `background`.
pub fn paint(surfaces: &[Rect3], pose: &Pose, k: &Intrinsics, background: f32) -> Result<RgbImage> {
    let origin = pose.camera_center();
    let rot = *pose.rotation();
    let (w, h) = (k.width as usize, k.height as usize);
    let mut data = vec![0f32; w * h * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let d_cam = Vec3::new(
                (x as f64 + 0.5 - k.cx) / k.fx,
                (y as f64 + 0.5 - k.cy) / k.fy,
                1.0,
            );
            let dir = rot * d_cam;
            let hit = surfaces
                .iter()
                .filter_map(|s| ray_hit(&origin, &dir, s).map(|(t, a, b)| (t, s, a, b)))
                .min_by(|l, r| l.0.total_cmp(&r.0));
            let rgb = hit.map_or([background; 3], |(_, s, a, b)| s.texture(a, b));
            row[x * 3..x * 3 + 3].copy_from_slice(&rgb);
        }
    });
    RgbImage::from_data(k.width, k.height, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniformParams {
    pub scans: usize,
    pub points_per_scan: usize,
    /// Spacing between consecutive frames along the optical axis.
    pub step: f64,
    /// Half extents of the slab each scan fills, across and up.
    pub half_width: f64,
    pub half_height: f64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub seed: u64,
}

impl Default for UniformParams {
    fn default() -> Self {
        UniformParams {
            scans: 300,
            points_per_scan: 2000,
            step: 1.0,
            half_width: 10.0,
            half_height: 4.0,
            width: 1024,
            height: 512,
            focal: 512.0,
            seed: 0,
        }
    }
}

/// Straight trajectory where scan `t` holds `points_per_scan` uniform random
/// points in the slab one step long centered on frame `t`. Points carry random
/// colors.
pub fn uniform_sequence(p: &UniformParams) -> Result<Sequence> {
    if p.scans == 0 || !(p.step > 0.0 && p.half_width > 0.0 && p.half_height > 0.0) {
        return Err(Error::domain("uniform sequence parameters must be positive"));
    }
    let k = Intrinsics::new(p.focal, p.focal, p.width as f64 / 2.0, p.height as f64 / 2.0, p.width, p.height)?;
    let per_scan: Vec<(Vec<[f32; 3]>, Vec<[f32; 3]>)> = (0..p.scans)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            rng.set_stream(t as u64);
            let z = t as f64 * p.step;
            (0..p.points_per_scan)
                .map(|_| {
                    let q = [
                        rng.gen_range(-p.half_width..p.half_width) as f32,
                        rng.gen_range(-p.half_height..p.half_height) as f32,
                        (z + rng.gen_range(-0.5..0.5) * p.step) as f32,
                    ];
                    (q, [rng.gen(), rng.gen(), rng.gen()])
                })
                .unzip()
        })
        .collect();
    let mut positions = Vec::with_capacity(p.scans * p.points_per_scan);
    let mut colors = Vec::with_capacity(p.scans * p.points_per_scan);
    let mut ranges = Vec::with_capacity(p.scans);
    for (t, (pts, cols)) in per_scan.into_iter().enumerate() {
        ranges.push(ScanRange {
            scan_id: t as u64,
            first: positions.len(),
            count: pts.len(),
        });
        positions.extend(pts);
        colors.extend(cols);
    }
    let map = PointCloudMap::new(positions, ranges)?.with_colors(colors)?;
    let frames = (0..p.scans)
        .map(|t| {
            let pose = Pose::from_translation(Vec3::new(0.0, 0.0, t as f64 * p.step))?.with_frame_id(t as u64);
            Ok((t as u64, pose))
        })
        .collect::<Result<_>>()?;
    Sequence::new(frames, k, map)
}

pub const SURFACES_FILE: &str = "surfaces.txt";
pub const POSES_FILE: &str = "poses.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const SCAN_DIR: &str = "scans";

/// One JSON array per line: origin, edge_u, edge_v, then color.
pub fn write_surfaces(path: &Path, surfaces: &[Rect3], seed: u64) -> Result<()> {
    let mut text = format!("# seed {seed}\n");
    for s in surfaces {
        let v = [s.origin, s.edge_u, s.edge_v];
        let nums: Vec<String> = v
            .iter()
            .flat_map(|e| e.iter().map(|x| format!("{x:?}")))
            .chain(s.color.iter().map(|c| format!("{c:?}")))
            .collect();
        writeln!(text, "[{}]", nums.join(", ")).expect("writing to a String");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a surface manifest, returning the surfaces and the recorded seed.
pub fn read_surfaces(path: &Path) -> Result<(Vec<Rect3>, u64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seed = 0;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(s) = rest.trim().strip_prefix("seed") {
                seed = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(path, format!("line {}: bad seed", n + 1)))?;
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let body = line
            .strip_prefix('[')
            .and_then(|l| l.strip_suffix(']'))
            .ok_or_else(|| Error::format(path, format!("line {}: expected [ ... ]", n + 1)))?;
        let nums: Vec<f64> = body
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: bad number", n + 1)))?;
        if nums.len() != 12 {
            return Err(Error::format(path, format!("line {}: expected 12 values, got {}", n + 1, nums.len())));
        }
        let v = |i: usize| Vec3::new(nums[i], nums[i + 1], nums[i + 2]);
        let color = [nums[9] as f32, nums[10] as f32, nums[11] as f32];
        out.push(
            Rect3::new(v(0), v(3), v(6), color)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok((out, seed))
}

/// Writes scans, poses, intrinsics and the surface manifest under `dir`.
pub fn dump_scene(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    let scan_dir = dir.join(SCAN_DIR);
    fs::create_dir_all(&scan_dir).map_err(|e| Error::io(&scan_dir, e))?;
    scene
        .scans
        .par_iter()
        .try_for_each(|s| write_scan(&scan_dir.join(format!("{:06}.bin", s.scan_id)), s))?;
    write_poses(&dir.join(POSES_FILE), &scene.frames())?;
    write_intrinsics(&dir.join(INTRINSICS_FILE), &scene.intrinsics)?;
    write_surfaces(&dir.join(SURFACES_FILE), &scene.surfaces, scene.seed)
}

/// Color of the surface nearest to `p`.
pub fn surface_color_at(surfaces: &[Rect3], p: &Vec3) -> Option<[f32; 3]> {
    surfaces
        .iter()
        .map(|s| {
            let (a, b) = s.local_coords(p);
            let (a, b) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
            ((s.point_at(a, b) - p).norm(), s.texture(a, b))
        })
        .min_by(|l, r| l.0.total_cmp(&r.0))
        .map(|(_, c)| c)
}

/// Reads a scene written by [`dump_scene`]. Point colors are recovered from
/// the nearest surface.
pub fn load_scene(dir: &Path) -> Result<SyntheticScene> {
    let (surfaces, seed) = read_surfaces(&dir.join(SURFACES_FILE))?;
    let frames = read_poses(&dir.join(POSES_FILE))?;
    let intrinsics = read_intrinsics(&dir.join(INTRINSICS_FILE))?;
    let scans = read_scan_dir(&dir.join(SCAN_DIR))?;
    let mut trajectory = Vec::with_capacity(scans.len());
    for s in &scans {
        let pose = frames
            .iter()
            .find(|(id, _)| *id == s.scan_id)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| Error::format(dir.join(POSES_FILE), format!("no pose for scan {}", s.scan_id)))?;
        trajectory.push(pose);
    }
    let scan_colors = scans
        .par_iter()
        .zip(&trajectory)
        .map(|(s, pose)| {
            s.points
                .iter()
                .map(|q| surface_color_at(&surfaces, &pose.local_to_world(&Vec3::from(*q))).unwrap_or([0.5; 3]))
                .collect()
        })
        .collect();
    Ok(SyntheticScene {
        surfaces,
        trajectory,
        scans,
        scan_colors,
        intrinsics,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::prune_visible;
    use proptest::prelude::*;

    fn unit_square_at(z: f64) -> Rect3 {
        Rect3::new(
            Vec3::new(-1.0, -1.0, z),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            [0.5; 3],
        )
        .unwrap()
    }

    #[test]
    fn segment_through_center_hits_at_half() {
        let t = ray_rect_intersect(&Vec3::new(0.0, 0.0, -1.0), &Vec3::new(0.0, 0.0, 2.0), &unit_square_at(0.0));
        assert_eq!(t, Some(0.5));
    }

    #[test]
    fn parallel_and_short_segments_miss() {
        let r = unit_square_at(0.0);
        assert_eq!(ray_rect_intersect(&Vec3::new(0.0, 0.0, -1.0), &Vec3::new(1.0, 0.0, 0.0), &r), None);
        let short = Vec3::new(0.0, 0.0, 1.0 - 1e-9);
        assert_eq!(ray_rect_intersect(&Vec3::new(0.0, 0.0, -1.0), &short, &r), None);
        // outside the rectangle's extent
        assert_eq!(ray_rect_intersect(&Vec3::new(3.0, 0.0, -1.0), &Vec3::new(0.0, 0.0, 2.0), &r), None);
    }

    #[test]
    fn degenerate_rectangles_are_rejected() {
        let e = Vec3::new(1.0, 0.0, 0.0);
        assert!(Rect3::new(Vec3::zeros(), e, 2.0 * e, [0.0; 3]).is_err());
        assert!(Rect3::new(Vec3::zeros(), e, Vec3::y(), [1.5, 0.0, 0.0]).is_err());
    }

    fn single_point_map(p: [f32; 3]) -> PointCloudMap {
        PointCloudMap::new(vec![p], vec![ScanRange { scan_id: 0, first: 0, count: 1 }]).unwrap()
    }

    #[test]
    fn oracle_point_examples() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let map = single_point_map([0.0, 0.0, 10.0]);
        assert!(oracle_visible(&map, 0, &Pose::identity(), &k, &[]));
        assert!(!oracle_visible(&map, 0, &Pose::identity(), &k, &[unit_square_at(5.0)]));
        // a surface through the point itself does not occlude it
        assert!(oracle_visible(&map, 0, &Pose::identity(), &k, &[unit_square_at(10.0)]));
        let behind = single_point_map([0.0, 0.0, -10.0]);
        assert!(!oracle_visible(&behind, 0, &Pose::identity(), &k, &[]));
    }

    fn small_params(occluders: usize) -> CanyonParams {
        CanyonParams {
            length: 20.0,
            wall_gap: 6.0,
            wall_height: 4.0,
            point_spacing: 0.5,
            occluder_spacing: 0.8,
            lidar_range: 8.0,
            frame_step: 2.0,
            occluders,
            width: 160,
            height: 80,
            focal: 80.0,
            seed: 11,
            ..CanyonParams::default()
        }
    }

    #[test]
    fn frame_count_follows_length() {
        let p = CanyonParams {
            length: 100.0,
            frame_step: 1.0,
            point_spacing: 1.0,
            ..CanyonParams::default()
        };
        assert_eq!(make_canyon(&p).unwrap().trajectory.len(), 100);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let p = CanyonParams {
            point_spacing: 20.0,
            ..small_params(0)
        };
        assert!(matches!(make_canyon(&p), Err(Error::Domain(m)) if m.contains("degenerate")));
        let p = CanyonParams {
            lidar_range: 5.0,
            ..small_params(0)
        };
        assert!(make_canyon(&p).is_err());
        let p = CanyonParams {
            frame_step: 0.0,
            ..small_params(0)
        };
        assert!(make_canyon(&p).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_canyon(&small_params(2)).unwrap();
        let b = make_canyon(&small_params(2)).unwrap();
        assert_eq!(a.scans, b.scans);
        assert_eq!(a.scan_colors, b.scan_colors);
        let c = make_canyon(&CanyonParams { seed: 12, ..small_params(2) }).unwrap();
        assert_ne!(a.scans, c.scans);
    }

    #[test]
    fn scans_hold_exactly_the_samples_in_range() {
        let p = small_params(1);
        let scene = make_canyon(&p).unwrap();
        for (scan, pose) in scene.scans.iter().zip(&scene.trajectory) {
            assert!(!scan.is_empty());
            for q in &scan.points {
                let w = pose.local_to_world(&Vec3::from(*q));
                assert!(Vec3::from(*q).norm() <= p.lidar_range);
                let on_surface = scene.surfaces.iter().any(|s| {
                    let (a, b) = s.local_coords(&w);
                    (s.point_at(a, b) - w).norm() < 1e-6 && (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)
                });
                assert!(on_surface, "{w:?}");
            }
        }
        // consecutive scans overlap: range exceeds the step
        let first = &scene.scans[0].points;
        let second = &scene.scans[1].points;
        let shifted: Vec<[f64; 3]> = second.iter().map(|q| [q[0], q[1], q[2] + p.frame_step]).collect();
        assert!(first.iter().any(|q| shifted.iter().any(|s| (Vec3::from(*s) - Vec3::from(*q)).norm() < 1e-9)));
    }

    #[test]
    fn without_occluders_every_in_frustum_point_is_visible() {
        let scene = make_canyon(&small_params(0)).unwrap();
        let map = scene.map().unwrap();
        let k = scene.intrinsics;
        let pose = &scene.trajectory[3];
        let verdict = oracle_visibility(&map, &Candidates::all(&map), pose, &k, &scene.surfaces);
        let vis = prune_visible(&Candidates::all(&map), &map, pose, &k);
        for &i in &vis.point_indices {
            assert!(verdict[i]);
        }
        assert!(verdict.iter().filter(|&&v| v).count() >= vis.len());
    }

    /// Möller–Trumbore against the two triangles of each rectangle.
    fn segment_hits_triangles(o: &Vec3, d: &Vec3, r: &Rect3) -> Option<f64> {
        let tris = [
            (r.origin, r.origin + r.edge_u, r.origin + r.edge_v),
            (r.origin + r.edge_u + r.edge_v, r.origin + r.edge_v, r.origin + r.edge_u),
        ];
        let mut best: Option<f64> = None;
        for (a, b, c) in tris {
            let (e1, e2) = (b - a, c - a);
            let pv = d.cross(&e2);
            let det = e1.dot(&pv);
            if det.abs() < 1e-12 {
                continue;
            }
            let inv = 1.0 / det;
            let tv = o - a;
            let u = tv.dot(&pv) * inv;
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            let qv = tv.cross(&e1);
            let v = d.dot(&qv) * inv;
            if v < 0.0 || u + v > 1.0 {
                continue;
            }
            let t = e2.dot(&qv) * inv;
            if t > 0.0 && t < 1.0 && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
        best
    }

    fn triangle_oracle(map: &PointCloudMap, i: usize, pose: &Pose, k: &Intrinsics, surfaces: &[Rect3]) -> bool {
        let p = Vec3::from(map.position(i));
        let Ok(c) = pose.world_to_camera(&p) else { return false };
        let Some((u, v, _)) = k.project(&c).image() else { return false };
        if k.pixel(u, v).is_none() {
            return false;
        }
        let o = pose.camera_center();
        let d = p - o;
        !surfaces
            .iter()
            .any(|s| segment_hits_triangles(&o, &d, s).is_some_and(|t| t < 1.0 - ORACLE_EPSILON))
    }

    #[test]
    fn oracle_matches_triangle_implementation() {
        let scene = make_canyon(&small_params(2)).unwrap();
        let map = scene.map().unwrap();
        let k = scene.intrinsics;
        for pose in scene.trajectory.iter().step_by(3) {
            let got = oracle_visibility(&map, &Candidates::all(&map), pose, &k, &scene.surfaces);
            let want: Vec<bool> = (0..map.len())
                .map(|i| triangle_oracle(&map, i, pose, &k, &scene.surfaces))
                .collect();
            assert_eq!(got, want);
            assert!(got.iter().any(|&v| !v));
        }
    }

    #[test]
    fn painter_sees_the_first_occluder() {
        let p = small_params(1);
        let scene = make_canyon(&p).unwrap();
        let img = paint(&scene.surfaces, &scene.trajectory[0], &scene.intrinsics, 0.5).unwrap();
        let (cx, cy) = (p.width / 2, p.height / 2);
        let occ = &scene.surfaces[3];
        // the pixel-center ray is half a pixel off the optical axis
        let z = p.occluder_z(0);
        let hit = Vec3::new(0.5 / p.focal * z, 0.5 / p.focal * z, z);
        let (a, b) = occ.local_coords(&hit);
        assert_eq!(img.get(cx, cy), occ.texture(a, b));
    }

    #[test]
    fn scene_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = make_canyon(&small_params(2)).unwrap();
        dump_scene(&scene, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.surfaces, scene.surfaces);
        assert_eq!(back.seed, scene.seed);
        assert_eq!(back.trajectory, scene.trajectory);
        assert_eq!(back.scans.len(), scene.scans.len());
        for (a, b) in back.scans.iter().zip(&scene.scans) {
            assert_eq!(a.points.len(), b.points.len());
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((Vec3::from(*p) - Vec3::from(*q)).norm() < 1e-5);
            }
        }
        let close = back
            .scan_colors
            .concat()
            .iter()
            .zip(scene.scan_colors.concat())
            .filter(|(a, b)| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-3))
            .count();
        // only samples on surface seams can pick the neighboring surface
        assert!(close as f64 >= 0.99 * scene.scan_colors.concat().len() as f64);
    }

    #[test]
    fn uniform_sequence_has_equal_scans() {
        let p = UniformParams {
            scans: 12,
            points_per_scan: 50,
            ..UniformParams::default()
        };
        let s = uniform_sequence(&p).unwrap();
        assert_eq!(s.frames.len(), 12);
        assert!(s.map.scan_ranges().iter().all(|r| r.count == 50));
        assert_eq!(uniform_sequence(&p).unwrap().map, s.map);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn oracle_implies_frustum_and_adding_surfaces_only_hides(seed in any::<u64>(), frame in 0usize..10) {
            let p = CanyonParams { seed, ..small_params(1) };
            let scene = make_canyon(&p).unwrap();
            let map = scene.map().unwrap();
            let k = scene.intrinsics;
            let pose = &scene.trajectory[frame];
            let all = Candidates::all(&map);
            let base = oracle_visibility(&map, &all, pose, &k, &scene.surfaces);
            let mut more = scene.surfaces.clone();
            more.push(unit_square_at(pose.camera_center().z + 3.0));
            let fewer_visible = oracle_visibility(&map, &all, pose, &k, &more);
            let frustum = oracle_visibility(&map, &all, pose, &k, &[]);
            for i in 0..map.len() {
                prop_assert!(!base[i] || frustum[i]);
                prop_assert!(!fewer_visible[i] || base[i]);
            }
        }

        #[test]
        fn segment_hits_are_inside_the_rectangle(ox in -3.0f64..3.0, oy in -3.0f64..3.0, dx in -6.0f64..6.0, dy in -6.0f64..6.0) {
            let r = unit_square_at(1.0);
            let o = Vec3::new(ox, oy, 0.0);
            let d = Vec3::new(dx, dy, 2.0);
            if let Some(t) = ray_rect_intersect(&o, &d, &r) {
                let h = o + t * d;
                prop_assert!((t - 0.5).abs() < 1e-12);
                prop_assert!(h.x.abs() <= 1.0 + 1e-12 && h.y.abs() <= 1.0 + 1e-12);
            } else {
                let h = o + 0.5 * d;
                prop_assert!(h.x.abs() > 1.0 - 1e-12 || h.y.abs() > 1.0 - 1e-12);
            }
        }
    }
}
