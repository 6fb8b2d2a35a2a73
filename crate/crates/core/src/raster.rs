//! Point rasterization into feature images and multi-resolution pyramids.
//!
//! Every point covers exactly one pixel at every level. Level `t` has
//! `⌊H/2^t⌋ × ⌊W/2^t⌋` pixels and keeps, per pixel, the attribute vector of
//! the nearest point binned there. Empty pixels have zero features, infinite
//! depth and a cleared mask bit.

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, MAGIC_LEN};
use crate::connectivity::Candidates;
use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose};
use crate::ingest::PointCloudMap;
use crate::zbuffer::{self, Segment, ZBuffer};

/// Levels rasterized by default: 1..=5 form the pyramid proper, level 0 is
/// the full-resolution image used by the renderer.
pub const DEFAULT_LEVELS: [u32; 6] = [0, 1, 2, 3, 4, 5];

pub const RASTER_MAGIC: &[u8; MAGIC_LEN] = b"CENPBG-RAS\0";
pub const RASTER_VERSION: u16 = 1;

/// Which per-point attribute fills the feature channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    /// RGB, 3 channels.
    Color,
    /// The map's descriptor vectors.
    Descriptor,
}

impl Channels {
    /// Channel count for `map`, or an error when the map lacks the attribute.
    pub fn width_for(self, map: &PointCloudMap) -> Result<usize> {
        match self {
            Channels::Color => map
                .colors()
                .map(|_| 3)
                .ok_or_else(|| Error::domain("map has no colors")),
            Channels::Descriptor => map
                .descriptors()
                .map(|d| d.dim())
                .ok_or_else(|| Error::domain("map has no descriptors")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub level: u32,
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    /// `height × width × channels`, row-major.
    pub features: Vec<f32>,
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
}

impl RasterImage {
    pub fn empty(level: u32, width: u32, height: u32, channels: usize) -> Self {
        let n = width as usize * height as usize;
        RasterImage {
            level,
            width,
            height,
            channels,
            features: vec![0.0; n * channels],
            depth: vec![f32::INFINITY; n],
            mask: vec![false; n],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.len()
    }

    #[inline]
    pub fn feature(&self, x: u32, y: u32) -> &[f32] {
        let p = y as usize * self.width as usize + x as usize;
        &self.features[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn is_masked(&self, x: u32, y: u32) -> bool {
        self.mask[y as usize * self.width as usize + x as usize]
    }

    fn from_zbuffer(level: u32, buf: &ZBuffer, map: &PointCloudMap, channels: Channels, c: usize) -> Self {
        let mut img = RasterImage::empty(level, buf.width, buf.height, c);
        for (p, depth, i) in buf.winners() {
            img.mask[p] = true;
            img.depth[p] = depth as f32;
            let dst = &mut img.features[p * c..(p + 1) * c];
            match channels {
                Channels::Color => dst.copy_from_slice(&map.colors().unwrap()[i]),
                Channels::Descriptor => dst.copy_from_slice(map.descriptors().unwrap().row(i)),
            }
        }
        img
    }
}

/// Stack of raster images at increasing `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterPyramid {
    pub levels: Vec<RasterImage>,
    /// Frame whose connectivity window produced the points, if any.
    pub source_frame: Option<u64>,
}

impl RasterPyramid {
    pub fn new(levels: Vec<RasterImage>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::domain("pyramid needs at least one level"));
        }
        if levels.windows(2).any(|w| w[0].level >= w[1].level) {
            return Err(Error::domain("pyramid levels must be strictly increasing"));
        }
        if levels.iter().any(|l| l.channels != levels[0].channels) {
            return Err(Error::domain("pyramid levels disagree on channel count"));
        }
        Ok(RasterPyramid {
            levels,
            source_frame: None,
        })
    }

    pub fn level(&self, t: u32) -> Option<&RasterImage> {
        self.levels.iter().find(|l| l.level == t)
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels
    }
}

fn run(
    map: &PointCloudMap,
    segments: &[Segment<'_>],
    pose: &Pose,
    k: &Intrinsics,
    levels: &[u32],
    channels: Channels,
) -> Result<Vec<RasterImage>> {
    let c = channels.width_for(map)?;
    for &t in levels {
        k.scale(t)?;
    }
    let bufs = zbuffer::build(map, segments, &pose.transform(), k, levels);
    Ok(levels
        .iter()
        .zip(&bufs)
        .map(|(&t, b)| RasterImage::from_zbuffer(t, b, map, channels, c))
        .collect())
}

fn check_indices(map: &PointCloudMap, indices: &[usize]) -> Result<()> {
    match indices.iter().find(|&&i| i >= map.len()) {
        Some(i) => Err(Error::domain(format!("point index {i} outside map of {}", map.len()))),
        None => Ok(()),
    }
}

/// Rasterizes the listed points at level `t`.
pub fn rasterize(
    map: &PointCloudMap,
    indices: &[usize],
    pose: &Pose,
    k: &Intrinsics,
    level: u32,
    channels: Channels,
) -> Result<RasterImage> {
    check_indices(map, indices)?;
    let mut out = run(map, &zbuffer::slice_segments(indices), pose, k, &[level], channels)?;
    Ok(out.pop().unwrap())
}

/// [`rasterize`] over a candidate set (e.g. raw map ranges).
pub fn rasterize_candidates(
    map: &PointCloudMap,
    candidates: &Candidates,
    pose: &Pose,
    k: &Intrinsics,
    level: u32,
    channels: Channels,
) -> Result<RasterImage> {
    if let Candidates::Indices(v) = candidates {
        check_indices(map, v)?;
    } else if candidates.iter().any(|i| i >= map.len()) {
        return Err(Error::domain("candidate range exceeds the map"));
    }
    let mut out = run(map, &candidates.segments(), pose, k, &[level], channels)?;
    Ok(out.pop().unwrap())
}

/// One raster per requested level, sharing a single projection pass.
pub fn rasterize_pyramid(
    map: &PointCloudMap,
    indices: &[usize],
    pose: &Pose,
    k: &Intrinsics,
    levels: &[u32],
    channels: Channels,
) -> Result<RasterPyramid> {
    if levels.is_empty() {
        return Err(Error::domain("level set is empty"));
    }
    check_indices(map, indices)?;
    let mut levels = levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let images = run(map, &zbuffer::slice_segments(indices), pose, k, &levels, channels)?;
    RasterPyramid::new(images)
}

/// Fraction of masked pixels.
pub fn occupancy(image: &RasterImage) -> f64 {
    if image.mask.is_empty() {
        return 0.0;
    }
    image.mask.iter().filter(|&&m| m).count() as f64 / image.mask.len() as f64
}

pub fn save_raster(path: &Path, image: &RasterImage) -> Result<()> {
    let level = u16::try_from(image.level).map_err(|_| Error::domain("level too large"))?;
    let channels = u16::try_from(image.channels).map_err(|_| Error::domain("too many channels"))?;
    write_file(path, |w| {
        w.bytes(RASTER_MAGIC)?;
        w.u16(RASTER_VERSION)?;
        w.u16(level)?;
        w.u32(image.height)?;
        w.u32(image.width)?;
        w.u16(channels)?;
        let mut bits = vec![0u8; image.mask.len().div_ceil(8)];
        for (i, _) in image.mask.iter().enumerate().filter(|(_, &m)| m) {
            bits[i / 8] |= 1 << (i % 8);
        }
        w.bytes(&bits)?;
        w.f32s(&image.depth)?;
        w.f32s(&image.features)
    })
}

pub fn load_raster(path: &Path) -> Result<RasterImage> {
    let data = read_file(path)?;
    let mut r = Reader::new(path, &data);
    r.header(RASTER_MAGIC, RASTER_VERSION)?;
    let level = r.u16()? as u32;
    let height = r.u32()?;
    let width = r.u32()?;
    let channels = r.u16()? as usize;
    let n = width as usize * height as usize;
    if n > data.len() {
        return Err(r.err(format!("{width}x{height} raster exceeds file size")));
    }
    let bits = r.take(n.div_ceil(8))?;
    let mask: Vec<bool> = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    let depth = r.f32s(n)?;
    let features = r.f32s(n * channels)?;
    r.expect_end()?;
    if mask.iter().zip(&depth).any(|(&m, &d)| m != (d < f32::INFINITY)) {
        return Err(Error::format(path, "mask disagrees with depth"));
    }
    Ok(RasterImage {
        level,
        width,
        height,
        channels,
        features,
        depth,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::prune_visible;
    use crate::geom::Vec3;
    use crate::ingest::ScanRange;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn colored_map(points: Vec<[f32; 3]>, colors: Vec<[f32; 3]>) -> PointCloudMap {
        let n = points.len();
        PointCloudMap::new(points, vec![ScanRange { scan_id: 0, first: 0, count: n }])
            .unwrap()
            .with_colors(colors)
            .unwrap()
    }

    fn k64() -> Intrinsics {
        Intrinsics::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn single_point_on_axis() {
        let map = colored_map(vec![[0.0, 0.0, 4.0]], vec![[0.2, 0.4, 0.6]]);
        let img = rasterize(&map, &[0], &Pose::identity(), &k64(), 0, Channels::Color).unwrap();
        assert_eq!(img.mask.iter().filter(|&&m| m).count(), 1);
        assert!(img.is_masked(32, 32));
        assert_eq!(img.feature(32, 32), &[0.2, 0.4, 0.6]);
        assert_eq!(img.depth[32 * 64 + 32], 4.0);
    }

    #[test]
    fn nearer_point_wins() {
        let map = colored_map(
            vec![[0.0, 0.0, 3.0], [0.0, 0.0, 2.0]],
            vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        );
        let img = rasterize(&map, &[0, 1], &Pose::identity(), &k64(), 0, Channels::Color).unwrap();
        assert_eq!(img.feature(32, 32), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_attributes_are_domain_errors() {
        let map = colored_map(vec![[0.0, 0.0, 3.0]], vec![[1.0, 0.0, 0.0]]);
        let e = rasterize(&map, &[0], &Pose::identity(), &k64(), 0, Channels::Descriptor);
        assert!(matches!(e, Err(Error::Domain(_))));
        let e = rasterize(&map, &[3], &Pose::identity(), &k64(), 0, Channels::Color);
        assert!(matches!(e, Err(Error::Domain(_))));
    }

    /// Exhaustive per-pixel minimum, written independently of the z-buffer.
    fn oracle_raster(map: &PointCloudMap, k: &Intrinsics) -> RasterImage {
        let mut img = RasterImage::empty(0, k.width, k.height, 3);
        for y in 0..k.height {
            for x in 0..k.width {
                let mut best: Option<(f64, usize)> = None;
                for i in 0..map.len() {
                    let [px, py, pz] = map.position(i);
                    if pz <= 0.0 {
                        continue;
                    }
                    let u = k.fx * (px / pz) + k.cx;
                    let v = k.fy * (py / pz) + k.cy;
                    if u.floor() != x as f64 || v.floor() != y as f64 {
                        continue;
                    }
                    if best.is_none_or(|(d, j)| pz < d || (pz == d && i < j)) {
                        best = Some((pz, i));
                    }
                }
                if let Some((d, i)) = best {
                    let p = (y * k.width + x) as usize;
                    img.mask[p] = true;
                    img.depth[p] = d as f32;
                    img.features[p * 3..p * 3 + 3].copy_from_slice(&map.colors().unwrap()[i]);
                }
            }
        }
        img
    }

    #[test]
    fn random_points_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Intrinsics::new(24.0, 24.0, 16.0, 12.0, 32, 24).unwrap();
        let n = 10_000;
        // coarse depth quantization forces many exact depth ties
        let pts: Vec<[f32; 3]> = (0..n)
            .map(|_| {
                let z = rng.gen_range(1..8) as f32 * 0.5;
                [rng.gen_range(-1.0..1.0) * z, rng.gen_range(-0.8..0.8) * z, z]
            })
            .collect();
        let cols: Vec<[f32; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let map = colored_map(pts, cols);
        let all: Vec<usize> = (0..n).collect();
        let got = rasterize(&map, &all, &Pose::identity(), &k, 0, Channels::Color).unwrap();
        assert_eq!(got, oracle_raster(&map, &k));
    }

    #[test]
    fn pyramid_dims_follow_halving() {
        let k = Intrinsics::new(500.0, 500.0, 512.0, 256.0, 1024, 512).unwrap();
        let map = colored_map(vec![], vec![]);
        let p = rasterize_pyramid(&map, &[], &Pose::identity(), &k, &[1, 2, 3, 4, 5], Channels::Color).unwrap();
        let dims: Vec<(u32, u32)> = p.levels.iter().map(|l| (l.height, l.width)).collect();
        assert_eq!(dims, vec![(256, 512), (128, 256), (64, 128), (32, 64), (16, 32)]);
        assert!(p.levels.iter().all(|l| occupancy(l) == 0.0));
        assert!(rasterize_pyramid(&map, &[], &Pose::identity(), &k, &[], Channels::Color).is_err());
        assert!(rasterize_pyramid(&map, &[], &Pose::identity(), &k, &[11], Channels::Color).is_err());
    }

    #[test]
    fn dense_grid_saturates_every_level() {
        let (w, h) = (1024u32, 512u32);
        let k = Intrinsics::new(100.0, 100.0, 0.0, 0.0, w, h).unwrap();
        // one point at every full-resolution pixel center, depth 1
        let pts: Vec<[f32; 3]> = (0..h)
            .flat_map(|y| (0..w).map(move |x| [(x as f32 + 0.5) / 100.0, (y as f32 + 0.5) / 100.0, 1.0]))
            .collect();
        let n = pts.len();
        let map = colored_map(pts, vec![[0.5; 3]; n]);
        let all: Vec<usize> = (0..n).collect();
        let p = rasterize_pyramid(&map, &all, &Pose::identity(), &k, &DEFAULT_LEVELS, Channels::Color).unwrap();
        for l in &p.levels {
            assert_eq!(occupancy(l), 1.0, "level {}", l.level);
        }
    }

    #[test]
    fn occupancy_examples() {
        let mut img = RasterImage::empty(5, 32, 16, 3);
        assert_eq!(occupancy(&img), 0.0);
        img.mask[7] = true;
        assert_eq!(occupancy(&img), 1.0 / 512.0);
        img.mask.iter_mut().for_each(|m| *m = true);
        assert_eq!(occupancy(&img), 1.0);
    }

    #[test]
    fn descriptor_channels_are_copied_verbatim() {
        let map = colored_map(vec![[0.0, 0.0, 2.0], [0.5, 0.0, 2.0]], vec![[0.0; 3]; 2])
            .with_random_descriptors(8, 3)
            .unwrap();
        let img = rasterize(&map, &[0, 1], &Pose::identity(), &k64(), 1, Channels::Descriptor).unwrap();
        assert_eq!(img.channels, 8);
        assert_eq!(img.feature(16, 16), map.descriptors().unwrap().row(0));
    }

    #[test]
    fn raster_dump_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let map = colored_map(vec![[0.0, 0.0, 2.0], [0.3, 0.1, 5.0]], vec![[0.1, 0.2, 0.3], [1.0, 0.0, 0.5]]);
        let img = rasterize(&map, &[0, 1], &Pose::identity(), &k64(), 1, Channels::Color).unwrap();
        let path = dir.path().join("r.ras");
        save_raster(&path, &img).unwrap();
        assert_eq!(load_raster(&path).unwrap(), img);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_raster(&path), Err(Error::Format { .. })));
        bytes[3] ^= 0xff;
        bytes[MAGIC_LEN] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_raster(&path), Err(Error::UnsupportedVersion { found: 9, .. })));
    }

    fn random_scene(seed: u64, n: usize) -> PointCloudMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f32; 3]> = (0..n)
            .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-10.0..10.0), rng.gen_range(-5.0..40.0)])
            .collect();
        let cols = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        colored_map(pts, cols)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn coarser_levels_never_lose_coverage(seed in any::<u64>(), n in 0usize..3000) {
            let map = random_scene(seed, n);
            let k = Intrinsics::new(200.0, 200.0, 256.0, 128.0, 512, 256).unwrap();
            let all: Vec<usize> = (0..n).collect();
            let p = rasterize_pyramid(&map, &all, &Pose::identity(), &k, &DEFAULT_LEVELS, Channels::Color).unwrap();
            for w in p.levels.windows(2) {
                prop_assert!(occupancy(&w[1]) >= occupancy(&w[0]));
            }
        }

        #[test]
        fn masked_depth_matches_the_stored_point(seed in any::<u64>()) {
            let map = random_scene(seed, 2000);
            let k = Intrinsics::new(200.0, 200.0, 256.0, 128.0, 512, 256).unwrap();
            let pose = Pose::from_translation(Vec3::new(1.0, 0.5, -2.0)).unwrap();
            let all: Vec<usize> = (0..map.len()).collect();
            let img = rasterize(&map, &all, &pose, &k, 0, Channels::Color).unwrap();
            let vis = prune_visible(&Candidates::all(&map), &map, &pose, &k);
            for (j, &i) in vis.point_indices.iter().enumerate() {
                let (x, y) = vis.pixel_of[j];
                let p = (y * k.width + x) as usize;
                prop_assert!(img.mask[p] && img.depth[p] > 0.0);
                let z = pose.world_to_camera(&Vec3::from(map.position(i))).unwrap().z;
                prop_assert!(((img.depth[p] as f64) - z).abs() <= 1e-6 * z.max(1.0));
                prop_assert_eq!(img.feature(x, y), &map.colors().unwrap()[i]);
            }
            prop_assert_eq!(vis.len(), img.mask.iter().filter(|&&m| m).count());
        }

        #[test]
        fn rasterizing_the_pruned_set_equals_rasterizing_all(seed in any::<u64>()) {
            let map = random_scene(seed, 3000);
            let k = Intrinsics::new(50.0, 50.0, 64.0, 32.0, 128, 64).unwrap();
            let pose = Pose::from_translation(Vec3::new(0.0, 0.0, -1.0)).unwrap();
            let cand = Candidates::all(&map);
            let vis = prune_visible(&cand, &map, &pose, &k);
            let a = rasterize(&map, &vis.point_indices, &pose, &k, 0, Channels::Color).unwrap();
            let b = rasterize_candidates(&map, &cand, &pose, &k, 0, Channels::Color).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
