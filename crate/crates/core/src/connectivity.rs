//! Frame-to-scan connectivity and per-view visibility pruning.
//!
//! The graph is built once per sequence: frame `t` is linked to scans
//! `[t − n, t + 2n]`, clamped to the scans that exist. At query time the
//! nearest frame (by camera center) supplies its window as candidates, and
//! [`prune_visible`] keeps the points that are in front of the camera, inside
//! the image, and nearest on their pixel.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use crate::binio::{read_file, write_file, Reader, MAGIC_LEN};
use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose};
use crate::ingest::{PointCloudMap, Sequence};
use crate::zbuffer;

pub use crate::zbuffer::Candidates;

/// Default number of scans behind the camera; `2n` are taken ahead.
pub const DEFAULT_WINDOW: u32 = 5;

pub const GRAPH_MAGIC: &[u8; MAGIC_LEN] = b"CENPBG-GRF\0";
pub const GRAPH_VERSION: u16 = 1;

/// Inclusive range of scan ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanWindow {
    pub first: u64,
    pub last: u64,
}

impl ScanWindow {
    pub fn contains(&self, scan_id: u64) -> bool {
        (self.first..=self.last).contains(&scan_id)
    }

    pub fn len(&self) -> u64 {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEntry {
    pub pose: Pose,
    pub window: ScanWindow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityGraph {
    entries: BTreeMap<u64, GraphEntry>,
    n: u32,
    built_over: u64,
}

impl ConnectivityGraph {
    pub fn entries(&self) -> &BTreeMap<u64, GraphEntry> {
        &self.entries
    }

    pub fn entry(&self, frame_id: u64) -> Option<&GraphEntry> {
        self.entries.get(&frame_id)
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    /// Number of scan ids spanned by the union of all windows.
    pub fn built_over(&self) -> u64 {
        self.built_over
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn from_entries(entries: BTreeMap<u64, GraphEntry>, n: u32) -> Self {
        let lo = entries.values().map(|e| e.window.first).min();
        let hi = entries.values().map(|e| e.window.last).max();
        let built_over = match (lo, hi) {
            (Some(lo), Some(hi)) => hi - lo + 1,
            _ => 0,
        };
        ConnectivityGraph {
            entries,
            n,
            built_over,
        }
    }
}

/// Links every frame to scans `[t − n, t + 2n]`, clamped to the sequence's
/// scan ids. Frame and scan ids share one index space.
pub fn build_graph(sequence: &Sequence, n: u32) -> Result<ConnectivityGraph> {
    build_graph_from_frames(&sequence.frames, &sequence.map, n)
}

/// [`build_graph`] over explicit posed frames.
pub fn build_graph_from_frames(frames: &[(u64, Pose)], map: &PointCloudMap, n: u32) -> Result<ConnectivityGraph> {
    if n == 0 {
        return Err(Error::domain("window parameter n must be positive"));
    }
    if frames.is_empty() {
        return Err(Error::domain("sequence has no frames"));
    }
    let ranges = map.scan_ranges();
    let (Some(lo), Some(hi)) = (ranges.first(), ranges.last()) else {
        return Err(Error::domain("sequence map has no scans"));
    };
    let (first_scan, last_scan) = (lo.scan_id, hi.scan_id);
    let n = n as u64;
    let mut entries = BTreeMap::new();
    for (t, pose) in frames {
        let t = *t;
        let first = t.saturating_sub(n).max(first_scan);
        let last = t.saturating_add(2 * n).min(last_scan);
        if first > last {
            return Err(Error::domain(format!(
                "frame {t} has no scans within [{}, {}]",
                t.saturating_sub(n),
                t.saturating_add(2 * n)
            )));
        }
        entries.insert(
            t,
            GraphEntry {
                pose: pose.clone().with_frame_id(t),
                window: ScanWindow { first, last },
            },
        );
    }
    Ok(ConnectivityGraph::from_entries(entries, n as u32))
}

/// Frame whose camera center is closest to the query's; ties go to the
/// smallest frame id. Rotation is ignored.
pub fn nearest_frame(graph: &ConnectivityGraph, query: &Pose) -> Result<u64> {
    let q = query.camera_center();
    let mut best: Option<(f64, u64)> = None;
    for (&id, e) in &graph.entries {
        let d = (e.pose.camera_center() - q).norm_squared();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, id));
        }
    }
    best.map(|(_, id)| id)
        .ok_or_else(|| Error::domain("connectivity graph is empty"))
}

/// Map slices of the scans inside `frame_id`'s window, adjacent slices merged.
pub fn retrieve_candidates(
    graph: &ConnectivityGraph,
    map: &PointCloudMap,
    frame_id: u64,
) -> Result<Candidates> {
    let entry = graph
        .entry(frame_id)
        .ok_or_else(|| Error::domain(format!("frame {frame_id} is not in the graph")))?;
    Ok(Candidates::Ranges(scan_window_ranges(map, entry.window)))
}

pub(crate) fn scan_window_ranges(map: &PointCloudMap, window: ScanWindow) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    for r in map.scan_ranges().iter().filter(|r| window.contains(r.scan_id)) {
        match out.last_mut() {
            Some(prev) if prev.end == r.first => prev.end = r.first + r.count,
            _ => out.push(r.range()),
        }
    }
    out
}

/// Points surviving the pruning stage, sorted by map index.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleSet {
    pub point_indices: Vec<usize>,
    pub source_frame: Option<u64>,
    pub pixel_of: Vec<(u32, u32)>,
    pub depth_of: Vec<f64>,
}

impl VisibleSet {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

/// Full-resolution z-buffer over the candidates: keeps points with positive
/// depth that land inside the image and are nearest on their pixel (ties to
/// the smaller index).
pub fn prune_visible(
    candidates: &Candidates,
    map: &PointCloudMap,
    query: &Pose,
    k: &Intrinsics,
) -> VisibleSet {
    let buf = zbuffer::build(map, &candidates.segments(), &query.transform(), k, &[0])
        .pop()
        .expect("one level requested");
    let w = buf.width as usize;
    let winners = buf.winners_by_index();
    VisibleSet {
        point_indices: winners.iter().map(|&(i, _)| i).collect(),
        source_frame: None,
        pixel_of: winners.iter().map(|&(_, p)| ((p % w) as u32, (p / w) as u32)).collect(),
        depth_of: winners.iter().map(|&(_, p)| buf.depth(p)).collect(),
    }
}

/// Nearest frame lookup, window retrieval and pruning in one call.
pub fn visible_from(
    graph: &ConnectivityGraph,
    map: &PointCloudMap,
    query: &Pose,
    k: &Intrinsics,
) -> Result<VisibleSet> {
    let frame = nearest_frame(graph, query)?;
    let candidates = retrieve_candidates(graph, map, frame)?;
    let mut vis = prune_visible(&candidates, map, query, k);
    vis.source_frame = Some(frame);
    Ok(vis)
}

pub fn save_graph(path: &Path, graph: &ConnectivityGraph) -> Result<()> {
    let n = u16::try_from(graph.n)
        .map_err(|_| Error::domain(format!("n = {} does not fit the graph format", graph.n)))?;
    write_file(path, |w| {
        w.bytes(GRAPH_MAGIC)?;
        w.u16(GRAPH_VERSION)?;
        w.u16(n)?;
        w.u64(graph.entries.len() as u64)?;
        for (&id, e) in &graph.entries {
            w.u64(id)?;
            for v in e.pose.to_rows() {
                w.f64(v)?;
            }
            w.u64(e.window.first)?;
            w.u64(e.window.last)?;
        }
        Ok(())
    })
}

pub fn load_graph(path: &Path) -> Result<ConnectivityGraph> {
    let data = read_file(path)?;
    let mut r = Reader::new(path, &data);
    r.header(GRAPH_MAGIC, GRAPH_VERSION)?;
    let n = r.u16()? as u32;
    if n == 0 {
        return Err(r.err("window parameter n is zero"));
    }
    let count = r.u64()?;
    // 8 + 96 + 16 bytes per entry
    if count > (data.len() / 120) as u64 {
        return Err(r.err(format!("entry count {count} exceeds file size")));
    }
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let id = r.u64()?;
        let mut m = [0.0; 12];
        for v in &mut m {
            *v = r.f64()?;
        }
        let pose = Pose::from_rows(&m)
            .map_err(|e| r.err(format!("frame {id}: {e}")))?
            .with_frame_id(id);
        let window = ScanWindow {
            first: r.u64()?,
            last: r.u64()?,
        };
        if window.first > window.last {
            return Err(r.err(format!("frame {id} has an empty window")));
        }
        if entries.insert(id, GraphEntry { pose, window }).is_some() {
            return Err(r.err(format!("duplicate frame {id}")));
        }
    }
    r.expect_end()?;
    Ok(ConnectivityGraph::from_entries(entries, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::ingest::ScanRange;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `scans` scans of `per_scan` points each, frames on the z axis 1 m apart.
    fn uniform_sequence(scans: u64, per_scan: usize) -> Sequence {
        let positions = (0..scans as usize * per_scan)
            .map(|i| [0.0, 0.0, (i / per_scan) as f32])
            .collect();
        let ranges = (0..scans)
            .map(|s| ScanRange {
                scan_id: s,
                first: s as usize * per_scan,
                count: per_scan,
            })
            .collect();
        let map = PointCloudMap::new(positions, ranges).unwrap();
        let frames = (0..scans)
            .map(|t| (t, Pose::from_translation(Vec3::new(0.0, 0.0, t as f64)).unwrap()))
            .collect();
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        Sequence::new(frames, k, map).unwrap()
    }

    #[test]
    fn window_examples() {
        let seq = uniform_sequence(300, 1);
        let g = build_graph(&seq, 5).unwrap();
        let w = g.entry(10).unwrap().window;
        assert_eq!(w, ScanWindow { first: 5, last: 20 });
        // 3n + 1 integers in [t − n, t + 2n]
        assert_eq!(w.len(), (5..=20).count() as u64);
        assert_eq!(w.len(), 16);
        assert_eq!(g.entry(0).unwrap().window, ScanWindow { first: 0, last: 10 });
        assert_eq!(g.entry(299).unwrap().window, ScanWindow { first: 294, last: 299 });
        assert_eq!(g.len(), 300);
        assert_eq!(g.built_over(), 300);
        assert!(build_graph(&seq, 0).is_err());
    }

    #[test]
    fn nearest_frame_examples() {
        let seq = uniform_sequence(50, 1);
        let g = build_graph(&seq, 5).unwrap();
        let q = seq.pose(42).unwrap().clone();
        assert_eq!(nearest_frame(&g, &q).unwrap(), 42);
        let mid = Pose::from_translation(Vec3::new(0.0, 0.0, 3.5)).unwrap();
        assert_eq!(nearest_frame(&g, &mid).unwrap(), 3);
    }

    #[test]
    fn nearest_frame_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames: Vec<(u64, Pose)> = (0..64)
            .map(|i| {
                let t = Vec3::new(rng.gen_range(-30.0..30.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..200.0));
                (i * 2, Pose::from_translation(t).unwrap())
            })
            .collect();
        let ranges: Vec<ScanRange> = (0..128)
            .map(|s| ScanRange { scan_id: s, first: 0, count: 0 })
            .collect();
        let map = PointCloudMap::new(vec![], ranges).unwrap();
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).unwrap();
        let seq = Sequence::new(frames.clone(), k, map).unwrap();
        let g = build_graph(&seq, 3).unwrap();
        for _ in 0..500 {
            let q = Vec3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-3.0..3.0), rng.gen_range(-10.0..210.0));
            let mut oracle = (f64::INFINITY, u64::MAX);
            for (id, p) in &frames {
                let d = ((p.translation() - q).map(|v| v * v)).sum();
                if d < oracle.0 || (d == oracle.0 && *id < oracle.1) {
                    oracle = (d, *id);
                }
            }
            let got = nearest_frame(&g, &Pose::from_translation(q).unwrap()).unwrap();
            assert_eq!(got, oracle.1);
        }
    }

    #[test]
    fn retrieve_examples() {
        let seq = uniform_sequence(300, 1000);
        let g = build_graph(&seq, 5).unwrap();
        let c = retrieve_candidates(&g, &seq.map, 10).unwrap();
        assert_eq!(c.len(), 16_000);
        assert_eq!(c, Candidates::Ranges(vec![5000..21000]));
        assert!(retrieve_candidates(&g, &seq.map, 1000).is_err());

        let small = uniform_sequence(4, 10);
        let g = build_graph(&small, 5).unwrap();
        assert_eq!(retrieve_candidates(&g, &small.map, 1).unwrap().len(), small.map.len());

        let one = uniform_sequence(1, 7);
        let g = build_graph(&one, 1).unwrap();
        assert_eq!(g.entry(0).unwrap().window, ScanWindow { first: 0, last: 0 });
        assert_eq!(
            retrieve_candidates(&g, &one.map, 0).unwrap(),
            Candidates::Ranges(vec![0..7])
        );
    }

    fn tiny_map(points: &[[f32; 3]]) -> PointCloudMap {
        PointCloudMap::new(
            points.to_vec(),
            vec![ScanRange { scan_id: 0, first: 0, count: points.len() }],
        )
        .unwrap()
    }

    #[test]
    fn prune_examples() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let behind = tiny_map(&[[0.0, 0.0, -2.0]]);
        let v = prune_visible(&Candidates::all(&behind), &behind, &Pose::identity(), &k);
        assert!(v.is_empty());

        let pair = tiny_map(&[[0.0, 0.0, 3.0], [0.0, 0.0, 2.0]]);
        let v = prune_visible(&Candidates::all(&pair), &pair, &Pose::identity(), &k);
        assert_eq!(v.point_indices, vec![1]);
        assert_eq!(v.pixel_of, vec![(50, 50)]);
        assert_eq!(v.depth_of, vec![2.0]);

        let tie = tiny_map(&[[0.0, 0.0, 2.0], [0.001, 0.0, 2.0]]);
        let v = prune_visible(&Candidates::all(&tie), &tie, &Pose::identity(), &k);
        assert_eq!(v.point_indices, vec![0]);
    }

    #[test]
    fn prune_respects_explicit_candidate_lists() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let pair = tiny_map(&[[0.0, 0.0, 3.0], [0.0, 0.0, 2.0]]);
        let v = prune_visible(&Candidates::Indices(vec![0]), &pair, &Pose::identity(), &k);
        assert_eq!(v.point_indices, vec![0]);
    }

    #[test]
    fn graph_file_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let seq = uniform_sequence(3, 2);
        let g = build_graph(&seq, 5).unwrap();
        let path = dir.path().join("g.grf");
        save_graph(&path, &g).unwrap();
        assert_eq!(load_graph(&path).unwrap(), g);

        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        std::fs::write(dir.path().join("m"), &bad).unwrap();
        assert!(matches!(load_graph(&dir.path().join("m")), Err(Error::Format { .. })));

        let mut v2 = bytes.clone();
        v2[MAGIC_LEN..MAGIC_LEN + 2].copy_from_slice(&2u16.to_le_bytes());
        std::fs::write(dir.path().join("v"), &v2).unwrap();
        assert!(matches!(
            load_graph(&dir.path().join("v")),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));

        std::fs::write(dir.path().join("t"), &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_graph(&dir.path().join("t")), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn windows_follow_the_clamp_rule(scans in 1u64..80, n in 1u32..9) {
            let seq = uniform_sequence(scans, 1);
            let g = build_graph(&seq, n).unwrap();
            let n = n as u64;
            for (&t, e) in g.entries() {
                prop_assert_eq!(e.window.first, t.saturating_sub(n));
                prop_assert_eq!(e.window.last, (t + 2 * n).min(scans - 1));
            }
        }
    }
}
