//! Visibility strategies scored against the ray-cast oracle.
//!
//! Every strategy selects candidate points for a query pose, then the same
//! full-resolution z-buffer prunes them. The winners are classified by the
//! oracle to measure how many occluded points leak into the view.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::connectivity::{
    nearest_frame, prune_visible, retrieve_candidates, scan_window_ranges, Candidates, ConnectivityGraph,
    ScanWindow, DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose};
use crate::ingest::{PointCloudMap, Sequence};
use crate::raster::{rasterize_pyramid, Channels, DEFAULT_LEVELS};
use crate::synth::{oracle_visibility, Rect3};

pub const REPORT_HEADER: [&str; 8] = [
    "frame_id",
    "retrieved",
    "visible",
    "leak",
    "precision",
    "recall",
    "prune_s",
    "raster_s",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    /// Every map point goes through the z-buffer.
    FullMapZBuffer,
    /// Points with camera depth in `(0, d]`.
    DepthThreshold(f64),
    /// Points within `r` meters of the camera center.
    RadiusCrop(f64),
    /// Scans `[t − 2n, t + 2n]` around the nearest frame `t`.
    SlidingWindow(u32),
    /// The nearest frame's connectivity window.
    Connectivity(u32),
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Strategy::FullMapZBuffer => true,
            Strategy::DepthThreshold(v) | Strategy::RadiusCrop(v) => v.is_finite() && v > 0.0,
            Strategy::SlidingWindow(n) | Strategy::Connectivity(n) => n > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("strategy {self} needs a positive parameter")))
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::FullMapZBuffer => write!(f, "fullmap"),
            Strategy::DepthThreshold(d) => write!(f, "depth:{d}"),
            Strategy::RadiusCrop(r) => write!(f, "radius:{r}"),
            Strategy::SlidingWindow(n) => write!(f, "window:{n}"),
            Strategy::Connectivity(n) => write!(f, "connectivity:{n}"),
        }
    }
}

/// Parses `fullmap`, `depth:<m>`, `radius:<m>`, `window[:<n>]` or
/// `connectivity[:<n>]`.
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.trim().split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.trim(), None),
        };
        let bad = || Error::domain(format!("cannot parse strategy {s:?}"));
        let real = |a: Option<&str>| -> Result<f64> { a.ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let count = |a: Option<&str>| -> Result<u32> {
            a.map_or(Ok(DEFAULT_WINDOW), |a| a.parse().map_err(|_| bad()))
        };
        let st = match name {
            "fullmap" => Strategy::FullMapZBuffer,
            "depth" => Strategy::DepthThreshold(real(arg)?),
            "radius" => Strategy::RadiusCrop(real(arg)?),
            "window" => Strategy::SlidingWindow(count(arg)?),
            "connectivity" => Strategy::Connectivity(count(arg)?),
            _ => return Err(bad()),
        };
        st.validate()?;
        Ok(st)
    }
}

/// One query view's measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewReport {
    pub frame_id: u64,
    pub retrieved: usize,
    pub visible: usize,
    pub leak: f64,
    pub precision: f64,
    pub recall: f64,
    pub prune_s: f64,
    pub raster_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub map_size: usize,
    pub rows: Vec<ViewReport>,
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl StrategyReport {
    pub fn mean_leak(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.leak))
    }

    pub fn mean_precision(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.precision))
    }

    pub fn mean_recall(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.recall))
    }

    pub fn mean_retrieved(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.retrieved as f64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    /// Pyramid levels rasterized after pruning.
    pub levels: Vec<u32>,
    pub channels: Channels,
    /// Classify winners with the oracle; otherwise the rate columns hold
    /// their empty-view values.
    pub score: bool,
    /// Also count every oracle-visible map point for the recall column.
    /// When off, recall is reported as NaN.
    pub recall: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            levels: DEFAULT_LEVELS.to_vec(),
            channels: Channels::Color,
            score: true,
            recall: true,
        }
    }
}

/// Nearest frame by camera center among `frames`, ties to the smallest id.
fn nearest_in(frames: &[(u64, Pose)], query: &Pose) -> Result<u64> {
    let q = query.camera_center();
    frames
        .iter()
        .map(|(id, p)| ((p.camera_center() - q).norm_squared(), *id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
        .ok_or_else(|| Error::domain("no frames to search"))
}

/// Candidate set a strategy hands to the z-buffer.
pub fn select_candidates(
    strategy: Strategy,
    sequence: &Sequence,
    graph: Option<&ConnectivityGraph>,
    query: &Pose,
) -> Result<Candidates> {
    let map = &sequence.map;
    Ok(match strategy {
        Strategy::FullMapZBuffer => Candidates::all(map),
        Strategy::DepthThreshold(d) => {
            let tf = query.transform();
            Candidates::Indices(filter_points(map, |p| {
                let z = tf.apply(p)[2];
                z > 0.0 && z <= d
            }))
        }
        Strategy::RadiusCrop(r) => {
            let c = query.camera_center();
            let r2 = r * r;
            Candidates::Indices(filter_points(map, |p| {
                let d = [p[0] - c.x, p[1] - c.y, p[2] - c.z];
                d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r2
            }))
        }
        Strategy::SlidingWindow(n) => {
            let t = match graph {
                Some(g) => nearest_frame(g, query)?,
                None => nearest_in(&sequence.frames, query)?,
            };
            let n = 2 * n as u64;
            let window = ScanWindow {
                first: t.saturating_sub(n),
                last: t.saturating_add(n),
            };
            Candidates::Ranges(scan_window_ranges(map, window))
        }
        Strategy::Connectivity(n) => {
            let g = graph.ok_or_else(|| Error::domain("connectivity strategy needs a graph"))?;
            if g.n() != n {
                return Err(Error::domain(format!("graph was built with n = {}, strategy asks for {n}", g.n())));
            }
            retrieve_candidates(g, map, nearest_frame(g, query)?)?
        }
    })
}

fn filter_points(map: &PointCloudMap, keep: impl Fn([f64; 3]) -> bool + Sync) -> Vec<usize> {
    (0..map.len()).into_par_iter().filter(|&i| keep(map.position(i))).collect()
}

struct Scores {
    leak: f64,
    precision: f64,
    recall: f64,
}

fn score_view(
    map: &PointCloudMap,
    winners: &[usize],
    query: &Pose,
    k: &Intrinsics,
    surfaces: &[Rect3],
    recall: bool,
) -> Scores {
    let verdict = oracle_visibility(map, &Candidates::Indices(winners.to_vec()), query, k, surfaces);
    let good = verdict.iter().filter(|&&v| v).count();
    let w = winners.len();
    let recall = if recall {
        let reachable = oracle_visibility(map, &Candidates::all(map), query, k, surfaces)
            .into_iter()
            .filter(|&v| v)
            .count();
        if reachable == 0 {
            1.0
        } else {
            good as f64 / reachable as f64
        }
    } else {
        f64::NAN
    };
    Scores {
        leak: if w == 0 { 0.0 } else { (w - good) as f64 / w as f64 },
        precision: if w == 0 { 1.0 } else { good as f64 / w as f64 },
        recall,
    }
}

/// Runs one strategy over the query views. Timed work runs view by view;
/// oracle scoring is outside the timed region.
pub fn run_strategy(
    strategy: Strategy,
    sequence: &Sequence,
    graph: Option<&ConnectivityGraph>,
    surfaces: &[Rect3],
    queries: &[(u64, Pose)],
    options: &BenchOptions,
) -> Result<StrategyReport> {
    strategy.validate()?;
    if matches!(strategy, Strategy::Connectivity(_)) && graph.is_none() {
        return Err(Error::domain("connectivity strategy needs a graph"));
    }
    let map = &sequence.map;
    let k = &sequence.intrinsics;
    let mut rows = Vec::with_capacity(queries.len());
    for (frame_id, query) in queries {
        let start = Instant::now();
        let candidates = select_candidates(strategy, sequence, graph, query)?;
        let vis = prune_visible(&candidates, map, query, k);
        let prune_s = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let pyramid = rasterize_pyramid(map, &vis.point_indices, query, k, &options.levels, options.channels)?;
        let raster_s = start.elapsed().as_secs_f64();
        drop(pyramid);
        let s = if options.score {
            score_view(map, &vis.point_indices, query, k, surfaces, options.recall)
        } else {
            Scores {
                leak: 0.0,
                precision: 1.0,
                recall: 1.0,
            }
        };
        rows.push(ViewReport {
            frame_id: *frame_id,
            retrieved: candidates.len(),
            visible: vis.len(),
            leak: s.leak,
            precision: s.precision,
            recall: s.recall,
            prune_s,
            raster_s,
        });
    }
    Ok(StrategyReport {
        strategy,
        map_size: map.len(),
        rows,
    })
}

/// Mean fraction of the map retrieved per view.
pub fn subset_ratio(report: &StrategyReport) -> f64 {
    if report.map_size == 0 {
        return 0.0;
    }
    report.mean_retrieved() / report.map_size as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingSummary {
    pub mean_prune_s: f64,
    pub mean_raster_s: f64,
    pub fps: f64,
}

pub fn timing_summary(report: &StrategyReport) -> Result<TimingSummary> {
    if report.rows.is_empty() {
        return Err(Error::domain("report has no views"));
    }
    let mean_prune_s = mean(report.rows.iter().map(|r| r.prune_s));
    let mean_raster_s = mean(report.rows.iter().map(|r| r.raster_s));
    let total = mean_prune_s + mean_raster_s;
    Ok(TimingSummary {
        mean_prune_s,
        mean_raster_s,
        fps: if total > 0.0 { 1.0 / total } else { f64::INFINITY },
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

pub fn write_report(path: &Path, report: &StrategyReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(REPORT_HEADER).map_err(|e| csv_err(path, e))?;
    for r in &report.rows {
        w.write_record([
            r.frame_id.to_string(),
            r.retrieved.to_string(),
            r.visible.to_string(),
            r.leak.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.prune_s.to_string(),
            r.raster_s.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<ViewReport>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rd.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (n, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = n + 2;
        let bad = |field: &str| Error::format(path, format!("line {line}: bad {field}"));
        let int = |i: usize| -> Result<u64> { rec[i].parse().map_err(|_| bad(REPORT_HEADER[i])) };
        let real = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(REPORT_HEADER[i])) };
        rows.push(ViewReport {
            frame_id: int(0)?,
            retrieved: int(1)? as usize,
            visible: int(2)? as usize,
            leak: real(3)?,
            precision: real(4)?,
            recall: real(5)?,
            prune_s: real(6)?,
            raster_s: real(7)?,
        });
    }
    Ok(rows)
}
