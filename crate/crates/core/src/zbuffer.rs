//! Per-pixel nearest-point selection shared by pruning and rasterization.
//!
//! Each pixel keeps the candidate minimizing `(depth, index)`. That order is
//! total, so partial buffers built by any partition of the candidates merge to
//! the same result: parallel runs are bit-identical to sequential ones.

use std::cell::RefCell;
use std::ops::Range;

use rayon::prelude::*;

use crate::geom::{pixel_in, Intrinsics, WorldToCamera};
use crate::ingest::PointCloudMap;

const CHUNK: usize = 1 << 16;

/// Point indices to consider, either as map slices or as an explicit list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Candidates {
    Ranges(Vec<Range<usize>>),
    Indices(Vec<usize>),
}

impl Candidates {
    pub fn all(map: &PointCloudMap) -> Self {
        Candidates::Ranges(vec![0..map.len()])
    }

    pub fn len(&self) -> usize {
        match self {
            Candidates::Ranges(r) => r.iter().map(|r| r.len()).sum(),
            Candidates::Indices(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = usize> + '_> {
        match self {
            Candidates::Ranges(r) => Box::new(r.iter().flat_map(|r| r.clone())),
            Candidates::Indices(v) => Box::new(v.iter().copied()),
        }
    }

    pub fn contains(&self, index: usize) -> bool {
        match self {
            Candidates::Ranges(r) => r.iter().any(|r| r.contains(&index)),
            Candidates::Indices(v) => v.contains(&index),
        }
    }

    pub(crate) fn segments(&self) -> Vec<Segment<'_>> {
        match self {
            Candidates::Ranges(ranges) => ranges
                .iter()
                .flat_map(|r| {
                    (r.start..r.end)
                        .step_by(CHUNK)
                        .map(move |s| Segment::Range(s..(s + CHUNK).min(r.end)))
                })
                .collect(),
            Candidates::Indices(v) => v.chunks(CHUNK).map(Segment::Slice).collect(),
        }
    }
}

/// Splits an explicit index list into work segments.
pub(crate) fn slice_segments(indices: &[usize]) -> Vec<Segment<'_>> {
    indices.chunks(CHUNK).map(Segment::Slice).collect()
}

pub(crate) enum Segment<'a> {
    Range(Range<usize>),
    Slice(&'a [usize]),
}

impl Segment<'_> {
    fn for_each(&self, mut f: impl FnMut(usize)) {
        match self {
            Segment::Range(r) => r.clone().for_each(&mut f),
            Segment::Slice(s) => s.iter().for_each(|&i| f(i)),
        }
    }
}

const EMPTY: usize = usize::MAX;
const POOL_SIZE: usize = 16;

thread_local! {
    // freed cell arrays, reused so repeated views skip fresh page faults
    static POOL: RefCell<Vec<Vec<(f64, usize)>>> = const { RefCell::new(Vec::new()) };
}

/// Depth and point index interleaved so an offer touches one cache line.
#[derive(Clone, Debug)]
pub(crate) struct ZBuffer {
    pub width: u32,
    pub height: u32,
    pub cells: Vec<(f64, usize)>,
}

impl ZBuffer {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        let reused = POOL.with(|p| {
            let mut p = p.borrow_mut();
            let pos = p.iter().position(|c| c.len() == n)?;
            Some(p.swap_remove(pos))
        });
        let cells = match reused {
            Some(mut c) => {
                c.fill((f64::INFINITY, EMPTY));
                c
            }
            None => vec![(f64::INFINITY, EMPTY); n],
        };
        ZBuffer { width, height, cells }
    }

    #[inline]
    pub fn offer(&mut self, pixel: usize, depth: f64, index: usize) {
        let cell = &mut self.cells[pixel];
        if depth < cell.0 || (depth == cell.0 && index < cell.1) {
            *cell = (depth, index);
        }
    }

    pub fn merge(mut self, other: ZBuffer) -> ZBuffer {
        for (p, &(d, i)) in other.cells.iter().enumerate() {
            if i != EMPTY {
                self.offer(p, d, i);
            }
        }
        self
    }

    #[inline]
    pub fn depth(&self, pixel: usize) -> f64 {
        self.cells[pixel].0
    }

    /// Occupied pixels as `(pixel, depth, index)`.
    pub fn winners(&self) -> impl Iterator<Item = (usize, f64, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.1 != EMPTY)
            .map(|(p, &(d, i))| (p, d, i))
    }

    /// Occupied pixels as `(index, pixel)`, ordered by point index.
    pub fn winners_by_index(&self) -> Vec<(usize, usize)> {
        let (mut lo, mut hi, mut count) = (usize::MAX, 0, 0usize);
        for (_, _, i) in self.winners() {
            lo = lo.min(i);
            hi = hi.max(i);
            count += 1;
        }
        if count == 0 {
            return Vec::new();
        }
        let span = hi - lo + 1;
        if span <= count.saturating_mul(32) && self.cells.len() < u32::MAX as usize {
            // each index wins at most one pixel, so a dense slot table sorts in one pass
            let mut slot = vec![u32::MAX; span];
            for (p, _, i) in self.winners() {
                slot[i - lo] = p as u32;
            }
            slot.iter()
                .enumerate()
                .filter(|(_, &p)| p != u32::MAX)
                .map(|(o, &p)| (lo + o, p as usize))
                .collect()
        } else {
            let mut out: Vec<(usize, usize)> = self.winners().map(|(p, _, i)| (i, p)).collect();
            out.sort_unstable();
            out
        }
    }
}

impl Drop for ZBuffer {
    fn drop(&mut self) {
        let cells = std::mem::take(&mut self.cells);
        if cells.is_empty() {
            return;
        }
        let _ = POOL.try_with(|p| {
            if let Ok(mut p) = p.try_borrow_mut() {
                if p.len() < POOL_SIZE {
                    p.push(cells);
                }
            }
        });
    }
}

/// Projects every candidate once and offers it to one buffer per pyramid
/// level; level `t` bins `(u, v) / 2^t` into a `⌊W/2^t⌋ × ⌊H/2^t⌋` grid.
pub(crate) fn build(
    map: &PointCloudMap,
    segments: &[Segment<'_>],
    tf: &WorldToCamera,
    k: &Intrinsics,
    levels: &[u32],
) -> Vec<ZBuffer> {
    let fresh = || -> Vec<ZBuffer> {
        levels
            .iter()
            .map(|&t| ZBuffer::new(k.width >> t, k.height >> t))
            .collect()
    };
    let scales: Vec<f64> = levels.iter().map(|&t| 1.0 / (1u64 << t) as f64).collect();
    let visit = |bufs: &mut Vec<ZBuffer>, seg: &Segment<'_>| {
        seg.for_each(|i| {
            let c = tf.apply(map.position(i));
            let Some((u, v)) = k.project_raw(c[0], c[1], c[2]) else {
                return;
            };
            for (buf, &s) in bufs.iter_mut().zip(&scales) {
                // u * 2^-t is exact, so this equals projecting with scaled intrinsics
                if let Some((x, y)) = pixel_in(u * s, v * s, buf.width, buf.height) {
                    let p = y as usize * buf.width as usize + x as usize;
                    buf.offer(p, c[2], i);
                }
            }
        })
    };
    if rayon::current_num_threads() <= 1 || segments.len() <= 1 {
        let mut bufs = fresh();
        segments.iter().for_each(|s| visit(&mut bufs, s));
        return bufs;
    }
    segments
        .par_iter()
        .fold(fresh, |mut bufs, seg| {
            visit(&mut bufs, seg);
            bufs
        })
        .reduce_with(|a, b| a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect())
        .unwrap_or_else(fresh)
}
