//! Balanced kd-tree over 3D points with fully deterministic queries.
//!
//! Determinism contract: every query breaks distance ties by the lowest
//! original point index, and the build itself orders equal coordinates by
//! index, so identical inputs always produce identical results regardless
//! of how the caller threads the surrounding work.

use crate::geometry::Vec3;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub struct KdTree {
    /// Point coordinates, indexed by original position in the input slice.
    pts: Vec<[f64; 3]>,
    /// Original indices arranged into an implicit median tree: for a range
    /// `[lo, hi)` the node point is at `mid = (lo + hi) / 2`.
    order: Vec<u32>,
    /// Split dimension per `mid` position.
    dims: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<u32> = (0..pts.len() as u32).collect();
        let mut dims = vec![0u8; pts.len()];
        if !pts.is_empty() {
            build_range(&pts, &mut order, &mut dims, 0, pts.len());
        }
        KdTree { pts, order, dims }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Nearest neighbor; ties broken by lowest index. None on an empty tree.
    pub fn nearest(&self, query: &Vec3) -> Option<Neighbor> {
        if self.pts.is_empty() {
            return None;
        }
        let q = [query.x, query.y, query.z];
        let mut best = Neighbor {
            index: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        self.nearest_range(&q, 0, self.pts.len(), &mut best);
        Some(best)
    }

    /// Nearest neighbor no farther than `max_dist`; the cutoff is inclusive.
    pub fn nearest_within(&self, query: &Vec3, max_dist: f64) -> Option<Neighbor> {
        let n = self.nearest(query)?;
        (n.dist_sq <= max_dist * max_dist).then_some(n)
    }

    /// The `k` nearest neighbors, ascending by (distance, index).
    pub fn k_nearest(&self, query: &Vec3, k: usize) -> Vec<Neighbor> {
        if k == 0 || self.pts.is_empty() {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
        self.k_nearest_range(&q, 0, self.pts.len(), k, &mut heap);
        let mut out: Vec<Neighbor> = heap
            .into_iter()
            .map(|e| Neighbor {
                index: e.index as usize,
                dist_sq: e.dist_sq,
            })
            .collect();
        out.sort_by(|a, b| {
            a.dist_sq
                .total_cmp(&b.dist_sq)
                .then(a.index.cmp(&b.index))
        });
        out
    }

    /// All points within `radius` (inclusive), ascending by index.
    pub fn within_radius(&self, query: &Vec3, radius: f64) -> Vec<Neighbor> {
        if self.pts.is_empty() {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut out = Vec::new();
        self.radius_range(&q, radius * radius, 0, self.pts.len(), &mut out);
        out.sort_by_key(|n| n.index);
        out
    }

    fn nearest_range(&self, q: &[f64; 3], lo: usize, hi: usize, best: &mut Neighbor) {
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let p = &self.pts[idx];
        let d2 = dist_sq(q, p);
        if d2 < best.dist_sq || (d2 == best.dist_sq && idx < best.index) {
            *best = Neighbor {
                index: idx,
                dist_sq: d2,
            };
        }
        if hi - lo == 1 {
            return;
        }
        let dim = self.dims[mid] as usize;
        let delta = q[dim] - p[dim];
        let (near, far) = if delta <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        if near.0 < near.1 {
            self.nearest_range(q, near.0, near.1, best);
        }
        // The far side can still hold an equal-distance, lower-index point,
        // so recurse on <= rather than <.
        if far.0 < far.1 && delta * delta <= best.dist_sq {
            self.nearest_range(q, far.0, far.1, best);
        }
    }

    fn k_nearest_range(
        &self,
        q: &[f64; 3],
        lo: usize,
        hi: usize,
        k: usize,
        heap: &mut BinaryHeap<HeapEntry>,
    ) {
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.pts[idx as usize];
        let d2 = dist_sq(q, p);
        let entry = HeapEntry {
            dist_sq: d2,
            index: idx,
        };
        if heap.len() < k {
            heap.push(entry);
        } else if let Some(worst) = heap.peek() {
            if entry.cmp(worst) == Ordering::Less {
                heap.pop();
                heap.push(entry);
            }
        }
        if hi - lo == 1 {
            return;
        }
        let dim = self.dims[mid] as usize;
        let delta = q[dim] - p[dim];
        let (near, far) = if delta <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        if near.0 < near.1 {
            self.k_nearest_range(q, near.0, near.1, k, heap);
        }
        let prune = heap.len() == k
            && heap
                .peek()
                .map(|w| delta * delta > w.dist_sq)
                .unwrap_or(false);
        if far.0 < far.1 && !prune {
            self.k_nearest_range(q, far.0, far.1, k, heap);
        }
    }

    fn radius_range(
        &self,
        q: &[f64; 3],
        r2: f64,
        lo: usize,
        hi: usize,
        out: &mut Vec<Neighbor>,
    ) {
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let p = &self.pts[idx];
        let d2 = dist_sq(q, p);
        if d2 <= r2 {
            out.push(Neighbor {
                index: idx,
                dist_sq: d2,
            });
        }
        if hi - lo == 1 {
            return;
        }
        let dim = self.dims[mid] as usize;
        let delta = q[dim] - p[dim];
        if lo < mid && (delta <= 0.0 || delta * delta <= r2) {
            self.radius_range(q, r2, lo, mid, out);
        }
        if mid + 1 < hi && (delta >= 0.0 || delta * delta <= r2) {
            self.radius_range(q, r2, mid + 1, hi, out);
        }
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    dist_sq: f64,
    index: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    // Max-heap keeps the worst candidate on top: larger distance is
    // "greater", and on equal distance the larger index is evicted first.
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn build_range(pts: &[[f64; 3]], order: &mut [u32], dims: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= 1 {
        return;
    }
    // Split on the widest extent of the current range.
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for &i in &order[lo..hi] {
        let p = &pts[i as usize];
        for d in 0..3 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    let mut dim = 0;
    let mut widest = max[0] - min[0];
    for d in 1..3 {
        let w = max[d] - min[d];
        if w > widest {
            widest = w;
            dim = d;
        }
    }
    let mid = (lo + hi) / 2;
    order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
        pts[a as usize][dim]
            .total_cmp(&pts[b as usize][dim])
            .then(a.cmp(&b))
    });
    dims[mid] = dim as u8;
    build_range(pts, order, dims, lo, mid);
    build_range(pts, order, dims, mid + 1, hi);
}
