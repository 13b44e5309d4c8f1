use std::collections::BinaryHeap;

use ordered::OrdKey;

use super::vec3::dist2;
use super::Point3;

const LEAF: usize = 8;

/// Static kd-tree over a point set. Queries are exact; among points at equal
/// distance the lowest original index wins.
#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<Point3>,
    order: Vec<usize>,
    axes: Vec<u8>,
}

mod ordered {
    /// `(squared distance, index)` with a total order.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct OrdKey(pub f64, pub usize);

    impl Eq for OrdKey {}

    impl PartialOrd for OrdKey {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    impl Ord for OrdKey {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
        }
    }
}

impl PointIndex {
    pub fn new(points: Vec<Point3>) -> Self {
        let n = points.len();
        let mut idx = Self {
            points,
            order: (0..n).collect(),
            axes: vec![0; n],
        };
        idx.build(0, n);
        idx
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF {
            return;
        }
        let (mut mn, mut mx) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for &i in &self.order[lo..hi] {
            for k in 0..3 {
                mn[k] = mn[k].min(self.points[i][k]);
                mx[k] = mx[k].max(self.points[i][k]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (mx[a] - mn[a]).total_cmp(&(mx[b] - mn[b])))
            .unwrap();
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        self.axes[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Nearest point as `(index, squared distance)`.
    pub fn nearest_sq(&self, q: Point3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = OrdKey(f64::INFINITY, usize::MAX);
        self.nearest_rec(0, self.points.len(), q, &mut best);
        Some((best.1, best.0))
    }

    /// Nearest point as `(index, distance)`.
    pub fn nearest(&self, q: Point3) -> Option<(usize, f64)> {
        self.nearest_sq(q).map(|(i, d2)| (i, d2.sqrt()))
    }

    fn nearest_rec(&self, lo: usize, hi: usize, q: Point3, best: &mut OrdKey) {
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                let cand = OrdKey(dist2(q, self.points[i]), i);
                if cand < *best {
                    *best = cand;
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        let p = self.points[i];
        let cand = OrdKey(dist2(q, p), i);
        if cand < *best {
            *best = cand;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(near.0, near.1, q, best);
        if diff * diff <= best.0 {
            self.nearest_rec(far.0, far.1, q, best);
        }
    }

    /// The `k` nearest points as `(index, squared distance)`, closest first.
    pub fn knn_sq(&self, q: Point3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, self.points.len(), q, k, &mut heap);
        let mut out: Vec<OrdKey> = heap.into_vec();
        out.sort();
        out.into_iter().map(|OrdKey(d, i)| (i, d)).collect()
    }

    fn knn_rec(&self, lo: usize, hi: usize, q: Point3, k: usize, heap: &mut BinaryHeap<OrdKey>) {
        let offer = |i: usize, heap: &mut BinaryHeap<OrdKey>| {
            let cand = OrdKey(dist2(q, self.points[i]), i);
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        };
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                offer(i, heap);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        offer(i, heap);
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[i][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(near.0, near.1, q, k, heap);
        if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
            self.knn_rec(far.0, far.1, q, k, heap);
        }
    }
}
