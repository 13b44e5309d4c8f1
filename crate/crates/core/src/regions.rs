//! Nearest-key-point partition of space, local coordinates and K-ring
//! neighbourhoods over the mesh graph.

use std::collections::VecDeque;
use std::sync::Arc;

use rayon::prelude::*;

use crate::diffcore::SparsePattern;
use crate::geometry::vec3::{scale, sub};
use crate::geometry::{Point3, PointIndex, TriangleMesh};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegionError {
    #[error("key point set is empty")]
    NoKeyPoints,
    #[error("ring count K must be at least 1, got {0}")]
    InvalidRingCount(usize),
}

/// Key points `p_i` (the mesh vertices) with a nearest-neighbour index.
#[derive(Debug, Clone)]
pub struct KeyPointSet {
    index: PointIndex,
}

impl KeyPointSet {
    pub fn new(points: Vec<Point3>) -> Result<Self, RegionError> {
        if points.is_empty() {
            return Err(RegionError::NoKeyPoints);
        }
        Ok(Self {
            index: PointIndex::new(points),
        })
    }

    pub fn from_mesh(mesh: &TriangleMesh) -> Result<Self, RegionError> {
        Self::new(mesh.vertices().to_vec())
    }

    pub fn points(&self) -> &[Point3] {
        self.index.points()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Index of the nearest key point; ties go to the lowest index.
    pub fn nearest(&self, x: Point3) -> usize {
        self.index.nearest_sq(x).expect("key point set is nonempty").0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionAssignment {
    pub region: Vec<usize>,
    pub local: Vec<Point3>,
}

impl RegionAssignment {
    pub fn len(&self) -> usize {
        self.region.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region.is_empty()
    }
}

/// `T_i(x) = (x − p_i)`.
pub fn local_transform(x: Point3, p: Point3) -> Point3 {
    sub(x, p)
}

/// `T_i(x) = s·(x − p_i)`; `s = 1` is the plain translation.
pub fn local_transform_scaled(x: Point3, p: Point3, s: f64) -> Point3 {
    scale(sub(x, p), s)
}

pub fn assign_regions(samples: &[Point3], keypoints: &KeyPointSet) -> RegionAssignment {
    assign_regions_scaled(samples, keypoints, 1.0)
}

pub fn assign_regions_scaled(samples: &[Point3], keypoints: &KeyPointSet, s: f64) -> RegionAssignment {
    let (region, local) = samples
        .par_iter()
        .map(|&x| {
            let i = keypoints.nearest(x);
            (i, local_transform_scaled(x, keypoints.points()[i], s))
        })
        .unzip();
    RegionAssignment { region, local }
}

/// `rings[i][k-1]` holds the sorted vertices at graph distance exactly `k`
/// from `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RingNeighborhoods {
    k: usize,
    rings: Vec<Vec<Vec<usize>>>,
}

impl RingNeighborhoods {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_vertices(&self) -> usize {
        self.rings.len()
    }

    /// Ring `k` (1-based) of vertex `i`.
    pub fn ring(&self, i: usize, k: usize) -> &[usize] {
        &self.rings[i][k - 1]
    }

    pub fn truncate(&self, k: usize) -> Result<Self, RegionError> {
        if k < 1 {
            return Err(RegionError::InvalidRingCount(k));
        }
        let k = k.min(self.k);
        Ok(Self {
            k,
            rings: self.rings.iter().map(|r| r[..k].to_vec()).collect(),
        })
    }
}

pub fn ring_neighborhoods(mesh: &TriangleMesh, k: usize) -> Result<RingNeighborhoods, RegionError> {
    rings_from_adjacency(&mesh.adjacency(), k)
}

pub fn rings_from_adjacency(adj: &[Vec<usize>], k: usize) -> Result<RingNeighborhoods, RegionError> {
    if k < 1 {
        return Err(RegionError::InvalidRingCount(k));
    }
    let n = adj.len();
    let rings = (0..n)
        .into_par_iter()
        .map(|src| {
            let mut depth = vec![usize::MAX; n];
            let mut out = vec![Vec::new(); k];
            let mut queue = VecDeque::from([src]);
            depth[src] = 0;
            while let Some(u) = queue.pop_front() {
                if depth[u] == k {
                    continue;
                }
                for &v in &adj[u] {
                    if depth[v] == usize::MAX {
                        depth[v] = depth[u] + 1;
                        out[depth[v] - 1].push(v);
                        queue.push_back(v);
                    }
                }
            }
            for r in &mut out {
                r.sort_unstable();
            }
            out
        })
        .collect();
    Ok(RingNeighborhoods { k, rings })
}

/// How the K ring averages are combined into the neighbour target `A_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Mean of the ring averages over the nonempty rings.
    #[default]
    Normalized,
    /// Sum of the ring averages.
    Literal,
}

/// Sparse operator `M` with `(M·Z)_i = z_i − A_i`, where `A_i` combines the
/// ring means of vertex `i`. Empty rings are skipped; a vertex with no
/// nonempty ring gets an all-zero row.
pub fn similarity_operator(rings: &RingNeighborhoods, mode: SimMode) -> (Arc<SparsePattern>, Vec<f64>) {
    let n = rings.num_vertices();
    let mut entries = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        let nonempty: Vec<&[usize]> = (1..=rings.k())
            .map(|k| rings.ring(i, k))
            .filter(|r| !r.is_empty())
            .collect();
        if nonempty.is_empty() {
            continue;
        }
        let ring_scale = match mode {
            SimMode::Normalized => 1.0 / nonempty.len() as f64,
            SimMode::Literal => 1.0,
        };
        entries.push((i, i));
        weights.push(1.0);
        for r in nonempty {
            let w = ring_scale / r.len() as f64;
            for &j in r {
                entries.push((i, j));
                weights.push(-w);
            }
        }
    }
    let pattern = SparsePattern::new(n, n, entries).expect("entries are in range");
    (Arc::new(pattern), weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn two_point_assignment_and_tie() {
        let kp = KeyPointSet::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let a = assign_regions(&[[0.2, 0.0, 0.0], [0.5, 0.0, 0.0], [0.9, 1.0, 0.0]], &kp);
        assert_eq!(a.region, vec![0, 0, 1]);
        assert_eq!(a.local[2], [-0.09999999999999998, 1.0, 0.0]);
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(KeyPointSet::new(vec![]).unwrap_err(), RegionError::NoKeyPoints);
        let kp = KeyPointSet::new(vec![[0.0; 3]]).unwrap();
        assert!(assign_regions(&[], &kp).is_empty());
    }

    #[test]
    fn local_transform_examples() {
        let p = [1.0, 0.0, 0.0];
        assert_eq!(local_transform(p, p), [0.0; 3]);
        assert_eq!(local_transform([1.0, 2.0, 3.0], p), [0.0, 2.0, 3.0]);
    }

    #[test]
    fn icosahedron_first_ring() {
        let r = ring_neighborhoods(&fixtures::icosphere(0), 3).unwrap();
        for i in 0..12 {
            assert_eq!(r.ring(i, 1).len(), 5);
            assert_eq!(r.ring(i, 2).len(), 5);
            assert_eq!(r.ring(i, 3).len(), 1);
        }
    }

    #[test]
    fn path_graph_rings() {
        let adj = vec![vec![1], vec![0, 2], vec![1]];
        let r = rings_from_adjacency(&adj, 2).unwrap();
        assert_eq!(r.ring(0, 1), &[1]);
        assert_eq!(r.ring(0, 2), &[2]);
        assert_eq!(r.ring(1, 2), &[] as &[usize]);
        assert_eq!(rings_from_adjacency(&adj, 0).unwrap_err(), RegionError::InvalidRingCount(0));
    }

    #[test]
    fn operator_rows_sum_to_zero_in_normalized_mode() {
        let r = ring_neighborhoods(&fixtures::icosphere(1), 3).unwrap();
        let (p, w) = similarity_operator(&r, SimMode::Normalized);
        let mut row_sum = vec![0.0; r.num_vertices()];
        for (&(i, _), &v) in p.entries().iter().zip(&w) {
            row_sum[i] += v;
        }
        assert!(row_sum.iter().all(|s| s.abs() < 1e-12));
    }
}
