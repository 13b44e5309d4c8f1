//! Bounding-volume hierarchy over mesh triangles for exact closest-triangle
//! queries.

use super::vec3::{self, add, dot, scale, sub};
use super::{GeometryError, Point3, TriangleMesh};

const LEAF_SIZE: usize = 4;

/// Closest point to `p` on triangle `(a, b, c)`, by Voronoi-region case
/// analysis (vertex, edge or face interior).
pub fn closest_point_on_triangle(p: Point3, a: Point3, b: Point3, c: Point3) -> Point3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}

pub fn point_triangle_distance(p: Point3, tri: &[Point3; 3]) -> f64 {
    vec3::dist(p, closest_point_on_triangle(p, tri[0], tri[1], tri[2]))
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Node {
    lo: Point3,
    hi: Point3,
    kind: NodeKind,
}

/// Static BVH over the faces of a mesh.
#[derive(Debug, Clone)]
pub struct TriangleIndex {
    triangles: Vec<[Point3; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

fn box_dist2(p: Point3, lo: Point3, hi: Point3) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let e = if p[k] < lo[k] {
            lo[k] - p[k]
        } else if p[k] > hi[k] {
            p[k] - hi[k]
        } else {
            0.0
        };
        d += e * e;
    }
    d
}

impl TriangleIndex {
    pub fn new(mesh: &TriangleMesh) -> Result<Self, GeometryError> {
        if mesh.num_faces() == 0 {
            return Err(GeometryError::EmptyMesh);
        }
        let triangles: Vec<[Point3; 3]> = (0..mesh.num_faces()).map(|f| mesh.triangle(f)).collect();
        let mut idx = Self {
            order: (0..triangles.len()).collect(),
            triangles,
            nodes: Vec::new(),
        };
        let centroids: Vec<Point3> = idx
            .triangles
            .iter()
            .map(|t| scale(add(add(t[0], t[1]), t[2]), 1.0 / 3.0))
            .collect();
        let n = idx.triangles.len();
        idx.build(0, n, &centroids);
        Ok(idx)
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    fn bounds(&self, start: usize, end: usize) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &f in &self.order[start..end] {
            for v in &self.triangles[f] {
                lo = vec3::min(lo, *v);
                hi = vec3::max(hi, *v);
            }
        }
        (lo, hi)
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Point3]) -> usize {
        let (lo, hi) = self.bounds(start, end);
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            kind: NodeKind::Leaf {
                start,
                count: end - start,
            },
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let mut clo = [f64::INFINITY; 3];
        let mut chi = [f64::NEG_INFINITY; 3];
        for &f in &self.order[start..end] {
            clo = vec3::min(clo, centroids[f]);
            chi = vec3::max(chi, centroids[f]);
        }
        let axis = (0..3)
            .max_by(|&a, &b| (chi[a] - clo[a]).total_cmp(&(chi[b] - clo[b])))
            .unwrap();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        let left = self.build(start, mid, centroids);
        let right = self.build(mid, end, centroids);
        self.nodes[id].kind = NodeKind::Inner { left, right };
        id
    }

    /// Unsigned distance to the closest triangle and that triangle's face
    /// index. Equal distances resolve to the lowest face index, so the result
    /// is identical to a linear scan over all faces.
    pub fn distance(&self, p: Point3) -> (f64, usize) {
        let (d2, f) = self.closest_sq(p);
        (d2.sqrt(), f)
    }

    fn closest_sq(&self, p: Point3) -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if box_dist2(p, node.lo, node.hi) > best.0 {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &f in &self.order[start..start + count] {
                        let t = &self.triangles[f];
                        let d2 = vec3::dist2(p, closest_point_on_triangle(p, t[0], t[1], t[2]));
                        if d2 < best.0 || (d2 == best.0 && f < best.1) {
                            best = (d2, f);
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = box_dist2(p, self.nodes[left].lo, self.nodes[left].hi);
                    let dr = box_dist2(p, self.nodes[right].lo, self.nodes[right].hi);
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best
    }

    /// Closest surface point together with its face index.
    pub fn closest_point(&self, p: Point3) -> (Point3, usize) {
        let (_, f) = self.closest_sq(p);
        let t = &self.triangles[f];
        (closest_point_on_triangle(p, t[0], t[1], t[2]), f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::Rng;

    /// Independent route: in-plane projection if it lands inside the
    /// triangle, otherwise the best of the three edge segments.
    fn oracle_distance(p: Point3, t: &[Point3; 3]) -> f64 {
        let seg = |a: Point3, b: Point3| {
            let ab = sub(b, a);
            let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
            vec3::dist(p, add(a, scale(ab, t)))
        };
        let n = vec3::normalized(vec3::cross(sub(t[1], t[0]), sub(t[2], t[0])));
        let h = dot(sub(p, t[0]), n);
        let q = sub(p, scale(n, h));
        let inside = (0..3).all(|k| {
            let e = sub(t[(k + 1) % 3], t[k]);
            dot(vec3::cross(e, sub(q, t[k])), n) >= 0.0
        });
        if inside {
            h.abs()
        } else {
            seg(t[0], t[1]).min(seg(t[1], t[2])).min(seg(t[2], t[0]))
        }
    }

    fn brute(mesh: &TriangleMesh, p: Point3) -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for f in 0..mesh.num_faces() {
            let t = mesh.triangle(f);
            let d2 = vec3::dist2(p, closest_point_on_triangle(p, t[0], t[1], t[2]));
            if d2 < best.0 {
                best = (d2, f);
            }
        }
        (best.0.sqrt(), best.1)
    }

    #[test]
    fn point_above_triangle() {
        let t = [[-1.0, -1.0, 0.0], [2.0, -1.0, 0.0], [-1.0, 2.0, 0.0]];
        assert_eq!(point_triangle_distance([0.0, 0.0, 0.75], &t), 0.75);
        assert_eq!(point_triangle_distance([0.0, 0.0, -2.5], &t), 2.5);
        assert_eq!(point_triangle_distance(t[1], &t), 0.0);
    }

    #[test]
    fn case_analysis_matches_projection_oracle() {
        let mut rng = crate::rng::stream(9, "tri", 0);
        let mut r = || rng.random_range(-1.0..1.0);
        for _ in 0..2000 {
            let t = [[r(), r(), r()], [r(), r(), r()], [r(), r(), r()]];
            let p = [2.0 * r(), 2.0 * r(), 2.0 * r()];
            let a = point_triangle_distance(p, &t);
            let b = oracle_distance(p, &t);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn single_triangle_index() {
        let m = TriangleMesh::new(vec![[0., 0., 0.], [1., 0., 0.], [0., 1., 0.]], vec![[0, 1, 2]]).unwrap();
        let idx = TriangleIndex::new(&m).unwrap();
        let p = [0.7, 0.8, -0.3];
        assert_eq!(idx.distance(p).0, point_triangle_distance(p, &m.triangle(0)));
    }

    #[test]
    fn matches_brute_force_including_far_queries() {
        let mesh = fixtures::icosphere(3);
        let idx = TriangleIndex::new(&mesh).unwrap();
        let mut rng = crate::rng::stream(10, "bvh", 0);
        for i in 0..1000 {
            let s = if i % 10 == 0 { 50.0 } else { 1.5 };
            let p = [
                rng.random_range(-s..s),
                rng.random_range(-s..s),
                rng.random_range(-s..s),
            ];
            assert_eq!(idx.distance(p), brute(&mesh, p));
        }
    }

    #[test]
    fn vertex_query_is_zero() {
        let mesh = fixtures::icosphere(2);
        let idx = TriangleIndex::new(&mesh).unwrap();
        for &v in mesh.vertices() {
            assert_eq!(idx.distance(v).0, 0.0);
        }
    }

    #[test]
    fn empty_mesh_rejected() {
        assert!(TriangleIndex::new(&TriangleMesh::empty()).is_err());
    }
}
