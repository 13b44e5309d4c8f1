//! Procedural test shapes. All of them are radial deformations of the same
//! subdivided icosahedron, so shapes generated at one level share vertex
//! count, faces and edges.

use std::collections::HashMap;

use crate::geometry::vec3::{add, dot, normalized, scale};
use crate::geometry::{Point3, TriangleMesh};

fn icosahedron() -> (Vec<Point3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let v = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|&p| normalized(p))
    .collect();
    let f = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (v, f)
}

/// Unit sphere approximated by an icosahedron subdivided `level` times.
/// Level 0 has 12 vertices; each level roughly quadruples the count.
pub fn icosphere(level: u32) -> TriangleMesh {
    let (mut verts, mut faces) = icosahedron();
    for _ in 0..level {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Point3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let p = normalized(scale(add(verts[a], verts[b]), 0.5));
                verts.push(p);
                verts.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriangleMesh::new(verts, faces).expect("icosphere indices are valid")
}

fn radial(level: u32, radius: impl Fn(Point3) -> f64) -> TriangleMesh {
    icosphere(level).map_vertices(|d| scale(d, radius(d)))
}

/// Two lobes along the x axis joined by a narrow waist.
pub fn dumbbell(level: u32) -> TriangleMesh {
    radial(level, |d| 0.35 + 0.65 * d[0].abs().powi(4))
}

/// A small body with five narrow limbs (±x, ±y, +z).
pub fn multi_limb(level: u32) -> TriangleMesh {
    multi_limb_pose(level, 0)
}

/// Posed variant of [`multi_limb`]: every limb is tilted and stretched by a
/// deterministic pose-dependent amount. Pose 0 is the rest shape.
pub fn multi_limb_pose(level: u32, pose: usize) -> TriangleMesh {
    let rest: [(Point3, Point3); 5] = [
        ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        ([0.0, 1.0, 0.0], [1.0, 0.0, 0.0]),
        ([0.0, -1.0, 0.0], [1.0, 0.0, 0.0]),
        ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
    ];
    let limbs: Vec<(Point3, f64)> = rest
        .iter()
        .enumerate()
        .map(|(k, &(axis, bend))| {
            if pose == 0 {
                return (axis, 1.0);
            }
            let phase = 1.7 * pose as f64 + 2.3 * k as f64;
            let angle = 0.45 * phase.sin();
            let dir = add(scale(axis, angle.cos()), scale(bend, angle.sin()));
            (dir, 0.85 + 0.15 * (1.3 * phase).cos())
        })
        .collect();
    radial(level, |d| {
        let reach = limbs
            .iter()
            .map(|&(a, len)| len * dot(d, a).max(0.0).powi(LIMB_SHARPNESS))
            .fold(0.0, f64::max);
        LIMB_BODY + (1.0 - LIMB_BODY) * reach
    })
}

const LIMB_BODY: f64 = 0.25;
const LIMB_SHARPNESS: i32 = 24;

/// Fixture by name: `icosphere`, `dumbbell`, `multi_limb` or
/// `multi_limb_pose<n>`.
pub fn by_name(name: &str, level: u32) -> Option<TriangleMesh> {
    match name {
        "icosphere" | "sphere" => Some(icosphere(level)),
        "dumbbell" => Some(dumbbell(level)),
        "multi_limb" | "multi-limb" => Some(multi_limb(level)),
        _ => name
            .strip_prefix("multi_limb_pose")
            .and_then(|p| p.parse().ok())
            .map(|pose| multi_limb_pose(level, pose)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vec3::{cross, norm, sub};

    #[test]
    fn euler_characteristic_and_counts() {
        for level in 0..4 {
            let m = icosphere(level);
            let (v, e, f) = (m.num_vertices() as i64, m.edges().len() as i64, m.num_faces() as i64);
            assert_eq!(v - e + f, 2);
            assert_eq!(v, 10 * 4i64.pow(level) + 2);
        }
    }

    #[test]
    fn faces_wind_outward() {
        for m in [icosphere(2), dumbbell(2), multi_limb(2)] {
            for f in 0..m.num_faces() {
                let [a, b, c] = m.triangle(f);
                let n = cross(sub(b, a), sub(c, a));
                let centroid = scale(add(add(a, b), c), 1.0 / 3.0);
                assert!(dot(n, centroid) > 0.0);
            }
        }
    }

    #[test]
    fn shared_topology() {
        let (a, b, c) = (icosphere(3), dumbbell(3), multi_limb(3));
        assert_eq!(a.faces(), b.faces());
        assert_eq!(a.edges(), c.edges());
        assert!(a.vertices().iter().all(|&v| (norm(v) - 1.0).abs() < 1e-12));
    }
}
