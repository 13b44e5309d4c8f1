use serde::{Deserialize, Serialize};

use super::vec3;
use super::{GeometryError, Point3, TriangleMesh};

/// Maps input coordinates into the normalized frame: `(p - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub center: Point3,
    pub scale: f64,
    /// Unit of the input coordinates ("mm", "cm", "m", or a free label).
    pub unit_name: String,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
            unit_name: "units".into(),
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        vec3::scale(vec3::sub(p, self.center), 1.0 / self.scale)
    }

    pub fn invert(&self, q: Point3) -> Point3 {
        vec3::add(vec3::scale(q, self.scale), self.center)
    }

    /// Converts a normalized-frame length to input units.
    pub fn length_to_input(&self, d: f64) -> f64 {
        d * self.scale
    }

    /// Millimetres per input unit, when the unit is a known metric one.
    pub fn mm_per_unit(&self) -> Option<f64> {
        match self.unit_name.as_str() {
            "mm" => Some(1.0),
            "cm" => Some(10.0),
            "m" => Some(1000.0),
            _ => None,
        }
    }
}

/// Centres the bounding box at the origin and scales the bounding sphere
/// (about that centre) to radius 1.
pub fn normalize_mesh(mesh: &TriangleMesh) -> Result<(TriangleMesh, NormalizationTransform), GeometryError> {
    let (lo, hi) = mesh.bounding_box().ok_or(GeometryError::EmptyMesh)?;
    let center = vec3::scale(vec3::add(lo, hi), 0.5);
    let radius = mesh
        .vertices()
        .iter()
        .map(|&v| vec3::dist(v, center))
        .fold(0.0, f64::max);
    if !(radius.is_finite() && radius > 0.0) {
        return Err(GeometryError::ZeroExtent);
    }
    let t = NormalizationTransform {
        center,
        scale: radius,
        unit_name: "units".into(),
    };
    Ok((mesh.map_vertices(|v| t.apply(v)), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn cube(lo: f64, hi: f64) -> TriangleMesh {
        let v: Vec<Point3> = (0..8)
            .map(|i| {
                [
                    if i & 1 == 0 { lo } else { hi },
                    if i & 2 == 0 { lo } else { hi },
                    if i & 4 == 0 { lo } else { hi },
                ]
            })
            .collect();
        TriangleMesh::new(v, vec![[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5]]).unwrap()
    }

    #[test]
    fn cube_is_centered_with_unit_radius() {
        let (m, t) = normalize_mesh(&cube(0.0, 2.0)).unwrap();
        assert_eq!(t.center, [1.0, 1.0, 1.0]);
        let max = m.vertices().iter().map(|&v| vec3::norm(v)).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalized_mesh_gives_identity() {
        let (m, _) = normalize_mesh(&cube(0.0, 2.0)).unwrap();
        let (_, t) = normalize_mesh(&m).unwrap();
        assert!(t.center.iter().all(|c| c.abs() < 1e-12));
        assert!((t.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transform_reproduces_normalized_vertices_and_inverts() {
        let src = fixtures::dumbbell(1).map_vertices(|v| [3.0 * v[0] + 1.0, 2.0 * v[1] - 5.0, v[2] + 0.25]);
        let (m, t) = normalize_mesh(&src).unwrap();
        for (a, b) in src.vertices().iter().zip(m.vertices()) {
            assert!(vec3::dist(t.apply(*a), *b) < 1e-15);
            assert!(vec3::dist(t.invert(*b), *a) < 1e-12);
        }
    }

    #[test]
    fn zero_extent_rejected() {
        let m = TriangleMesh::new(vec![[1.0; 3]; 3], vec![]).unwrap();
        assert!(matches!(normalize_mesh(&m), Err(GeometryError::ZeroExtent)));
        assert!(matches!(normalize_mesh(&TriangleMesh::empty()), Err(GeometryError::EmptyMesh)));
    }
}
