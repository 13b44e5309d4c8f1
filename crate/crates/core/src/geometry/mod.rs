//! Triangle meshes, mesh I/O, surface/space sampling and exact unsigned
//! point-to-triangle-soup distances.

mod bvh;
pub mod io;
mod kdtree;
mod normalize;
mod sampling;
pub mod vec3;

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

pub use bvh::{closest_point_on_triangle, point_triangle_distance, TriangleIndex};
pub use io::{load_mesh, load_mesh_from_bytes, MeshFormat};
pub use kdtree::PointIndex;
pub use normalize::{normalize_mesh, NormalizationTransform};
pub use sampling::{
    max_normal_error, read_sample_cache, sample_perturbed, sample_surface, write_sample_cache,
    PerturbConfig, SampleCacheInfo, SampleSet, SAMPLE_COLUMNS,
};

pub type Point3 = [f64; 3];

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("{path}: {message}")]
    Load { path: String, message: String },
    #[error("unsupported mesh format: {0}")]
    UnsupportedFormat(String),
    #[error("empty mesh")]
    EmptyMesh,
    #[error("mesh has zero extent")]
    ZeroExtent,
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Indexed triangle mesh. The undirected edge set is derived from the faces
/// and stored with `a < b`, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&index) = f.iter().find(|&&i| i >= vertices.len()) {
                return Err(GeometryError::IndexOutOfRange {
                    face: fi,
                    index,
                    count: vertices.len(),
                });
            }
        }
        let edges = derive_edges(&faces);
        Ok(Self {
            vertices,
            faces,
            edges,
        })
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            faces: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Point3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * vec3::norm(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
    }

    /// Unit normal following the face winding; zero for a degenerate face.
    pub fn face_normal(&self, f: usize) -> Point3 {
        let [a, b, c] = self.triangle(f);
        vec3::normalized(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
    }

    /// Drops zero-area faces. Vertices are kept so indices stay valid.
    pub fn remove_degenerate_faces(&mut self) -> usize {
        let before = self.faces.len();
        let keep: Vec<[usize; 3]> = (0..self.faces.len())
            .filter(|&f| self.face_area(f) > 0.0)
            .map(|f| self.faces[f])
            .collect();
        self.faces = keep;
        self.edges = derive_edges(&self.faces);
        before - self.faces.len()
    }

    /// Sorted neighbour lists per vertex.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &[a, b] in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for n in &mut adj {
            n.sort_unstable();
        }
        adj
    }

    pub fn bounding_box(&self) -> Option<(Point3, Point3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (vec3::min(lo, *v), vec3::max(hi, *v))
        }))
    }

    pub fn map_vertices(&self, f: impl Fn(Point3) -> Point3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            faces: self.faces.clone(),
            edges: self.edges.clone(),
        }
    }

    /// Content hash over vertex coordinates (bit patterns) and face indices.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        for v in &self.vertices {
            for c in v {
                h.update(c.to_le_bytes());
            }
        }
        h.update((self.faces.len() as u64).to_le_bytes());
        for f in &self.faces {
            for &i in f {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn derive_edges(faces: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut set = BTreeSet::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            if a != b {
                set.insert([a.min(b), a.max(b)]);
            }
        }
    }
    set.into_iter().collect()
}
