//! Composition of local fields into one global field, zero iso-surface
//! extraction by marching cubes, and mesh export.

mod tables;

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParameterStore, Tensor};
use crate::geometry::io::{write_obj, write_ply};
use crate::geometry::vec3::{add, cross, norm, scale, sub};
use crate::geometry::{GeometryError, MeshFormat, Point3, TriangleMesh};
use crate::nets::{self, MeshGraph, ModelConfig, NetError};
use crate::regions::{local_transform_scaled, KeyPointSet};

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("field value at grid node {node} is not finite")]
    NonFinite { node: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Regular lattice of `resolution[a]` nodes per axis spanning `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub resolution: [usize; 3],
    pub lo: Point3,
    pub hi: Point3,
}

impl GridSpec {
    pub fn new(resolution: [usize; 3], lo: Point3, hi: Point3) -> Result<Self, ExtractError> {
        let g = Self { resolution, lo, hi };
        g.validate()?;
        Ok(g)
    }

    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self, ExtractError> {
        Self::new([n; 3], [lo; 3], [hi; 3])
    }

    /// `n³` nodes over the bounding box of `mesh` inflated by `margin` of
    /// its extent on every side.
    pub fn around(mesh: &TriangleMesh, n: usize, margin: f64) -> Result<Self, ExtractError> {
        let (lo, hi) = mesh.bounding_box().ok_or(GeometryError::EmptyMesh)?;
        let pad = scale(sub(hi, lo), margin);
        Self::new([n; 3], sub(lo, pad), add(hi, pad))
    }

    pub fn validate(&self) -> Result<(), ExtractError> {
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(ExtractError::Grid(format!(
                "resolution {:?} needs at least 2 nodes per axis",
                self.resolution
            )));
        }
        if (0..3).any(|a| !(self.lo[a].is_finite() && self.hi[a].is_finite() && self.hi[a] > self.lo[a])) {
            return Err(ExtractError::Grid(format!("empty bounds {:?} .. {:?}", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> Point3 {
        let c = |a: usize| (self.hi[a] - self.lo[a]) / (self.resolution[a] - 1) as f64;
        [c(0), c(1), c(2)]
    }

    pub fn cell_diagonal(&self) -> f64 {
        norm(self.cell_size())
    }

    pub fn num_nodes(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Point3 {
        let c = self.cell_size();
        [
            self.lo[0] + i as f64 * c[0],
            self.lo[1] + j as f64 * c[1],
            self.lo[2] + k as f64 * c[2],
        ]
    }

    /// Every node, x fastest.
    pub fn nodes(&self) -> Vec<Point3> {
        let [nx, ny, nz] = self.resolution;
        let mut out = Vec::with_capacity(self.num_nodes());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(self.node(i, j, k));
                }
            }
        }
        out
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Zero iso-surface of sampled node values (`grid.nodes()` order). Faces
/// wind so their normals point toward increasing field values. Vertices on
/// lattice edges are shared between cells; zero-area faces and unused
/// vertices are dropped.
pub fn marching_cubes(values: &[f64], grid: &GridSpec) -> Result<TriangleMesh, ExtractError> {
    grid.validate()?;
    if values.len() != grid.num_nodes() {
        return Err(ExtractError::Grid(format!(
            "{} values for {} nodes",
            values.len(),
            grid.num_nodes()
        )));
    }
    if let Some(node) = values.iter().position(|v| !v.is_finite()) {
        return Err(ExtractError::NonFinite { node });
    }
    let [nx, ny, nz] = grid.resolution;
    let cell = grid.cell_size();
    let mut vertices: Vec<Point3> = Vec::new();
    let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let idx: [usize; 8] =
                    CORNERS.map(|c| grid.node_index(i + c[0], j + c[1], k + c[2]));
                let mut cube = 0usize;
                for (c, &n) in idx.iter().enumerate() {
                    if values[n] < 0.0 {
                        cube |= 1 << c;
                    }
                }
                let mask = tables::EDGE_TABLE[cube];
                if mask == 0 {
                    continue;
                }
                let mut edge_vertex = [usize::MAX; 12];
                for (e, &[a, b]) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    // canonical direction: from the lower lattice node
                    let (na, nb) = if idx[a] < idx[b] { (idx[a], idx[b]) } else { (idx[b], idx[a]) };
                    let axis = match nb - na {
                        1 => 0,
                        d if d == nx => 1,
                        _ => 2,
                    };
                    edge_vertex[e] = *cache.entry((na, axis)).or_insert_with(|| {
                        let (ia, ja, ka) = (na % nx, (na / nx) % ny, na / (nx * ny));
                        let (va, vb) = (values[na], values[nb]);
                        let mut p = grid.node(ia, ja, ka);
                        p[axis] += va / (va - vb) * cell[axis];
                        vertices.push(p);
                        vertices.len() - 1
                    });
                }
                for tri in tables::TRI_TABLE[cube].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let f = [
                        edge_vertex[tri[0] as usize],
                        edge_vertex[tri[2] as usize],
                        edge_vertex[tri[1] as usize],
                    ];
                    faces.push(f);
                }
            }
        }
    }
    Ok(compact(vertices, faces))
}

fn compact(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> TriangleMesh {
    let area2 = |f: &[usize; 3]| {
        let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        norm(cross(sub(b, a), sub(c, a)))
    };
    let faces: Vec<[usize; 3]> = faces.into_iter().filter(|f| area2(f) > 0.0).collect();
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut kept = Vec::new();
    let faces = faces
        .into_iter()
        .map(|f| {
            f.map(|v| {
                if remap[v] == usize::MAX {
                    remap[v] = kept.len();
                    kept.push(vertices[v]);
                }
                remap[v]
            })
        })
        .collect();
    TriangleMesh::new(kept, faces).expect("indices remapped in range")
}

/// Samples `field` on every grid node, in parallel chunks, and extracts the
/// zero level-set.
pub fn extract_surface<E>(
    grid: &GridSpec,
    field: impl Fn(&[Point3]) -> Result<Vec<f64>, E> + Sync,
) -> Result<(TriangleMesh, Vec<f64>), ExtractError>
where
    E: Into<ExtractError> + Send,
{
    grid.validate()?;
    let nodes = grid.nodes();
    let chunks: Vec<Vec<f64>> = nodes
        .par_chunks(4096)
        .map(|c| field(c).map_err(Into::into))
        .collect::<Result<_, ExtractError>>()?;
    let values: Vec<f64> = chunks.concat();
    let mesh = marching_cubes(&values, grid)?;
    Ok((mesh, values))
}

/// The composed field of one shape: each query is routed to its nearest key
/// point `p_i` and answered by the decoder at `T_i(x)` with code `z_i`.
pub struct ShapeField<'a> {
    store: &'a ParameterStore,
    model: &'a ModelConfig,
    keypoints: KeyPointSet,
    codes: Tensor,
}

const CHUNK: usize = 4096;

impl<'a> ShapeField<'a> {
    /// `vertices`/`edges` describe the shape's scaffold mesh (ignored by
    /// global-code models).
    pub fn new(
        store: &'a ParameterStore,
        model: &'a ModelConfig,
        scaffold: &TriangleMesh,
        latent: &Tensor,
    ) -> Result<Self, ExtractError> {
        let graph = model.is_local().then(|| MeshGraph::from_mesh(scaffold));
        let codes = nets::local_codes_value(store, model, graph.as_ref(), latent)?;
        let keypoints = model.keypoints(scaffold.vertices())?;
        Ok(Self {
            store,
            model,
            keypoints,
            codes,
        })
    }

    /// Explicit key points and codes, one code row per key point.
    pub fn from_codes(
        store: &'a ParameterStore,
        model: &'a ModelConfig,
        keypoints: KeyPointSet,
        codes: Tensor,
    ) -> Result<Self, ExtractError> {
        if codes.rows() != keypoints.len() || codes.cols() != model.decoder.latent_dim {
            return Err(ExtractError::Net(NetError::Shape(format!(
                "{} key points need codes [{}, {}], got {:?}",
                keypoints.len(),
                keypoints.len(),
                model.decoder.latent_dim,
                codes.shape()
            ))));
        }
        Ok(Self {
            store,
            model,
            keypoints,
            codes,
        })
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    fn batch(&self, pts: &[Point3]) -> (Tensor, Tensor) {
        let s = self.model.local_scale;
        let m = self.codes.cols();
        let mut x = Vec::with_capacity(pts.len() * 3);
        let mut c = Vec::with_capacity(pts.len() * m);
        for &p in pts {
            let i = self.keypoints.nearest(p);
            x.extend(local_transform_scaled(p, self.keypoints.points()[i], s));
            c.extend_from_slice(self.codes.row_slice(i));
        }
        (
            Tensor::matrix(pts.len(), 3, x).unwrap(),
            Tensor::matrix(pts.len(), m, c).unwrap(),
        )
    }

    fn values_chunk(&self, pts: &[Point3]) -> Result<Vec<f64>, NetError> {
        let (x, c) = self.batch(pts);
        let mut v = nets::decoder_eval(self.store, &self.model.decoder, x, c)?;
        let s = self.model.local_scale;
        if s != 1.0 {
            v.iter_mut().for_each(|f| *f /= s);
        }
        Ok(v)
    }

    /// Field values at `pts` (evaluated in parallel chunks).
    pub fn values(&self, pts: &[Point3]) -> Result<Vec<f64>, NetError> {
        let parts: Vec<Vec<f64>> = pts
            .par_chunks(CHUNK)
            .map(|c| self.values_chunk(c))
            .collect::<Result<_, _>>()?;
        Ok(parts.concat())
    }

    pub fn compose_sdf(&self, x: Point3) -> Result<f64, NetError> {
        Ok(self.values_chunk(&[x])?[0])
    }

    /// Spatial gradients `∇ₓF` at `pts`.
    pub fn gradients(&self, pts: &[Point3]) -> Result<Vec<Point3>, NetError> {
        let parts: Vec<Vec<Point3>> = pts
            .par_chunks(CHUNK)
            .map(|chunk| {
                let (x, c) = self.batch(chunk);
                let mut g = Graph::new();
                let params = self.store.bind(&mut g, |n| n.starts_with("decoder."), |_| false)?;
                let (xv, cv) = (g.constant(x), g.constant(c));
                let out = nets::decoder_forward(&mut g, &params, &self.model.decoder, xv, cv, true)?;
                let gv = g.value(out.grad.unwrap());
                Ok((0..chunk.len())
                    .map(|r| {
                        let row = gv.row_slice(r);
                        [row[0], row[1], row[2]]
                    })
                    .collect())
            })
            .collect::<Result<_, NetError>>()?;
        Ok(parts.concat())
    }

    /// Samples the field on `grid` and extracts its zero level-set.
    pub fn extract(&self, grid: &GridSpec) -> Result<(TriangleMesh, Vec<f64>), ExtractError> {
        extract_surface(grid, |p| self.values(p))
    }
}

/// Writes `mesh` as OBJ or PLY. `vertex_scalars` is only representable in
/// PLY and is rejected for OBJ.
pub fn export_mesh(
    mesh: &TriangleMesh,
    path: &Path,
    format: MeshFormat,
    comments: &[String],
    vertex_scalars: &[(&str, &[f64])],
) -> Result<(), ExtractError> {
    match format {
        MeshFormat::Obj => {
            if !vertex_scalars.is_empty() {
                return Err(ExtractError::Geometry(GeometryError::InvalidArgument(
                    "per-vertex scalars need PLY output".into(),
                )));
            }
            write_obj(mesh, path, comments)?
        }
        MeshFormat::PlyAscii => write_ply(mesh, path, false, vertex_scalars, comments)?,
        MeshFormat::PlyBinary => write_ply(mesh, path, true, vertex_scalars, comments)?,
    }
    Ok(())
}

/// Orientation check: mean of `n_f · ∇F` sign over faces, using central
/// differences of `field` at face centroids. Positive when faces point
/// toward increasing values.
pub fn orientation_score(mesh: &TriangleMesh, field: impl Fn(Point3) -> f64, h: f64) -> f64 {
    if mesh.num_faces() == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for f in 0..mesh.num_faces() {
        let [a, b, c] = mesh.triangle(f);
        let ctr = scale(add(add(a, b), c), 1.0 / 3.0);
        let n = mesh.face_normal(f);
        let fp = field(add(ctr, scale(n, h)));
        let fm = field(sub(ctr, scale(n, h)));
        s += (fp - fm).signum();
    }
    s / mesh.num_faces() as f64
}
