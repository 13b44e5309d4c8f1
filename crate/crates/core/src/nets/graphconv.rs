use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;

use super::NetError;
use crate::diffcore::{Graph, ParameterStore, SparsePattern, Tensor, Var};
use crate::geometry::TriangleMesh;
use crate::rng::Rng;

/// Sparse operators of one mesh graph: the scaled Laplacian used by
/// Chebyshev filters and the directed edge list (with self-loops) used by
/// vertex-adaptive convolution.
#[derive(Debug, Clone)]
pub struct MeshGraph {
    num_vertices: usize,
    laplacian: Arc<SparsePattern>,
    laplacian_weights: Tensor,
    directed: Arc<SparsePattern>,
}

impl MeshGraph {
    pub fn from_mesh(mesh: &TriangleMesh) -> Self {
        Self::from_edges(mesh.num_vertices(), mesh.edges())
    }

    /// `L̃ = 2L/λ_max − I` with `L = I − D^{-1/2} A D^{-1/2}` and `λ_max = 2`,
    /// i.e. `L̃ = −D^{-1/2} A D^{-1/2}`. Isolated vertices get empty rows.
    pub fn from_edges(num_vertices: usize, edges: &[[usize; 2]]) -> Self {
        let mut adj = vec![Vec::new(); num_vertices];
        for &[a, b] in edges {
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for n in &mut adj {
            n.sort_unstable();
            n.dedup();
        }
        let mut lap = Vec::new();
        let mut lw = Vec::new();
        let mut directed = Vec::new();
        for (i, n) in adj.iter().enumerate() {
            let mut incoming: Vec<usize> = n.clone();
            incoming.push(i);
            incoming.sort_unstable();
            directed.extend(incoming.into_iter().map(|j| (i, j)));
            for &j in n {
                lap.push((i, j));
                lw.push(-1.0 / ((n.len() * adj[j].len()) as f64).sqrt());
            }
        }
        Self {
            num_vertices,
            laplacian: Arc::new(SparsePattern::new(num_vertices, num_vertices, lap).unwrap()),
            laplacian_weights: Tensor::matrix(lw.len(), 1, lw).unwrap(),
            directed: Arc::new(SparsePattern::new(num_vertices, num_vertices, directed).unwrap()),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    /// Directed edges `j → i` as `(i, j)` pairs, self-loops included.
    pub fn directed_edges(&self) -> &[(usize, usize)] {
        self.directed.entries()
    }

    pub fn num_directed_edges(&self) -> usize {
        self.directed.nnz()
    }

    pub fn laplacian_entries(&self) -> (&[(usize, usize)], &[f64]) {
        (self.laplacian.entries(), self.laplacian_weights.data())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub n: usize,
    pub m: usize,
    pub k: usize,
}

fn check_input(g: &Graph, x: Var, graph: &MeshGraph, shape: ConvShape, op: &str) -> Result<(), NetError> {
    let s = g.value(x).shape();
    if s != [graph.num_vertices(), shape.n] {
        return Err(NetError::Shape(format!(
            "{op} expects input [{}, {}], got {s:?}",
            graph.num_vertices(),
            shape.n
        )));
    }
    Ok(())
}

/// Chebyshev filter. Parameters: `weight` `[k·n, m]` (row block `j` is
/// `W_j`) and `bias` `[1, m]`.
pub fn chebconv_forward(
    g: &mut Graph,
    graph: &MeshGraph,
    shape: ConvShape,
    weight: Var,
    bias: Var,
    x: Var,
) -> Result<Var, NetError> {
    check_input(g, x, graph, shape, "chebconv")?;
    let lw = g.constant(graph.laplacian_weights.clone());
    let mut terms = vec![x];
    for j in 1..shape.k {
        let lx = g.sparse_matmul(lw, terms[j - 1], graph.laplacian.clone())?;
        let t = if j == 1 {
            lx
        } else {
            let twice = g.scalar_mul(lx, 2.0)?;
            g.sub(twice, terms[j - 2])?
        };
        terms.push(t);
    }
    let stacked = if terms.len() == 1 {
        x
    } else {
        g.concat_cols(&terms)?
    };
    let y = g.matmul(stacked, weight)?;
    Ok(g.add(y, bias)?)
}

/// Vertex-adaptive convolution. Parameters: `basis` `[n, k·m]` (column block
/// `b` is `B_b`), `alpha` `[E_dir, k]` (one row per directed edge, in
/// [`MeshGraph::directed_edges`] order) and `bias` `[1, m]`.
pub fn vcconv_forward(
    g: &mut Graph,
    graph: &MeshGraph,
    shape: ConvShape,
    basis: Var,
    alpha: Var,
    bias: Var,
    x: Var,
) -> Result<Var, NetError> {
    check_input(g, x, graph, shape, "vcconv")?;
    let a = g.value(alpha).shape();
    if a != [graph.num_directed_edges(), shape.k] {
        return Err(NetError::Topology(format!(
            "vcconv coefficients have shape {a:?}, graph needs [{}, {}]",
            graph.num_directed_edges(),
            shape.k
        )));
    }
    let y = g.matmul(x, basis)?;
    let mut acc: Option<Var> = None;
    for b in 0..shape.k {
        let yb = g.slice_cols(y, b * shape.m, (b + 1) * shape.m)?;
        let ab = g.slice_cols(alpha, b, b + 1)?;
        let term = g.sparse_matmul(ab, yb, graph.directed.clone())?;
        acc = Some(match acc {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    let acc = acc.ok_or_else(|| NetError::Config("vcconv needs k ≥ 1".into()))?;
    Ok(g.add(acc, bias)?)
}

pub(super) fn param(params: &BTreeMap<String, Var>, name: &str) -> Result<Var, NetError> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| NetError::MissingParameter(name.to_string()))
}

fn uniform(rows: usize, cols: usize, a: f64, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect()).unwrap()
}

pub fn init_cheb(store: &mut ParameterStore, prefix: &str, s: ConvShape, rng: &mut Rng) {
    let a = 1.0 / ((s.k * s.n) as f64).sqrt();
    store.insert(format!("{prefix}.weight"), uniform(s.k * s.n, s.m, a, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(1, s.m));
}

pub fn init_vc(store: &mut ParameterStore, prefix: &str, s: ConvShape, edges: usize, rng: &mut Rng) {
    let a = 1.0 / (s.n as f64).sqrt();
    store.insert(format!("{prefix}.basis"), uniform(s.n, s.k * s.m, a, rng));
    let c = 1.0 / (s.k as f64).sqrt();
    store.insert(format!("{prefix}.alpha"), uniform(edges, s.k, c, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(1, s.m));
}
