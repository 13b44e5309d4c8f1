//! Reverse-mode gradients against central finite differences.

mod common;

use std::sync::Arc;

use common::*;
use localsdf::diffcore::SparsePattern;
use localsdf::geometry::TriangleMesh;
use localsdf::losses::{self, CodeReduction, LossTerms, LossWeights, RegMode};
use localsdf::nets::decoder::{decoder_forward, init_decoder_uniform, MlpDecoderConfig};
use localsdf::nets::graphconv::{chebconv_forward, init_cheb, vcconv_forward, ConvShape, MeshGraph};
use localsdf::regions::{ring_neighborhoods, similarity_operator, SimMode};
use localsdf::{Graph, ParameterStore, Tensor, Var};
use rand::Rng as _;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
const INSTANCES: u64 = 20;

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

/// Runs `make` for every instance and asserts the worst relative error.
fn suite(name: &str, make: impl Fn(&mut Rng, u64) -> f64) {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = rng(name, i);
        let err = make(&mut rng, i);
        assert!(err.is_finite(), "{name} instance {i}: non-finite error");
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn unary(name: &str, input: impl Fn(&mut Rng, usize, usize) -> Tensor, op: impl Fn(&mut Graph, Var) -> Var) {
    unary_step(name, H, input, op)
}

fn unary_step(
    name: &str,
    h: f64,
    input: impl Fn(&mut Rng, usize, usize) -> Tensor,
    op: impl Fn(&mut Graph, Var) -> Var,
) {
    suite(name, |rng, i| {
        let (r, c) = dims(rng);
        let x = input(rng, r, c);
        fd_check(&[x], h, &|g, v| {
            let y = op(g, v[0]);
            readout(g, y, i)
        })
    });
}

fn plain(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    uniform(rng, r, c, -2.0, 2.0)
}

#[test]
fn matmul_gradients() {
    suite("matmul", |rng, i| {
        let (r, k) = dims(rng);
        let c = rng.random_range(1..5);
        let (a, b) = (plain(rng, r, k), plain(rng, k, c));
        fd_check(&[a, b], H, &|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            readout(g, y, i)
        })
    });
}

#[test]
fn broadcast_arithmetic_gradients() {
    type Bin = fn(&mut Graph, Var, Var) -> Var;
    let ops: [(&str, Bin); 3] = [
        ("add", |g, a, b| g.add(a, b).unwrap()),
        ("sub", |g, a, b| g.sub(a, b).unwrap()),
        ("mul", |g, a, b| g.mul(a, b).unwrap()),
    ];
    for (name, op) in ops {
        suite(name, |rng, i| {
            let (r, c) = dims(rng);
            // cycle through same shape, row broadcast, column broadcast, scalar
            let (br, bc) = match i % 4 {
                0 => (r, c),
                1 => (1, c),
                2 => (r, 1),
                _ => (1, 1),
            };
            let (a, b) = (plain(rng, r, c), plain(rng, br, bc));
            fd_check(&[a, b], H, &|g, v| {
                let y = op(g, v[0], v[1]);
                readout(g, y, i)
            })
        });
    }
}

#[test]
fn concat_and_slice_gradients() {
    suite("concat_cols", |rng, i| {
        let (r, c) = dims(rng);
        let c2 = rng.random_range(1..4);
        fd_check(&[plain(rng, r, c), plain(rng, r, c2)], H, &|g, v| {
            let y = g.concat_cols(&[v[0], v[1], v[0]]).unwrap();
            readout(g, y, i)
        })
    });
    suite("concat_rows", |rng, i| {
        let (r, c) = dims(rng);
        let r2 = rng.random_range(1..4);
        fd_check(&[plain(rng, r, c), plain(rng, r2, c)], H, &|g, v| {
            let y = g.concat_rows(&[v[1], v[0], v[1]]).unwrap();
            readout(g, y, i)
        })
    });
    suite("slice_rows", |rng, i| {
        let r = rng.random_range(2..6);
        let c = rng.random_range(1..4);
        let start = rng.random_range(0..r - 1);
        let end = rng.random_range(start + 1..=r);
        fd_check(&[plain(rng, r, c)], H, &|g, v| {
            let y = g.slice_rows(v[0], start, end).unwrap();
            readout(g, y, i)
        })
    });
    suite("slice_cols", |rng, i| {
        let r = rng.random_range(1..4);
        let c = rng.random_range(2..6);
        let start = rng.random_range(0..c - 1);
        let end = rng.random_range(start + 1..=c);
        fd_check(&[plain(rng, r, c)], H, &|g, v| {
            let y = g.slice_cols(v[0], start, end).unwrap();
            readout(g, y, i)
        })
    });
}

#[test]
fn gather_and_reshape_gradients() {
    suite("gather_rows", |rng, i| {
        let (r, c) = dims(rng);
        let n = rng.random_range(1..8);
        let idx: Arc<[usize]> = (0..n).map(|_| rng.random_range(0..r)).collect();
        fd_check(&[plain(rng, r, c)], H, &|g, v| {
            let y = g.gather_rows(v[0], idx.clone()).unwrap();
            readout(g, y, i)
        })
    });
    suite("reshape", |rng, i| {
        let (r, c) = dims(rng);
        fd_check(&[plain(rng, r, c)], H, &|g, v| {
            let y = g.reshape(v[0], 1, r * c).unwrap();
            readout(g, y, i)
        })
    });
}

#[test]
fn sparse_matmul_gradients() {
    suite("sparse_matmul", |rng, i| {
        let (rows, cols) = dims(rng);
        let c = rng.random_range(1..4);
        let nnz = rng.random_range(1..8);
        let entries = (0..nnz).map(|_| (rng.random_range(0..rows), rng.random_range(0..cols))).collect();
        let pattern = Arc::new(SparsePattern::new(rows, cols, entries).unwrap());
        let (w, x) = (plain(rng, nnz, 1), plain(rng, cols, c));
        fd_check(&[w, x], H, &|g, v| {
            let y = g.sparse_matmul(v[0], v[1], pattern.clone()).unwrap();
            readout(g, y, i)
        })
    });
}

#[test]
fn activation_gradients() {
    for beta in [1.0, 10.0, 100.0] {
        // inputs stay where βt is unsaturated; the third derivative grows
        // like β³, so the difference step shrinks with it
        let h = H / beta;
        let span = 2.0f64.min(4.0 / beta);
        let input = move |rng: &mut Rng, r, c| uniform(rng, r, c, -span, span);
        unary_step(&format!("softplus β={beta}"), h, input, |g, x| g.softplus(x, beta).unwrap());
        unary_step(&format!("softplus_derivative β={beta}"), h, input, |g, x| {
            g.softplus_derivative(x, beta).unwrap()
        });
    }
    unary("relu", |rng, r, c| away_from_zero(rng, r, c, 1e-3), |g, x| g.relu(x).unwrap());
    unary("abs", |rng, r, c| away_from_zero(rng, r, c, 1e-3), |g, x| g.abs(x).unwrap());
}

#[test]
fn pointwise_and_reduction_gradients() {
    unary("square", plain, |g, x| g.square(x).unwrap());
    unary("sqrt", |rng, r, c| uniform(rng, r, c, 0.1, 2.0), |g, x| g.sqrt(x).unwrap());
    unary("scalar_mul", plain, |g, x| g.scalar_mul(x, -1.7).unwrap());
    unary("l2_norm_rows", |rng, r, c| away_from_zero(rng, r, c, 0.1), |g, x| {
        g.l2_norm_rows(x).unwrap()
    });
    unary("sum", plain, |g, x| {
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    });
    unary("mean", plain, |g, x| {
        let s = g.square(x).unwrap();
        g.mean(s).unwrap()
    });
}

#[test]
fn random_compositions() {
    suite("composition", |rng, _| {
        let (r, c) = dims(rng);
        let (a, w) = (plain(rng, r, c), plain(rng, c, 3));
        fd_check(&[a, w], H, &|g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let s = g.softplus(h, 5.0).unwrap();
            let d = g.softplus_derivative(h, 5.0).unwrap();
            let p = g.mul(s, d).unwrap();
            let n = g.l2_norm_rows(p).unwrap();
            let q = g.square(n).unwrap();
            g.mean(q).unwrap()
        })
    });
}

// Composed losses on a small decoder.

fn small_decoder() -> MlpDecoderConfig {
    MlpDecoderConfig {
        latent_dim: 2,
        hidden: 6,
        num_layers: 3,
        skip_layer: Some(2),
        beta: 10.0,
    }
}

fn decoder_params(cfg: &MlpDecoderConfig, seed: u64) -> (Vec<String>, Vec<Tensor>) {
    let mut store = ParameterStore::new();
    init_decoder_uniform(&mut store, cfg, &mut rng("decoder", seed));
    let names: Vec<String> = store.names().cloned().collect();
    let values = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    (names, values)
}

fn bind(names: &[String], vars: &[Var]) -> std::collections::BTreeMap<String, Var> {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

fn unit_rows(rng: &mut Rng, n: usize) -> Tensor {
    let mut t = uniform(rng, n, 3, -1.0, 1.0);
    for i in 0..n {
        let norm = t.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for d in 0..3 {
            t.set(i, d, t.get(i, d) / norm);
        }
    }
    t
}

#[test]
fn sal_loss_gradients() {
    let cfg = small_decoder();
    suite("sal", |rng, i| {
        let (names, mut inputs) = decoder_params(&cfg, i);
        let b = rng.random_range(2..6);
        let x = plain(rng, b, 3);
        let d = uniform(rng, b, 1, 0.0, 1.0);
        inputs.push(plain(rng, b, 2));
        fd_check(&inputs, H, &|g, v| {
            let params = bind(&names, v);
            let (xv, dv) = (g.constant(x.clone()), g.constant(d.clone()));
            let out = decoder_forward(g, &params, &cfg, xv, v[v.len() - 1], false).unwrap();
            losses::sal_loss(g, out.sdf, dv).unwrap()
        })
    });
}

#[test]
fn igr_loss_weight_gradients_through_input_gradient() {
    let cfg = small_decoder();
    suite("igr", |rng, i| {
        let (names, mut inputs) = decoder_params(&cfg, 100 + i);
        let b = rng.random_range(3..7);
        let ns = rng.random_range(1..b);
        let x = plain(rng, b, 3);
        let normals = unit_rows(rng, ns);
        inputs.push(plain(rng, b, 2));
        fd_check(&inputs, H, &|g, v| {
            let params = bind(&names, v);
            let xv = g.constant(x.clone());
            let out = decoder_forward(g, &params, &cfg, xv, v[v.len() - 1], true).unwrap();
            let grad = out.grad.unwrap();
            let surf = g.slice_rows(grad, 0, ns).unwrap();
            let (eik, nrm) = losses::igr_loss(g, grad, surf, &normals, 0.1).unwrap();
            g.add(eik, nrm).unwrap()
        })
    });
}

fn icosahedron() -> TriangleMesh {
    localsdf::fixtures::icosphere(0)
}

#[test]
fn sim_loss_gradients() {
    let mesh = icosahedron();
    for mode in [SimMode::Normalized, SimMode::Literal] {
        let rings = ring_neighborhoods(&mesh, 3).unwrap();
        let (pattern, w) = similarity_operator(&rings, mode);
        let op = (pattern, Tensor::matrix(w.len(), 1, w).unwrap());
        for reduction in [CodeReduction::Mean, CodeReduction::Sum] {
            suite(&format!("sim {mode:?} {reduction:?}"), |rng, _| {
                let codes = plain(rng, mesh.num_vertices(), 3);
                fd_check(&[codes], H, &|g, v| losses::sim_loss(g, v[0], &op, reduction).unwrap())
            });
        }
    }
}

#[test]
fn reg_loss_gradients() {
    for mode in [RegMode::Norm, RegMode::Squared] {
        suite(&format!("reg {mode:?}"), |rng, _| {
            let n = rng.random_range(1..20);
            fd_check(&[plain(rng, 1, n)], H, &|g, v| losses::reg_loss(g, v[0], mode).unwrap())
        });
    }
}

#[test]
fn total_loss_gradients_through_graph_network() {
    let cfg = small_decoder();
    let mesh = icosahedron();
    let graph = MeshGraph::from_mesh(&mesh);
    let rings = ring_neighborhoods(&mesh, 2).unwrap();
    let (pattern, w) = similarity_operator(&rings, SimMode::Normalized);
    let op = (pattern, Tensor::matrix(w.len(), 1, w).unwrap());
    let weights = LossWeights {
        grad: 0.1,
        sim: 1.0,
        reg: 0.01,
    };
    let conv = ConvShape { n: 2, m: 2, k: 3 };
    suite("total", |rng, i| {
        let (names, mut inputs) = decoder_params(&cfg, 200 + i);
        let mut store = ParameterStore::new();
        init_cheb(&mut store, "g2l", conv, rng);
        inputs.push(store.get("g2l.weight").unwrap().clone());
        inputs.push(plain(rng, 1, 2));
        inputs.push(plain(rng, 1, 2 * mesh.num_vertices()));
        let b = 6;
        let ns = 3;
        let x = plain(rng, b, 3);
        let d = uniform(rng, b, 1, 0.0, 1.0);
        let normals = unit_rows(rng, ns);
        let region: Arc<[usize]> = (0..b).map(|_| rng.random_range(0..mesh.num_vertices())).collect();
        let nd = names.len();
        fd_check(&inputs, H, &|g, v| {
            let params = bind(&names, &v[..nd]);
            let (wv, bv, z) = (v[nd], v[nd + 1], v[nd + 2]);
            let zin = g.reshape(z, mesh.num_vertices(), 2).unwrap();
            let codes = chebconv_forward(g, &graph, conv, wv, bv, zin).unwrap();
            let code_b = g.gather_rows(codes, region.clone()).unwrap();
            let xv = g.constant(x.clone());
            let out = decoder_forward(g, &params, &cfg, xv, code_b, true).unwrap();
            let grad = out.grad.unwrap();
            let dv = g.constant(d.clone());
            let sal = losses::sal_loss(g, out.sdf, dv).unwrap();
            let eikonal = losses::eikonal_raw(g, grad).unwrap();
            let surf = g.slice_rows(grad, 0, ns).unwrap();
            let nv = g.constant(normals.clone());
            let normal = losses::normal_loss(g, surf, nv).unwrap();
            let sim = losses::sim_loss(g, codes, &op, CodeReduction::Mean).unwrap();
            let reg = losses::reg_loss(g, z, RegMode::Norm).unwrap();
            let terms = LossTerms {
                sal,
                eikonal,
                normal,
                sim: Some(sim),
                reg: Some(reg),
            };
            losses::total_loss_graph(g, &terms, &weights).unwrap()
        })
    });
}

#[test]
fn vcconv_gradients() {
    let mesh = icosahedron();
    let graph = MeshGraph::from_mesh(&mesh);
    let conv = ConvShape { n: 2, m: 3, k: 2 };
    suite("vcconv", |rng, i| {
        let basis = plain(rng, conv.n, conv.k * conv.m);
        let alpha = plain(rng, graph.num_directed_edges(), conv.k);
        let bias = plain(rng, 1, conv.m);
        let x = plain(rng, mesh.num_vertices(), conv.n);
        fd_check(&[basis, alpha, bias, x], H, &|g, v| {
            let y = vcconv_forward(g, &graph, conv, v[0], v[1], v[2], v[3]).unwrap();
            readout(g, y, i)
        })
    });
}

#[test]
fn decoder_input_gradient_matches_differences() {
    let cfg = MlpDecoderConfig::sdf4();
    let mut store = ParameterStore::new();
    init_decoder_uniform(&mut store, &cfg, &mut rng("sdf4", 0));
    let mut r = rng("sdf4-inputs", 0);
    let b = 100;
    let x = plain(&mut r, b, 3);
    let code = uniform(&mut r, b, cfg.latent_dim, -0.5, 0.5);

    let eval = |x: &Tensor, with_grad: bool| {
        let mut g = Graph::new();
        let params = store.bind(&mut g, |_| true, |_| false).unwrap();
        let (xv, cv) = (g.constant(x.clone()), g.constant(code.clone()));
        let out = decoder_forward(&mut g, &params, &cfg, xv, cv, with_grad).unwrap();
        (
            g.value(out.sdf).clone(),
            out.grad.map(|v| g.value(v).clone()),
        )
    };
    let analytic = eval(&x, true).1.unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut numeric = Tensor::zeros(b, 3);
    for d in 0..3 {
        let (mut up, mut down) = (x.clone(), x.clone());
        for i in 0..b {
            up.set(i, d, x.get(i, d) + h);
            down.set(i, d, x.get(i, d) - h);
        }
        let (fu, fd) = (eval(&up, false).0, eval(&down, false).0);
        for i in 0..b {
            numeric.set(i, d, (fu.data()[i] - fd.data()[i]) / (2.0 * h));
        }
    }
    for i in 0..b {
        let a = analytic.row_slice(i);
        let n = numeric.row_slice(i);
        let diff: f64 = a.iter().zip(n).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(diff / scale);
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn single_linear_layer_gradient_is_the_weight() {
    let cfg = MlpDecoderConfig {
        latent_dim: 0,
        hidden: 1,
        num_layers: 1,
        skip_layer: None,
        beta: 100.0,
    };
    let mut g = Graph::new();
    let w = g.constant(Tensor::from_rows(&[[0.3], [-1.2], [2.5]]));
    let bias = g.constant(Tensor::from_rows(&[[0.7]]));
    let params = [("decoder.0.weight".to_string(), w), ("decoder.0.bias".to_string(), bias)]
        .into_iter()
        .collect();
    let x = g.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 0.0]]));
    let code = g.constant(Tensor::zeros(2, 0));
    let out = decoder_forward(&mut g, &params, &cfg, x, code, true).unwrap();
    let grad = g.value(out.grad.unwrap());
    for i in 0..2 {
        assert_eq!(grad.row_slice(i), &[0.3, -1.2, 2.5]);
    }
}

/// Every check in this file, for callers that report them together.
#[allow(dead_code)]
pub const SUITE: &[(&str, fn())] = &[
    ("matmul_gradients", matmul_gradients),
    ("broadcast_arithmetic_gradients", broadcast_arithmetic_gradients),
    ("concat_and_slice_gradients", concat_and_slice_gradients),
    ("gather_and_reshape_gradients", gather_and_reshape_gradients),
    ("sparse_matmul_gradients", sparse_matmul_gradients),
    ("activation_gradients", activation_gradients),
    ("pointwise_and_reduction_gradients", pointwise_and_reduction_gradients),
    ("random_compositions", random_compositions),
    ("sal_loss_gradients", sal_loss_gradients),
    ("igr_loss_weight_gradients_through_input_gradient", igr_loss_weight_gradients_through_input_gradient),
    ("sim_loss_gradients", sim_loss_gradients),
    ("reg_loss_gradients", reg_loss_gradients),
    ("total_loss_gradients_through_graph_network", total_loss_gradients_through_graph_network),
    ("vcconv_gradients", vcconv_gradients),
    ("decoder_input_gradient_matches_differences", decoder_input_gradient_matches_differences),
    ("single_linear_layer_gradient_is_the_weight", single_linear_layer_gradient_is_the_weight),
];
