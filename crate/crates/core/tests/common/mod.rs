#![allow(dead_code)]

use localsdf::{Graph, Tensor, Var};
use rand::Rng as _;

pub type Rng = localsdf::rng::Rng;

pub fn rng(tag: &str, i: u64) -> Rng {
    localsdf::rng::stream(17, tag, i)
}

pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `[-2, 2]` but at least `gap` away from zero.
pub fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Relative L2 error between reverse-mode gradients of `build` and central
/// differences with step `h`, over every element of every input.
pub fn fd_check(inputs: &[Tensor], h: f64, build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.parameter(&format!("p{i}"), t.clone()).unwrap())
        .collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.scalar_value(l)
    };
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(&format!("p{i}")).unwrap();
        for e in 0..t.len() {
            let mut ins = inputs.to_vec();
            ins[i].data_mut()[e] = t.data()[e] + h;
            let up = eval(&ins);
            ins[i].data_mut()[e] = t.data()[e] - h;
            let down = eval(&ins);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[e];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8)
}

/// `sum(out ∘ w)` for a fixed random `w`, so every output element carries a
/// distinct weight in the checked gradient.
pub fn readout(g: &mut Graph, out: Var, seed: u64) -> Var {
    let v = g.value(out);
    let (r, c) = (v.rows(), v.cols());
    let mut rng = rng("readout", seed);
    let w = g.constant(uniform(&mut rng, r, c, -1.0, 1.0));
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}
