use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NetError;
use crate::diffcore::{Graph, ParameterStore, Tensor, Var};
use crate::rng::Rng;

/// Fully connected SDF decoder `f(x, z)` with Softplus between layers and an
/// optional skip that concatenates the raw `(x, z)` input after one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDecoderConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub num_layers: usize,
    /// 1-based layer whose output is concatenated with the raw input. That
    /// layer outputs `hidden − (3 + latent_dim)` units.
    pub skip_layer: Option<usize>,
    pub beta: f64,
}

impl MlpDecoderConfig {
    pub fn sdf4() -> Self {
        Self {
            latent_dim: 64,
            hidden: 128,
            num_layers: 4,
            skip_layer: None,
            beta: 100.0,
        }
    }

    pub fn sdf8() -> Self {
        Self {
            latent_dim: 256,
            hidden: 512,
            num_layers: 8,
            skip_layer: Some(4),
            beta: 100.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        3 + self.latent_dim
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.num_layers == 0 {
            return Err(NetError::Config("decoder needs at least one layer".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(NetError::Config(format!("softplus beta must be positive, got {}", self.beta)));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.num_layers {
                return Err(NetError::Config(format!(
                    "skip layer {s} must lie in 1..{}",
                    self.num_layers
                )));
            }
            if self.hidden <= self.input_dim() {
                return Err(NetError::Config(format!(
                    "hidden width {} leaves no room for a {}-wide skip input",
                    self.hidden,
                    self.input_dim()
                )));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.num_layers);
        let mut fan_in = self.input_dim();
        for l in 1..=self.num_layers {
            let out = if l == self.num_layers {
                1
            } else if self.skip_layer == Some(l) {
                self.hidden - self.input_dim()
            } else {
                self.hidden
            };
            shapes.push((fan_in, out));
            fan_in = if self.skip_layer == Some(l) {
                out + self.input_dim()
            } else {
                out
            };
        }
        shapes
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

pub fn weight_name(l: usize) -> String {
    format!("decoder.{l}.weight")
}

pub fn bias_name(l: usize) -> String {
    format!("decoder.{l}.bias")
}

/// Geometric initialization: the fresh decoder approximates `‖x‖ − radius`.
pub fn init_decoder(store: &mut ParameterStore, cfg: &MlpDecoderConfig, radius: f64, rng: &mut Rng) {
    let shapes = cfg.layer_shapes();
    let last = shapes.len() - 1;
    for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let mut w = Tensor::zeros(fan_in, fan_out);
        let mut b = Tensor::zeros(1, fan_out);
        if l == last {
            let mean = std::f64::consts::PI.sqrt() / (fan_in as f64).sqrt();
            let normal = Normal::new(mean, 1e-6).unwrap();
            for v in w.data_mut() {
                *v = normal.sample(rng);
            }
            b.data_mut()[0] = -radius;
        } else {
            let normal = Normal::new(0.0, 2f64.sqrt() / (fan_out as f64).sqrt()).unwrap();
            for v in w.data_mut() {
                *v = normal.sample(rng);
            }
        }
        store.insert(weight_name(l), w);
        store.insert(bias_name(l), b);
    }
}

/// Uniform fan-in initialization for every layer, used where a generic
/// (non-spherical) starting field is wanted.
pub fn init_decoder_uniform(store: &mut ParameterStore, cfg: &MlpDecoderConfig, rng: &mut Rng) {
    for (l, &(fan_in, fan_out)) in cfg.layer_shapes().iter().enumerate() {
        let a = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::matrix(fan_in, fan_out, (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect())
            .unwrap();
        let b = Tensor::row((0..fan_out).map(|_| rng.random_range(-a..a)).collect());
        store.insert(weight_name(l), w);
        store.insert(bias_name(l), b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// `[B, 1]` field values.
    pub sdf: Var,
    /// `[B, 3]` gradient with respect to the spatial input, when requested.
    pub grad: Option<Var>,
}

fn lookup(params: &BTreeMap<String, Var>, name: &str) -> Result<Var, NetError> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| NetError::MissingParameter(name.to_string()))
}

/// Evaluates the decoder on `x` (`[B, 3]`) and `code` (`[B, m]`). With
/// `with_grad`, the spatial Jacobian is carried forward through every layer as
/// a `[3B, width]` block (rows `d·B..(d+1)·B` hold `∂h/∂x_d`), so the returned
/// gradient is an ordinary graph node and backward reaches the weights.
pub fn decoder_forward(
    g: &mut Graph,
    params: &BTreeMap<String, Var>,
    cfg: &MlpDecoderConfig,
    x: Var,
    code: Var,
    with_grad: bool,
) -> Result<DecoderOutput, NetError> {
    let (xs, cs) = (g.value(x).shape().to_vec(), g.value(code).shape().to_vec());
    if xs.len() != 2 || xs[1] != 3 || cs.len() != 2 || cs[1] != cfg.latent_dim || cs[0] != xs[0] {
        return Err(NetError::Shape(format!(
            "decoder expects x [B, 3] and code [B, {}], got {xs:?} and {cs:?}",
            cfg.latent_dim
        )));
    }
    let b = xs[0];
    let input = if cfg.latent_dim == 0 {
        x
    } else {
        g.concat_cols(&[x, code])?
    };
    let spatial_seed = || -> Tensor {
        let mut t = Tensor::zeros(3 * b, cfg.input_dim());
        for d in 0..3 {
            for i in 0..b {
                t.set(d * b + i, d, 1.0);
            }
        }
        t
    };
    let tile: Arc<[usize]> = (0..3).flat_map(|d| std::iter::repeat_n(d, b)).collect();
    let mut h = input;
    let mut jac: Option<Var> = None;
    let n = cfg.num_layers;
    for l in 0..n {
        let w = lookup(params, &weight_name(l))?;
        let bias = lookup(params, &bias_name(l))?;
        let wx = g.matmul(h, w)?;
        let pre = g.add(wx, bias)?;
        let jl = if with_grad {
            Some(match jac {
                None => {
                    let top = g.slice_rows(w, 0, 3)?;
                    g.gather_rows(top, tile.clone())?
                }
                Some(j) => g.matmul(j, w)?,
            })
        } else {
            None
        };
        if l + 1 == n {
            let grad = match jl {
                Some(j) => {
                    let parts = [
                        g.slice_rows(j, 0, b)?,
                        g.slice_rows(j, b, 2 * b)?,
                        g.slice_rows(j, 2 * b, 3 * b)?,
                    ];
                    Some(g.concat_cols(&parts)?)
                }
                None => None,
            };
            return Ok(DecoderOutput { sdf: pre, grad });
        }
        h = g.softplus(pre, cfg.beta)?;
        if let Some(j) = jl {
            let s = g.softplus_derivative(pre, cfg.beta)?;
            let s3 = g.concat_rows(&[s, s, s])?;
            jac = Some(g.mul(j, s3)?);
        }
        if cfg.skip_layer == Some(l + 1) {
            h = g.concat_cols(&[h, input])?;
            if let Some(j) = jac {
                let seed = g.constant(spatial_seed());
                jac = Some(g.concat_cols(&[j, seed])?);
            }
        }
    }
    unreachable!("validated decoder has at least one layer")
}

/// Field values for a batch with all parameters held constant.
pub fn decoder_eval(
    store: &ParameterStore,
    cfg: &MlpDecoderConfig,
    x: Tensor,
    code: Tensor,
) -> Result<Vec<f64>, NetError> {
    let mut g = Graph::new();
    let params = store.bind(&mut g, |n| n.starts_with("decoder."), |_| false)?;
    let (xv, cv) = (g.constant(x), g.constant(code));
    let out = decoder_forward(&mut g, &params, cfg, xv, cv, false)?;
    Ok(g.value(out.sdf).data().to_vec())
}
