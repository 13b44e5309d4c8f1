//! SDF decoders, graph convolutions and the global-to-local (G2L) code
//! network.

pub mod decoder;
pub mod graphconv;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use decoder::{
    bias_name, decoder_eval, decoder_forward, init_decoder, init_decoder_uniform, weight_name, DecoderOutput,
    MlpDecoderConfig,
};
pub use graphconv::{chebconv_forward, vcconv_forward, ConvShape, MeshGraph};

use crate::diffcore::{DiffError, Graph, ParameterStore, Tensor, Var};
use crate::geometry::Point3;
use crate::regions::KeyPointSet;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
    #[error("global code has length {got}, expected {expected}")]
    LatentLength { expected: usize, got: usize },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("topology mismatch: {0}")]
    Topology(String),
}

pub const LATENT_PREFIX: &str = "latent.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "sdf4")]
    Sdf4,
    #[serde(rename = "sdf8")]
    Sdf8,
    #[serde(rename = "lgcl-cheb")]
    LgclCheb,
    #[serde(rename = "lgcl-vc")]
    LgclVc,
}

impl std::str::FromStr for Architecture {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        match s {
            "sdf4" => Ok(Self::Sdf4),
            "sdf8" => Ok(Self::Sdf8),
            "lgcl-cheb" => Ok(Self::LgclCheb),
            "lgcl-vc" => Ok(Self::LgclVc),
            _ => Err(NetError::Config(format!(
                "unknown architecture {s:?} (expected sdf4, sdf8, lgcl-cheb or lgcl-vc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Cheb,
    Vc,
}

/// How the global code reaches the vertices before the first convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Vertex `i` gets elements `[w·i, w·i + w)`.
    #[default]
    Chunk,
    /// Every vertex gets the same `w`-vector.
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct G2LConfig {
    pub kernel: Kernel,
    /// `(n, m, k)` per layer.
    pub layers: Vec<(usize, usize, usize)>,
    #[serde(default)]
    pub split: SplitMode,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_last_bias")]
    pub last_bias: bool,
}

fn default_last_bias() -> bool {
    true
}

impl G2LConfig {
    pub fn cheb() -> Self {
        Self {
            kernel: Kernel::Cheb,
            layers: vec![(8, 8, 6), (8, 16, 6), (16, 32, 6), (32, 64, 6)],
            split: SplitMode::Chunk,
            activation: Activation::Relu,
            last_bias: true,
        }
    }

    pub fn vc() -> Self {
        Self {
            kernel: Kernel::Vc,
            layers: vec![(8, 8, 8), (8, 16, 16), (16, 32, 32), (32, 64, 64)],
            ..Self::cheb()
        }
    }

    pub fn code_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.0)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.1)
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.layers.is_empty() {
            return Err(NetError::Config("G2L needs at least one layer".into()));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return Err(NetError::Config(format!(
                    "G2L layer {} outputs {} channels but layer {} expects {}",
                    i,
                    w[0].1,
                    i + 1,
                    w[1].0
                )));
            }
        }
        if self.layers.iter().any(|l| l.2 == 0) {
            return Err(NetError::Config("G2L kernel size k must be at least 1".into()));
        }
        Ok(())
    }

    /// Closed-form trainable count. `directed_edges` (edges in both
    /// directions plus self-loops) only matters for the vertex-adaptive
    /// kernel.
    pub fn num_parameters(&self, directed_edges: usize) -> usize {
        let last = self.layers.len().saturating_sub(1);
        self.layers
            .iter()
            .enumerate()
            .map(|(i, &(n, m, k))| {
                let bias = if i < last || self.last_bias { m } else { 0 };
                let alpha = match self.kernel {
                    Kernel::Cheb => 0,
                    Kernel::Vc => directed_edges * k,
                };
                k * n * m + bias + alpha
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderInit {
    #[default]
    Geometric,
    Uniform,
}

/// Architecture descriptor. Stored in every checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub decoder: MlpDecoderConfig,
    #[serde(default)]
    pub g2l: Option<G2LConfig>,
    #[serde(default)]
    pub decoder_init: DecoderInit,
    /// Radius of the sphere the freshly initialized decoder represents.
    pub init_radius: f64,
    /// Scale factor of the local transform `T_i(x) = s·(x − p_i)`.
    #[serde(default = "one")]
    pub local_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn for_architecture(architecture: Architecture) -> Self {
        let (decoder, g2l, init_radius) = match architecture {
            Architecture::Sdf4 => (MlpDecoderConfig::sdf4(), None, 0.5),
            Architecture::Sdf8 => (MlpDecoderConfig::sdf8(), None, 0.5),
            Architecture::LgclCheb => (MlpDecoderConfig::sdf4(), Some(G2LConfig::cheb()), 0.05),
            Architecture::LgclVc => (MlpDecoderConfig::sdf4(), Some(G2LConfig::vc()), 0.05),
        };
        Self {
            architecture,
            decoder,
            g2l,
            decoder_init: DecoderInit::Geometric,
            init_radius,
            local_scale: 1.0,
        }
    }

    pub fn is_local(&self) -> bool {
        self.g2l.is_some()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.decoder.validate()?;
        if !(self.local_scale > 0.0 && self.local_scale.is_finite()) {
            return Err(NetError::Config(format!("local_scale must be positive, got {}", self.local_scale)));
        }
        let want_local = matches!(self.architecture, Architecture::LgclCheb | Architecture::LgclVc);
        match &self.g2l {
            Some(g) => {
                if !want_local {
                    return Err(NetError::Config(format!(
                        "{:?} is a global-code architecture but a G2L section is present",
                        self.architecture
                    )));
                }
                g.validate()?;
                if g.output_width() != self.decoder.latent_dim {
                    return Err(NetError::Config(format!(
                        "G2L outputs {} channels but the decoder expects {}-dim codes",
                        g.output_width(),
                        self.decoder.latent_dim
                    )));
                }
                let want = if self.architecture == Architecture::LgclCheb {
                    Kernel::Cheb
                } else {
                    Kernel::Vc
                };
                if g.kernel != want {
                    return Err(NetError::Config(format!(
                        "{:?} requires the {:?} kernel",
                        self.architecture, want
                    )));
                }
            }
            None if want_local => {
                return Err(NetError::Config(format!("{:?} needs a G2L section", self.architecture)));
            }
            None => {}
        }
        Ok(())
    }

    /// Length of one shape's global code `z^G`.
    pub fn latent_len(&self, num_vertices: usize) -> usize {
        match &self.g2l {
            None => self.decoder.latent_dim,
            Some(g) => match g.split {
                SplitMode::Chunk => g.code_width() * num_vertices,
                SplitMode::Broadcast => g.code_width(),
            },
        }
    }

    pub fn num_network_parameters(&self, directed_edges: usize) -> usize {
        self.decoder.num_parameters() + self.g2l.as_ref().map_or(0, |g| g.num_parameters(directed_edges))
    }

    /// Key points of a shape: its vertices for local models, the origin for
    /// a single global code.
    pub fn keypoints(&self, vertices: &[Point3]) -> Result<KeyPointSet, NetError> {
        let pts = if self.is_local() {
            vertices.to_vec()
        } else {
            vec![[0.0; 3]]
        };
        KeyPointSet::new(pts).map_err(|e| NetError::Config(e.to_string()))
    }

    /// Initializes decoder and G2L weights. The vertex-adaptive kernel needs
    /// the shared graph to size its per-edge coefficients.
    pub fn init_network(
        &self,
        store: &mut ParameterStore,
        graph: Option<&MeshGraph>,
        seed: u64,
    ) -> Result<(), NetError> {
        self.validate()?;
        let mut rng = crate::rng::stream(seed, "init.decoder", 0);
        match self.decoder_init {
            DecoderInit::Geometric => init_decoder(store, &self.decoder, self.init_radius, &mut rng),
            DecoderInit::Uniform => init_decoder_uniform(store, &self.decoder, &mut rng),
        }
        if let Some(g2l) = &self.g2l {
            let mut rng = crate::rng::stream(seed, "init.g2l", 0);
            let last = g2l.layers.len() - 1;
            for (l, &(n, m, k)) in g2l.layers.iter().enumerate() {
                let s = ConvShape { n, m, k };
                let prefix = format!("g2l.{l}");
                match g2l.kernel {
                    Kernel::Cheb => graphconv::init_cheb(store, &prefix, s, &mut rng),
                    Kernel::Vc => {
                        let graph = graph.ok_or_else(|| {
                            NetError::Topology("vertex-adaptive kernels need the mesh graph at init".into())
                        })?;
                        graphconv::init_vc(store, &prefix, s, graph.num_directed_edges(), &mut rng)
                    }
                }
                if l == last && !g2l.last_bias {
                    store.remove(&format!("{prefix}.bias"));
                }
            }
        }
        Ok(())
    }
}

/// Trainable scalars excluding latent codes.
pub fn count_parameters(store: &ParameterStore) -> usize {
    store.count_scalars(|n| !n.starts_with(LATENT_PREFIX))
}

pub fn latent_name(shape_id: &str) -> String {
    format!("{LATENT_PREFIX}{shape_id}")
}

/// Maps a global code (`[1, L]`) to per-vertex local codes
/// (`[N_v, output_width]`).
pub fn g2l_forward(
    g: &mut Graph,
    params: &BTreeMap<String, Var>,
    cfg: &G2LConfig,
    graph: &MeshGraph,
    z: Var,
) -> Result<Var, NetError> {
    let n = graph.num_vertices();
    let w = cfg.code_width();
    let len = g.value(z).len();
    let mut x = match cfg.split {
        SplitMode::Chunk => {
            if len != w * n {
                return Err(NetError::LatentLength { expected: w * n, got: len });
            }
            g.reshape(z, n, w)?
        }
        SplitMode::Broadcast => {
            if len != w {
                return Err(NetError::LatentLength { expected: w, got: len });
            }
            let row = g.reshape(z, 1, w)?;
            let ones = g.constant(Tensor::filled(n, 1, 1.0));
            g.matmul(ones, row)?
        }
    };
    let last = cfg.layers.len() - 1;
    for (l, &(n_in, m, k)) in cfg.layers.iter().enumerate() {
        let s = ConvShape { n: n_in, m, k };
        let bias = if l < last || cfg.last_bias {
            graphconv::param(params, &format!("g2l.{l}.bias"))?
        } else {
            g.constant(Tensor::zeros(1, m))
        };
        x = match cfg.kernel {
            Kernel::Cheb => {
                let w = graphconv::param(params, &format!("g2l.{l}.weight"))?;
                chebconv_forward(g, graph, s, w, bias, x)?
            }
            Kernel::Vc => {
                let b = graphconv::param(params, &format!("g2l.{l}.basis"))?;
                let a = graphconv::param(params, &format!("g2l.{l}.alpha"))?;
                vcconv_forward(g, graph, s, b, a, bias, x)?
            }
        };
        if l < last && cfg.activation == Activation::Relu {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

/// Per-region codes for a model: the G2L output for local models, the
/// global code itself (one region) otherwise.
pub fn local_codes(
    g: &mut Graph,
    params: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    graph: Option<&MeshGraph>,
    z: Var,
) -> Result<Var, NetError> {
    match &cfg.g2l {
        Some(g2l) => {
            let graph = graph.ok_or_else(|| NetError::Topology("local model needs the shape's mesh graph".into()))?;
            g2l_forward(g, params, g2l, graph, z)
        }
        None => {
            let len = g.value(z).len();
            if len != cfg.decoder.latent_dim {
                return Err(NetError::LatentLength {
                    expected: cfg.decoder.latent_dim,
                    got: len,
                });
            }
            Ok(g.reshape(z, 1, len)?)
        }
    }
}

/// Local codes as plain values, with every parameter held constant.
pub fn local_codes_value(
    store: &ParameterStore,
    cfg: &ModelConfig,
    graph: Option<&MeshGraph>,
    latent: &Tensor,
) -> Result<Tensor, NetError> {
    let mut g = Graph::new();
    let params = store.bind(&mut g, |n| n.starts_with("g2l."), |_| false)?;
    let z = g.constant(latent.clone());
    let codes = local_codes(&mut g, &params, cfg, graph, z)?;
    Ok(g.value(codes).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        assert_eq!(MlpDecoderConfig::sdf4().num_parameters(), 41_857);
        assert_eq!(MlpDecoderConfig::sdf8().num_parameters(), 1_576_702);
        assert_eq!(MlpDecoderConfig::sdf8().layer_shapes()[3], (512, 253));
        assert_eq!(G2LConfig::cheb().num_parameters(0), 16_632);
        let lgcl = ModelConfig::for_architecture(Architecture::LgclCheb);
        assert_eq!(lgcl.num_network_parameters(0), 58_489);
        assert_eq!(lgcl.latent_len(6890), 55_120);
    }

    #[test]
    fn architecture_names_round_trip() {
        for a in ["sdf4", "sdf8", "lgcl-cheb", "lgcl-vc"] {
            let arch: Architecture = a.parse().unwrap();
            assert_eq!(serde_json::to_value(arch).unwrap(), a);
        }
        assert!("mlp".parse::<Architecture>().is_err());
    }

    #[test]
    fn mismatched_g2l_width_rejected() {
        let mut c = ModelConfig::for_architecture(Architecture::LgclCheb);
        c.decoder.latent_dim = 32;
        assert!(matches!(c.validate(), Err(NetError::Config(_))));
    }
}
