//! Multi-shape auto-decoder training and frozen-network latent inference.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{
    self, AdamConfig, CheckpointManifest, DiffError, Gradients, Graph, ParameterStore, SparsePattern, Tensor,
};
use crate::geometry::{SampleSet, TriangleMesh};
use crate::losses::{self, CodeReduction, LossBreakdown, LossError, LossTerms, LossWeights, RegMode};
use crate::nets::{self, MeshGraph, ModelConfig, NetError};
use crate::regions::{self, assign_regions_scaled, RingNeighborhoods, SimMode};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("training diverged at epoch {epoch}, step {step} (shape {shape}): {reason}")]
    Divergence {
        epoch: usize,
        step: usize,
        shape: String,
        reason: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::Divergence { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_net: f64,
    pub lr_latent: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Points per shape per step, half surface and half perturbed.
    pub batch_size: usize,
    /// Steps per shape per epoch. `None` makes one epoch a full pass over
    /// the larger of the surface and perturbed pools.
    pub batches_per_epoch: Option<usize>,
    pub seed: u64,
    pub weights: LossWeights,
    pub sim_mode: SimMode,
    pub sim_rings: usize,
    pub code_reduction: CodeReduction,
    pub reg_mode: RegMode,
    pub latent_init_std: f64,
    pub use_sim: bool,
    pub use_reg: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr_net: 5e-4,
            lr_latent: 1e-3,
            decay_epoch: 200,
            decay_factor: 0.5,
            batch_size: 2048,
            batches_per_epoch: None,
            seed: 0,
            weights: LossWeights::default(),
            sim_mode: SimMode::Normalized,
            sim_rings: 3,
            code_reduction: CodeReduction::Mean,
            reg_mode: RegMode::Norm,
            latent_init_std: 0.01,
            use_sim: true,
            use_reg: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr_net > 0.0 && self.lr_latent > 0.0) {
            return bad(format!("learning rates must be positive ({}, {})", self.lr_net, self.lr_latent));
        }
        if self.decay_epoch > self.epochs {
            return bad(format!("decay epoch {} exceeds epochs {}", self.decay_epoch, self.epochs));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("decay factor must be positive, got {}", self.decay_factor));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.batches_per_epoch == Some(0) {
            return bad("batches_per_epoch must be at least 1".into());
        }
        if self.sim_rings < 1 {
            return bad("sim_rings must be at least 1".into());
        }
        if !(self.latent_init_std >= 0.0 && self.latent_init_std.is_finite()) {
            return bad(format!("latent_init_std must be ≥ 0, got {}", self.latent_init_std));
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Learning-rate multiplier in effect during `epoch` (0-based).
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.decay_factor
        } else {
            1.0
        }
    }
}

/// One training (or test) shape in normalized coordinates.
#[derive(Debug, Clone)]
pub struct ShapeEntry {
    pub id: String,
    pub mesh: TriangleMesh,
    pub samples: SampleSet,
}

/// Decoder and G2L weights, every training shape's global code and the
/// number of completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model: ModelConfig,
    pub store: ParameterStore,
    pub epoch: usize,
    pub shape_ids: Vec<String>,
}

impl ModelState {
    /// Fresh network weights plus one `N(0, σ²)` code per shape.
    pub fn initialize(model: &ModelConfig, shapes: &[ShapeEntry], cfg: &TrainConfig) -> Result<Self, TrainError> {
        model.validate()?;
        let graph = shared_graph(model, shapes)?;
        let mut store = ParameterStore::new();
        model.init_network(&mut store, graph.as_ref(), cfg.seed)?;
        for s in shapes {
            store.insert(nets::latent_name(&s.id), init_latent(model, s, cfg));
        }
        Ok(Self {
            model: model.clone(),
            store,
            epoch: 0,
            shape_ids: shapes.iter().map(|s| s.id.clone()).collect(),
        })
    }

    pub fn latent(&self, shape_id: &str) -> Option<&Tensor> {
        self.store.get(&nets::latent_name(shape_id))
    }

    /// Hash over every network parameter value (latents excluded).
    pub fn network_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in self.store.iter() {
            if name.starts_with(nets::LATENT_PREFIX) {
                continue;
            }
            h.update(name.as_bytes());
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn init_latent(model: &ModelConfig, shape: &ShapeEntry, cfg: &TrainConfig) -> Tensor {
    let len = model.latent_len(shape.mesh.num_vertices());
    let mut rng = crate::rng::stream(cfg.seed, &format!("latent.{}", shape.id), 0);
    let data = if cfg.latent_init_std > 0.0 {
        let n = Normal::new(0.0, cfg.latent_init_std).unwrap();
        (0..len).map(|_| n.sample(&mut rng)).collect()
    } else {
        vec![0.0; len]
    };
    Tensor::row(data)
}

/// Vertex-adaptive kernels carry per-edge coefficients, so every shape must
/// share one edge set. Returns the shared graph when the model needs one.
fn shared_graph(model: &ModelConfig, shapes: &[ShapeEntry]) -> Result<Option<MeshGraph>, TrainError> {
    let Some(g2l) = &model.g2l else {
        return Ok(None);
    };
    let first = shapes
        .first()
        .ok_or_else(|| TrainError::Config("at least one shape is required".into()))?;
    if g2l.kernel == nets::Kernel::Vc {
        for s in &shapes[1..] {
            if s.mesh.num_vertices() != first.mesh.num_vertices() || s.mesh.edges() != first.mesh.edges() {
                return Err(TrainError::Net(NetError::Topology(format!(
                    "shape {} does not share the edge set of shape {}",
                    s.id, first.id
                ))));
            }
        }
    }
    Ok(Some(MeshGraph::from_mesh(&first.mesh)))
}

/// Per-shape data that stays fixed during training.
struct Prepared {
    id: String,
    graph: Option<MeshGraph>,
    sim_op: Option<(Arc<SparsePattern>, Tensor)>,
    surface: Vec<usize>,
    space: Vec<usize>,
    region: Vec<usize>,
    local: Vec<[f64; 3]>,
    d_u: Vec<f64>,
    normals: Vec<[f64; 3]>,
}

fn prepare(model: &ModelConfig, shape: &ShapeEntry, cfg: &TrainConfig) -> Result<Prepared, TrainError> {
    if shape.samples.is_empty() {
        return Err(TrainError::Config(format!("shape {} has no samples", shape.id)));
    }
    let surface = shape.samples.surface_indices();
    let space = shape.samples.space_indices();
    if surface.is_empty() || space.is_empty() {
        return Err(TrainError::Config(format!(
            "shape {} needs both surface and perturbed samples ({} / {})",
            shape.id,
            surface.len(),
            space.len()
        )));
    }
    let kp = model.keypoints(shape.mesh.vertices())?;
    let assign = assign_regions_scaled(&shape.samples.points, &kp, model.local_scale);
    let (graph, sim_op) = if model.is_local() {
        let graph = MeshGraph::from_mesh(&shape.mesh);
        let rings: RingNeighborhoods = regions::ring_neighborhoods(&shape.mesh, cfg.sim_rings)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let (p, w) = regions::similarity_operator(&rings, cfg.sim_mode);
        let n = w.len();
        (Some(graph), Some((p, Tensor::matrix(n, 1, w).unwrap())))
    } else {
        (None, None)
    };
    Ok(Prepared {
        id: shape.id.clone(),
        graph,
        sim_op,
        surface,
        space,
        region: assign.region,
        local: assign.local,
        d_u: shape.samples.unsigned_distance.clone(),
        normals: shape.samples.normals.clone(),
    })
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Infer,
}

struct StepOutput {
    breakdown: LossBreakdown,
    grads: Gradients,
}

fn loss_step(
    state: &ModelState,
    p: &Prepared,
    batch_surface: &[usize],
    batch_space: &[usize],
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<StepOutput, TrainError> {
    let model = &state.model;
    let latent = nets::latent_name(&p.id);
    let mut g = Graph::new();
    let params = state.store.bind(
        &mut g,
        |n| !n.starts_with(nets::LATENT_PREFIX) || n == latent,
        |n| mode == Mode::Train || n == latent,
    )?;
    let z = *params
        .get(&latent)
        .ok_or_else(|| TrainError::Config(format!("no latent code for shape {}", p.id)))?;
    let codes = nets::local_codes(&mut g, &params, model, p.graph.as_ref(), z)?;

    let rows: Vec<usize> = batch_surface.iter().chain(batch_space).copied().collect();
    let b = rows.len();
    let x = Tensor::matrix(b, 3, rows.iter().flat_map(|&i| p.local[i]).collect()).unwrap();
    let d = Tensor::matrix(b, 1, rows.iter().map(|&i| p.d_u[i]).collect()).unwrap();
    let region: Arc<[usize]> = rows.iter().map(|&i| p.region[i]).collect();
    let ns = batch_surface.len();
    let normals = Tensor::matrix(ns, 3, batch_surface.iter().flat_map(|&i| p.normals[i]).collect()).unwrap();

    let xv = g.constant(x);
    let dv = g.constant(d);
    let code_b = g.gather_rows(codes, region)?;
    let out = nets::decoder_forward(&mut g, &params, &model.decoder, xv, code_b, true)?;
    let grad = out.grad.expect("gradient requested");
    // F(x) = f(s·(x − p), z)/s keeps distances in global units; the
    // factors cancel in ∇ₓF
    let pred = if model.local_scale != 1.0 {
        g.scalar_mul(out.sdf, 1.0 / model.local_scale)?
    } else {
        out.sdf
    };
    let sal = losses::sal_loss(&mut g, pred, dv)?;
    let eikonal = losses::eikonal_raw(&mut g, grad)?;
    losses::check_unit_normals(&normals)?;
    let grad_surf = g.slice_rows(grad, 0, ns)?;
    let nv = g.constant(normals);
    let normal = losses::normal_loss(&mut g, grad_surf, nv)?;
    let sim = match (&p.sim_op, cfg.use_sim && cfg.weights.sim > 0.0) {
        (Some(op), true) => Some(losses::sim_loss(&mut g, codes, op, cfg.code_reduction)?),
        _ => None,
    };
    let reg = if cfg.use_reg && cfg.weights.reg > 0.0 {
        Some(losses::reg_loss(&mut g, z, cfg.reg_mode)?)
    } else {
        None
    };
    let terms = LossTerms {
        sal,
        eikonal,
        normal,
        sim,
        reg,
    };
    let total = losses::total_loss_graph(&mut g, &terms, &cfg.weights)?;
    let breakdown = LossBreakdown::from_graph(&g, &terms, &cfg.weights)?;
    let grads = g.backward(total)?;
    Ok(StepOutput { breakdown, grads })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub shape: String,
    pub sal: f64,
    pub igr_eikonal: f64,
    pub igr_normal: f64,
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub lr_net: f64,
    pub lr_latent: f64,
}

impl std::fmt::Display for EpochSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = &self.mean;
        write!(
            f,
            "epoch {:4}  total {:.6}  sal {:.6}  eik {:.6}  nrm {:.6}  sim {:.6}  reg {:.6}  lr_net {:.2e}  lr_latent {:.2e}",
            self.epoch, m.total, m.sal, m.igr_eikonal, m.igr_normal, m.sim, m.reg, self.lr_net, self.lr_latent
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
}

fn steps_per_epoch(p: &Prepared, cfg: &TrainConfig) -> usize {
    cfg.batches_per_epoch.unwrap_or_else(|| {
        let half = cfg.batch_size / 2;
        p.surface.len().max(p.space.len()).div_ceil(half)
    })
}

/// Cyclic reader over a per-epoch shuffled index pool.
struct Pool<'a> {
    items: &'a [usize],
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Pool<'a> {
    fn new(items: &'a [usize], rng: &mut crate::rng::Rng) -> Self {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(rng);
        Self { items, order, pos: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.items[self.order[self.pos]]);
            self.pos += 1;
        }
        out
    }
}

fn run_epochs(
    state: &mut ModelState,
    prepared: &[Prepared],
    cfg: &TrainConfig,
    mode: Mode,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainLog, TrainError> {
    let mut log = TrainLog::default();
    let half = cfg.batch_size / 2;
    let tag = match mode {
        Mode::Train => "batch",
        Mode::Infer => "infer",
    };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr_net = cfg.lr_net * cfg.lr_scale(epoch);
        let lr_latent = cfg.lr_latent * cfg.lr_scale(epoch);
        let mut sum = LossBreakdown::default();
        let mut count = 0usize;
        for p in prepared {
            let mut rng = crate::rng::stream(cfg.seed, &format!("{tag}.{}", p.id), epoch as u64);
            let mut surf = Pool::new(&p.surface, &mut rng);
            let mut space = Pool::new(&p.space, &mut rng);
            for step in 0..steps_per_epoch(p, cfg) {
                let bs = surf.take(half, &mut rng);
                let bp = space.take(cfg.batch_size - half, &mut rng);
                let out = loss_step(state, p, &bs, &bp, cfg, mode).map_err(|e| match e {
                    TrainError::Diff(DiffError::NonFinite { op }) => TrainError::Divergence {
                        epoch,
                        step,
                        shape: p.id.clone(),
                        reason: format!("non-finite value in {op}"),
                    },
                    TrainError::Loss(LossError::NonFinite(c)) => TrainError::Divergence {
                        epoch,
                        step,
                        shape: p.id.clone(),
                        reason: format!("non-finite {c} loss"),
                    },
                    other => other,
                })?;
                let (net, lat): (Gradients, Gradients) = out
                    .grads
                    .into_iter()
                    .partition(|(n, _)| !n.starts_with(nets::LATENT_PREFIX));
                if mode == Mode::Train {
                    state.store.adam_step(&net, lr_net, &cfg.adam)?;
                }
                state.store.adam_step(&lat, lr_latent, &cfg.adam)?;
                let b = out.breakdown;
                log.rows.push(LogRow {
                    epoch,
                    step,
                    shape: p.id.clone(),
                    sal: b.sal,
                    igr_eikonal: b.igr_eikonal,
                    igr_normal: b.igr_normal,
                    sim: b.sim,
                    reg: b.reg,
                    total: b.total,
                });
                sum.accumulate(&b, 1.0);
                count += 1;
            }
        }
        let mut mean = LossBreakdown::default();
        mean.accumulate(&sum, 1.0 / count.max(1) as f64);
        let summary = EpochSummary {
            epoch,
            mean,
            lr_net,
            lr_latent,
        };
        on_epoch(&summary);
        log.epochs.push(summary);
        state.epoch += 1;
    }
    Ok(log)
}

/// Trains network weights and every shape's global code jointly, resuming
/// from `state.epoch` up to `cfg.epochs`.
pub fn train(
    shapes: &[ShapeEntry],
    state: &mut ModelState,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    if shapes.is_empty() {
        return Err(TrainError::Config("at least one shape is required".into()));
    }
    shared_graph(&state.model, shapes)?;
    let prepared = shapes
        .iter()
        .map(|s| {
            if state.latent(&s.id).is_none() {
                return Err(TrainError::Config(format!("model state has no code for shape {}", s.id)));
            }
            prepare(&state.model, s, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    run_epochs(state, &prepared, cfg, Mode::Train, on_epoch)
}

/// Fits a fresh global code for `shape` against frozen network weights.
/// Returns the code together with the optimization log.
pub fn infer_latent(
    shape: &ShapeEntry,
    model: &ModelState,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<(Tensor, TrainLog), TrainError> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    for (name, e) in model.store.iter() {
        if !name.starts_with(nets::LATENT_PREFIX) {
            store.insert_entry(name.clone(), e.clone())?;
        }
    }
    let latent = nets::latent_name(&shape.id);
    store.insert(latent.clone(), init_latent(&model.model, shape, cfg));
    let mut state = ModelState {
        model: model.model.clone(),
        store,
        epoch: 0,
        shape_ids: vec![shape.id.clone()],
    };
    let p = prepare(&state.model, shape, cfg)?;
    if let (Some(g), Some(g2l)) = (&p.graph, &state.model.g2l) {
        if g2l.kernel == nets::Kernel::Vc {
            let alpha = state
                .store
                .get("g2l.0.alpha")
                .ok_or_else(|| TrainError::Net(NetError::MissingParameter("g2l.0.alpha".into())))?;
            if alpha.rows() != g.num_directed_edges() {
                return Err(TrainError::Net(NetError::Topology(format!(
                    "model was trained on a graph with {} directed edges, shape {} has {}",
                    alpha.rows(),
                    shape.id,
                    g.num_directed_edges()
                ))));
            }
        }
    }
    let log = run_epochs(&mut state, std::slice::from_ref(&p), cfg, Mode::Infer, on_epoch)?;
    let z = state.store.get(&latent).unwrap().clone();
    Ok((z, log))
}

/// SHA-256 of a JSON value's canonical (sorted-key) serialization.
pub fn config_hash(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("JSON values serialize")))
}

pub fn save_state(
    dir: &Path,
    state: &ModelState,
    cfg: &TrainConfig,
    config_hash: &str,
    extra: serde_json::Value,
) -> Result<(), TrainError> {
    let manifest = CheckpointManifest {
        format_version: 1,
        architecture: serde_json::to_value(&state.model).unwrap(),
        hyperparameters: serde_json::to_value(cfg).unwrap(),
        seed: cfg.seed,
        epoch: state.epoch,
        config_hash: config_hash.to_string(),
        extra: serde_json::json!({ "shapes": state.shape_ids, "info": extra }),
        parameters: Vec::new(),
    };
    diffcore::save_checkpoint(dir, &manifest, &state.store)?;
    Ok(())
}

/// First differing path between two JSON documents.
fn json_diff(path: &str, a: &serde_json::Value, b: &serde_json::Value) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            keys.into_iter().find_map(|k| {
                let p = format!("{path}.{k}");
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => json_diff(&p, u, v),
                    (u, v) => Some(format!("{p}: {u:?} vs {v:?}")),
                }
            })
        }
        _ if a == b => None,
        _ => Some(format!("{path}: {a} vs {b}")),
    }
}

/// Loads a checkpoint. With `expected`, the stored architecture descriptor
/// must match it exactly.
pub fn load_state(
    dir: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(ModelState, CheckpointManifest), TrainError> {
    let (manifest, store) = diffcore::load_checkpoint(dir)?;
    if let Some(exp) = expected {
        let want = serde_json::to_value(exp).unwrap();
        if let Some(d) = json_diff("architecture", &manifest.architecture, &want) {
            return Err(TrainError::Checkpoint(format!("architecture mismatch at {d}")));
        }
    }
    let model: ModelConfig = serde_json::from_value(manifest.architecture.clone())
        .map_err(|e| TrainError::Checkpoint(format!("architecture descriptor: {e}")))?;
    let shape_ids = manifest
        .extra
        .get("shapes")
        .and_then(|v| serde_json::from_value::<Vec<String>>(v.clone()).ok())
        .unwrap_or_default();
    Ok((
        ModelState {
            model,
            store,
            epoch: manifest.epoch,
            shape_ids,
        },
        manifest,
    ))
}

/// Network gradients keyed by name, for tests and diagnostics.
pub fn step_gradients(
    shapes: &[ShapeEntry],
    state: &ModelState,
    cfg: &TrainConfig,
    batch: usize,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>), TrainError> {
    let shape = shapes
        .first()
        .ok_or_else(|| TrainError::Config("at least one shape is required".into()))?;
    let p = prepare(&state.model, shape, cfg)?;
    let half = batch / 2;
    let bs: Vec<usize> = p.surface.iter().copied().take(half).collect();
    let bp: Vec<usize> = p.space.iter().copied().take(batch - half).collect();
    let out = loss_step(state, &p, &bs, &bp, cfg, Mode::Train)?;
    Ok((out.breakdown, out.grads))
}
