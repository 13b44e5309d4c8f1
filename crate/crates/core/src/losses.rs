//! Training objectives: sign-agnostic distance loss, eikonal and normal
//! terms, geometric similarity of neighbouring codes, code regularizer and
//! their weighted sum. Every function builds graph nodes so gradients reach
//! the network and the codes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, SparsePattern, Tensor, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("normal {index} has length {norm}, expected 1")]
    NonUnitNormal { index: usize, norm: f64 },
    #[error("loss component {0} is not finite")]
    NonFinite(&'static str),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub grad: f64,
    pub sim: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            grad: 0.1,
            sim: 1.0,
            reg: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("grad", self.grad), ("sim", self.sim), ("reg", self.reg)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Reduction of the per-vertex code difference over code dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    /// `‖z‖₂`.
    #[default]
    Norm,
    /// `‖z‖₂²`.
    Squared,
}

fn nonempty(g: &Graph, v: Var, what: &'static str) -> Result<(), LossError> {
    if g.value(v).is_empty() {
        return Err(LossError::EmptyBatch(what));
    }
    Ok(())
}

/// `mean | |f| − d_u |`.
pub fn sal_loss(g: &mut Graph, pred: Var, d_u: Var) -> Result<Var, LossError> {
    nonempty(g, pred, "sal_loss")?;
    let a = g.abs(pred)?;
    let diff = g.sub(a, d_u)?;
    let e = g.abs(diff)?;
    Ok(g.mean(e)?)
}

/// `mean (‖∇f‖ − 1)²`, unweighted.
pub fn eikonal_raw(g: &mut Graph, grad: Var) -> Result<Var, LossError> {
    nonempty(g, grad, "eikonal")?;
    let n = g.l2_norm_rows(grad)?;
    let one = g.constant(Tensor::scalar(1.0));
    let d = g.sub(n, one)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

/// `mean ‖∇f − n‖`.
pub fn normal_loss(g: &mut Graph, grad_surf: Var, normals: Var) -> Result<Var, LossError> {
    nonempty(g, grad_surf, "normal")?;
    let d = g.sub(grad_surf, normals)?;
    let n = g.l2_norm_rows(d)?;
    Ok(g.mean(n)?)
}

pub fn check_unit_normals(normals: &Tensor) -> Result<(), LossError> {
    for i in 0..normals.rows() {
        let norm = normals.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(LossError::NonUnitNormal { index: i, norm });
        }
    }
    Ok(())
}

/// `(λ_grad · mean (‖∇f‖ − 1)², mean ‖∇f − n‖)` with the eikonal term over
/// all points and the normal term over surface points.
pub fn igr_loss(
    g: &mut Graph,
    grad_all: Var,
    grad_surf: Var,
    normals: &Tensor,
    lambda_grad: f64,
) -> Result<(Var, Var), LossError> {
    check_unit_normals(normals)?;
    let raw = eikonal_raw(g, grad_all)?;
    let eik = g.scalar_mul(raw, lambda_grad)?;
    let nv = g.constant(normals.clone());
    let nrm = normal_loss(g, grad_surf, nv)?;
    Ok((eik, nrm))
}

/// Similarity of each code to its ring average: the mean over vertices of
/// `‖z_i − A_i‖₁`, with the L1 norm averaged (or summed) over code
/// dimensions. `op` is the operator from
/// [`crate::regions::similarity_operator`].
pub fn sim_loss(
    g: &mut Graph,
    codes: Var,
    op: &(Arc<SparsePattern>, Tensor),
    reduction: CodeReduction,
) -> Result<Var, LossError> {
    nonempty(g, codes, "sim_loss")?;
    let w = g.constant(op.1.clone());
    let d = g.sparse_matmul(w, codes, op.0.clone())?;
    let a = g.abs(d)?;
    let m = g.mean(a)?;
    Ok(match reduction {
        CodeReduction::Mean => m,
        CodeReduction::Sum => {
            let dims = g.value(codes).cols() as f64;
            g.scalar_mul(m, dims)?
        }
    })
}

pub fn reg_loss(g: &mut Graph, z: Var, mode: RegMode) -> Result<Var, LossError> {
    let sq = g.square(z)?;
    let s = g.sum(sq)?;
    Ok(match mode {
        RegMode::Norm => g.sqrt(s)?,
        RegMode::Squared => s,
    })
}

/// Graph nodes of every term. `eikonal` is unweighted.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub sal: Var,
    pub eikonal: Var,
    pub normal: Var,
    pub sim: Option<Var>,
    pub reg: Option<Var>,
}

/// `L_sal + λ_grad·eik + normal + λ_sim·sim + λ_reg·reg` as one node.
pub fn total_loss_graph(g: &mut Graph, t: &LossTerms, w: &LossWeights) -> Result<Var, LossError> {
    let eik = g.scalar_mul(t.eikonal, w.grad)?;
    let mut total = g.add(t.sal, eik)?;
    total = g.add(total, t.normal)?;
    if let Some(s) = t.sim {
        let ws = g.scalar_mul(s, w.sim)?;
        total = g.add(total, ws)?;
    }
    if let Some(r) = t.reg {
        let wr = g.scalar_mul(r, w.reg)?;
        total = g.add(total, wr)?;
    }
    Ok(total)
}

/// Logged values of one loss evaluation. `igr_eikonal` is already scaled
/// by `λ_grad`; `sim` and `reg` are raw.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sal: f64,
    pub igr_eikonal: f64,
    pub igr_normal: f64,
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(
        sal: f64,
        eikonal_raw: f64,
        normal: f64,
        sim: f64,
        reg: f64,
        w: &LossWeights,
    ) -> Result<Self, LossError> {
        for (name, v) in [
            ("sal", sal),
            ("eikonal", eikonal_raw),
            ("normal", normal),
            ("sim", sim),
            ("reg", reg),
        ] {
            if !v.is_finite() {
                return Err(LossError::NonFinite(name));
            }
        }
        let igr_eikonal = w.grad * eikonal_raw;
        Ok(Self {
            sal,
            igr_eikonal,
            igr_normal: normal,
            sim,
            reg,
            total: sal + igr_eikonal + normal + w.sim * sim + w.reg * reg,
        })
    }

    pub fn from_graph(g: &Graph, t: &LossTerms, w: &LossWeights) -> Result<Self, LossError> {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar_value(x));
        Self::compose(
            g.scalar_value(t.sal),
            g.scalar_value(t.eikonal),
            g.scalar_value(t.normal),
            v(t.sim),
            v(t.reg),
            w,
        )
    }

    pub fn accumulate(&mut self, other: &Self, scale: f64) {
        self.sal += scale * other.sal;
        self.igr_eikonal += scale * other.igr_eikonal;
        self.igr_normal += scale * other.igr_normal;
        self.sim += scale * other.sim;
        self.reg += scale * other.reg;
        self.total += scale * other.total;
    }
}
