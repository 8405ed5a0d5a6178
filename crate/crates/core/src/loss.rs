//! Multiple-instance ranking loss.
//!
//! For a positive bag with segment scores `p` and a negative bag with
//! scores `n`:
//!
//! ```text
//! l(p, n) = max(0, margin − max p + max n)
//!         + λ1 · Σ_{i<m} (p[i] − p[i+1])²
//!         + λ2 · Σ_i p[i]
//! ```
//!
//! Only the top-scored segment of each bag enters the hinge. The smoothness
//! and sparsity terms act on the positive bag alone. A batch averages `l`
//! over its pairs and adds `weight_decay · ‖W‖²_F` over the weight matrices.

use crate::error::{Error, Result};
use crate::net::{Gradients, MlpModel};

pub const DEFAULT_LAMBDA: f64 = 8e-5;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    /// Temporal smoothness weight.
    pub lambda1: f64,
    /// Sparsity weight.
    pub lambda2: f64,
    /// Coefficient on the squared Frobenius norm of the weights.
    pub weight_decay: f64,
    pub margin: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            lambda1: DEFAULT_LAMBDA,
            lambda2: DEFAULT_LAMBDA,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            margin: 1.0,
        }
    }
}

impl LossParams {
    /// The ranking hinge only.
    pub fn hinge_only() -> Self {
        LossParams {
            lambda1: 0.0,
            lambda2: 0.0,
            weight_decay: 0.0,
            margin: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda1) && ok(self.lambda2) && ok(self.weight_decay)) {
            return Err(Error::arg(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::arg(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BagLossBreakdown {
    pub hinge: f64,
    pub smoothness: f64,
    pub sparsity: f64,
    pub argmax_pos: usize,
    pub argmax_neg: usize,
}

impl BagLossBreakdown {
    pub fn total(&self) -> f64 {
        self.hinge + self.smoothness + self.sparsity
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn check_pair(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.len() != neg.len() {
        return Err(Error::arg(format!(
            "bag sizes differ: {} positive vs {} negative segments",
            pos.len(),
            neg.len()
        )));
    }
    if pos.len() < 2 {
        return Err(Error::arg(format!("bags need at least 2 segments, got {}", pos.len())));
    }
    Ok(())
}

pub fn pair_loss(pos: &[f64], neg: &[f64], p: &LossParams) -> Result<BagLossBreakdown> {
    check_pair(pos, neg)?;
    let argmax_pos = argmax(pos);
    let argmax_neg = argmax(neg);
    let hinge = (p.margin - pos[argmax_pos] + neg[argmax_neg]).max(0.0);
    let smoothness = p.lambda1 * pos.windows(2).map(|w| (w[0] - w[1]).powi(2)).sum::<f64>();
    let sparsity = p.lambda2 * pos.iter().sum::<f64>();
    Ok(BagLossBreakdown {
        hinge,
        smoothness,
        sparsity,
        argmax_pos,
        argmax_neg,
    })
}

/// Subgradient of [`pair_loss`] with respect to both score vectors.
pub fn pair_loss_grad(pos: &[f64], neg: &[f64], p: &LossParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = pair_loss(pos, neg, p)?;
    let m = pos.len();
    let mut dpos = vec![p.lambda2; m];
    let mut dneg = vec![0.0; m];
    if p.lambda1 != 0.0 {
        for i in 0..m {
            let mut lap = 0.0;
            if i > 0 {
                lap += pos[i] - pos[i - 1];
            }
            if i + 1 < m {
                lap += pos[i] - pos[i + 1];
            }
            dpos[i] += 2.0 * p.lambda1 * lap;
        }
    }
    if b.hinge > 0.0 {
        dpos[b.argmax_pos] -= 1.0;
        dneg[b.argmax_neg] += 1.0;
    }
    Ok((dpos, dneg))
}

/// Averages over a batch, plus the weight penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub hinge_mean: f64,
    pub smooth_mean: f64,
    pub sparse_mean: f64,
    pub reg: f64,
}

pub fn batch_loss_breakdown(
    pairs: &[(&[f64], &[f64])],
    p: &LossParams,
    model: &MlpModel,
) -> Result<BatchLoss> {
    if pairs.is_empty() {
        return Err(Error::arg("batch has no pairs"));
    }
    let k = pairs.len() as f64;
    let mut acc = BatchLoss::default();
    for (pos, neg) in pairs {
        let b = pair_loss(pos, neg, p)?;
        acc.hinge_mean += b.hinge;
        acc.smooth_mean += b.smoothness;
        acc.sparse_mean += b.sparsity;
    }
    acc.hinge_mean /= k;
    acc.smooth_mean /= k;
    acc.sparse_mean /= k;
    acc.reg = p.weight_decay * model.weight_sq_norm();
    acc.total = acc.hinge_mean + acc.smooth_mean + acc.sparse_mean + acc.reg;
    Ok(acc)
}

pub fn batch_loss(pairs: &[(&[f64], &[f64])], p: &LossParams, model: &MlpModel) -> Result<f64> {
    batch_loss_breakdown(pairs, p, model).map(|b| b.total)
}

/// Gradient of `weight_decay · ‖W‖²_F`: `2 · weight_decay · W`, zero on biases.
pub fn regularizer_grad(model: &MlpModel, weight_decay: f64) -> Gradients {
    let mut g = Gradients::zeros(&model.arch);
    for (gl, ml) in g.layers.iter_mut().zip(&model.layers) {
        for (gw, &w) in gl.weights.iter_mut().zip(&ml.weights) {
            *gw = 2.0 * weight_decay * w;
        }
    }
    g
}
