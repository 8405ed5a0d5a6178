//! Supervised linear hinge-loss classifier on video-level features.
//!
//! Minimizes `c · (1/k) Σ max(0, 1 − yᵢ(w·xᵢ − b)) + ½‖w‖²` by full-batch
//! subgradient descent with step `lr / √(t + 1)`, returning the iterate with
//! the lowest objective. A video's feature is the mean of its L2-normalized
//! clip rows; segments are scored as `sigmoid(w·x − b)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{l2_normalize_rows, make_bag, DatasetManifest, FeatureMatrix, Label};
use crate::net::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub c_reg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearTrainConfig {
    pub c_reg: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        LinearTrainConfig {
            c_reg: 1.0,
            epochs: 1000,
            learning_rate: 0.1,
        }
    }
}

/// Objective values of the best iterate after each epoch (index 0 is the
/// zero initialization).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinearTrainLog {
    pub objective: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(dim: usize, c_reg: f64) -> Self {
        LinearModel {
            w: vec![0.0; dim],
            b: 0.0,
            c_reg,
        }
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - self.b
    }

    /// Mean hinge loss over `(x, ±1)` examples.
    pub fn mean_hinge(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| (1.0 - y * self.margin(x)).max(0.0))
            .sum::<f64>()
            / xs.len() as f64
    }

    pub fn objective(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        self.c_reg * self.mean_hinge(xs, ys) + 0.5 * self.w.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("linear model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: LinearModel =
            serde_json::from_str(text).map_err(|e| Error::format("baseline checkpoint", e.to_string()))?;
        if !(m.b.is_finite() && m.w.iter().all(|v| v.is_finite())) {
            return Err(Error::format("baseline checkpoint", "non-finite parameter"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Mean of the L2-normalized clip rows.
pub fn video_feature(f: &FeatureMatrix) -> Vec<f64> {
    let n = l2_normalize_rows(f.clone());
    let mut mean = vec![0.0; n.dim()];
    for row in n.rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    let k = n.n_clips() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    mean
}

pub fn train_linear_on(
    xs: &[Vec<f64>],
    labels: &[Label],
    cfg: &LinearTrainConfig,
) -> Result<(LinearModel, LinearTrainLog)> {
    if xs.len() != labels.len() || xs.is_empty() {
        return Err(Error::arg("need one label per example and at least one example"));
    }
    if !labels.contains(&Label::Anomalous) || !labels.contains(&Label::Normal) {
        return Err(Error::Data("baseline needs examples of both classes".into()));
    }
    if !(cfg.c_reg > 0.0 && cfg.learning_rate > 0.0) {
        return Err(Error::arg("c_reg and learning_rate must be positive"));
    }
    let dim = xs[0].len();
    if xs.iter().any(|x| x.len() != dim) {
        return Err(Error::arg("examples differ in dimension"));
    }
    let ys: Vec<f64> = labels
        .iter()
        .map(|l| if l.is_anomalous() { 1.0 } else { -1.0 })
        .collect();
    let k = xs.len() as f64;

    let mut model = LinearModel::zeros(dim, cfg.c_reg);
    let mut best = model.clone();
    let mut best_obj = model.objective(xs, &ys);
    let mut log = LinearTrainLog {
        objective: vec![best_obj],
    };
    let mut gw = vec![0.0; dim];
    for t in 0..cfg.epochs {
        gw.copy_from_slice(&model.w);
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            if 1.0 - y * model.margin(x) > 0.0 {
                let s = cfg.c_reg / k * y;
                gw.iter_mut().zip(x).for_each(|(g, xi)| *g -= s * xi);
                gb += s;
            }
        }
        let step = cfg.learning_rate / ((t + 1) as f64).sqrt();
        model.w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= step * g);
        model.b -= step * gb;
        let obj = model.objective(xs, &ys);
        if obj < best_obj {
            best_obj = obj;
            best.clone_from(&model);
        }
        log.objective.push(best_obj);
    }
    Ok((best, log))
}

pub fn train_linear(manifest: &DatasetManifest, cfg: &LinearTrainConfig) -> Result<(LinearModel, LinearTrainLog)> {
    let mut xs = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        xs.push(video_feature(&e.load()?));
        labels.push(e.label);
    }
    train_linear_on(&xs, &labels, cfg)
}

/// Per-segment `sigmoid(w·x − b)` over `m` segments.
pub fn score_linear(model: &LinearModel, f: &FeatureMatrix, m: usize) -> Result<Vec<f64>> {
    if model.w.len() != f.dim() {
        return Err(Error::arg(format!(
            "baseline expects {}-dimensional features, got {}",
            model.w.len(),
            f.dim()
        )));
    }
    let bag = make_bag(f, Label::Normal, m)?;
    Ok((0..m).map(|g| sigmoid(model.margin(bag.segments.row(g)))).collect())
}
