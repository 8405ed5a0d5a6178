//! Three-layer fully-connected scoring network.
//!
//! `x → relu(W1·x + b1) → dropout → W2·h1 + b2 → dropout → sigmoid(W3·h2 + b3)`
//!
//! The second layer is linear. Dropout uses inverted scaling, so kept units
//! are multiplied by `1 / (1 − rate)` in training mode and evaluation mode
//! applies neither masks nor scaling. Masks come from a ChaCha8 stream keyed
//! by a [`DropoutKey`]; for each input row, layer-1 masks are drawn first,
//! then layer-2 masks, one uniform `f64` per unit, keeping the unit when the
//! draw is `>= rate`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

pub const DEFAULT_HIDDEN1: usize = 512;
pub const DEFAULT_HIDDEN2: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.6;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layer widths `dim → hidden1 → hidden2 → 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Architecture {
    pub fn new(dim: usize, hidden1: usize, hidden2: usize) -> Result<Self> {
        if dim == 0 || hidden1 == 0 || hidden2 == 0 {
            return Err(Error::arg(format!(
                "layer widths must be positive, got {dim}/{hidden1}/{hidden2}"
            )));
        }
        Ok(Architecture {
            dim,
            hidden1,
            hidden2,
        })
    }

    /// 512/32/1 on top of `dim` inputs.
    pub fn default_for(dim: usize) -> Self {
        Architecture {
            dim,
            hidden1: DEFAULT_HIDDEN1,
            hidden2: DEFAULT_HIDDEN2,
        }
    }

    /// `(outputs, inputs)` of each layer.
    pub fn shapes(&self) -> [(usize, usize); 3] {
        [
            (self.hidden1, self.dim),
            (self.hidden2, self.hidden1),
            (1, self.hidden2),
        ]
    }
}

/// A dense layer, or anything shaped like one (gradients, optimizer state).
/// `weights` is `outputs × inputs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub outputs: usize,
    pub inputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Dense {
            outputs,
            inputs,
            weights: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn weight_row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.inputs..(j + 1) * self.inputs]
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.outputs == other.outputs && self.inputs == other.inputs
    }

    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(self.weight_row(j), x) + self.bias[j];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function, clamped so saturated logits stay strictly inside (0, 1).
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Flat view over the parameters of a three-layer structure, in the order
/// `W1, b1, W2, b2, W3, b3`.
pub trait LayerSet {
    fn layers(&self) -> &[Dense; 3];
    fn layers_mut(&mut self) -> &mut [Dense; 3];

    fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn params(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        Box::new(
            self.layers()
                .iter()
                .flat_map(|l| l.weights.iter().chain(&l.bias).copied()),
        )
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in self.layers_mut() {
            let (nw, nb) = (layer.weights.len(), layer.bias.len());
            if index < nw {
                return &mut layer.weights[index];
            }
            index -= nw;
            if index < nb {
                return &mut layer.bias[index];
            }
            index -= nb;
        }
        panic!("parameter index out of range");
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub arch: Architecture,
    pub dropout_rate: f64,
    pub layers: [Dense; 3],
}

impl LayerSet for MlpModel {
    fn layers(&self) -> &[Dense; 3] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Dense; 3] {
        &mut self.layers
    }
}

/// Parameter gradients, shaped like an [`MlpModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: [Dense; 3],
}

impl LayerSet for Gradients {
    fn layers(&self) -> &[Dense; 3] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Dense; 3] {
        &mut self.layers
    }
}

impl Gradients {
    pub fn zeros(arch: &Architecture) -> Self {
        Gradients {
            layers: arch.shapes().map(|(o, i)| Dense::zeros(o, i)),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if !a.same_shape(b) {
                return Err(Error::arg("gradient shapes differ"));
            }
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.params().all(|v| v == 0.0)
    }
}

/// Identifies one training-mode forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DropoutKey {
    pub seed: u64,
    pub iteration: u64,
    pub bag: u64,
}

impl From<u64> for DropoutKey {
    fn from(seed: u64) -> Self {
        DropoutKey {
            seed,
            iteration: 0,
            bag: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train(DropoutKey),
}

/// Activations cached by [`MlpModel::forward`] for [`MlpModel::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub arch: Architecture,
    pub rows: usize,
    pub inputs: Vec<f64>,
    /// Layer-1 pre-activations.
    pub z1: Vec<f64>,
    /// Per-unit dropout multipliers (0 or 1/(1-rate)); all ones in eval mode.
    pub mask1: Vec<f64>,
    pub h1: Vec<f64>,
    pub mask2: Vec<f64>,
    pub h2: Vec<f64>,
    pub scores: Vec<f64>,
}

impl MlpModel {
    pub fn zeros(arch: Architecture, dropout_rate: f64) -> Result<Self> {
        check_dropout(dropout_rate)?;
        Ok(MlpModel {
            arch,
            dropout_rate,
            layers: arch.shapes().map(|(o, i)| Dense::zeros(o, i)),
        })
    }

    /// Uniform fan-balanced weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(arch: Architecture, dropout_rate: f64, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch, dropout_rate)?;
        for (k, layer) in model.layers.iter_mut().enumerate() {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            let mut rng = rng::keyed(seed, Domain::Init, k as u64, 0);
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-limit..limit));
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    /// Sum of squared weights over all three matrices; biases excluded.
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.weights)
            .map(|w| w * w)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    /// Scores `rows × dim` inputs.
    pub fn forward(&self, inputs: &[f64], mode: Mode) -> Result<(Vec<f64>, ForwardTrace)> {
        let Architecture {
            dim,
            hidden1,
            hidden2,
        } = self.arch;
        if inputs.is_empty() || !inputs.len().is_multiple_of(dim) {
            return Err(Error::arg(format!(
                "input of {} values is not a non-empty matrix with {dim} columns",
                inputs.len()
            )));
        }
        let rows = inputs.len() / dim;
        let keep_scale = 1.0 / (1.0 - self.dropout_rate);
        let mut rng = match mode {
            Mode::Train(key) if self.dropout_rate > 0.0 => Some(rng::keyed(
                key.seed,
                Domain::Dropout,
                key.iteration,
                key.bag,
            )),
            _ => None,
        };
        let rate = self.dropout_rate;
        let mut draw_masks = |mask: &mut [f64]| match rng.as_mut() {
            Some(r) => mask.iter_mut().for_each(|m| {
                *m = if r.random::<f64>() >= rate { keep_scale } else { 0.0 }
            }),
            None => mask.fill(1.0),
        };

        let mut trace = ForwardTrace {
            arch: self.arch,
            rows,
            inputs: inputs.to_vec(),
            z1: vec![0.0; rows * hidden1],
            mask1: vec![0.0; rows * hidden1],
            h1: vec![0.0; rows * hidden1],
            mask2: vec![0.0; rows * hidden2],
            h2: vec![0.0; rows * hidden2],
            scores: vec![0.0; rows],
        };
        let [l1, l2, l3] = &self.layers;
        let mut z2 = vec![0.0; hidden2];
        for r in 0..rows {
            let x = &inputs[r * dim..(r + 1) * dim];
            let z1 = &mut trace.z1[r * hidden1..(r + 1) * hidden1];
            let m1 = &mut trace.mask1[r * hidden1..(r + 1) * hidden1];
            let h1 = &mut trace.h1[r * hidden1..(r + 1) * hidden1];
            let m2 = &mut trace.mask2[r * hidden2..(r + 1) * hidden2];
            let h2 = &mut trace.h2[r * hidden2..(r + 1) * hidden2];
            draw_masks(m1);
            draw_masks(m2);

            l1.affine(x, z1);
            for ((h, &z), &m) in h1.iter_mut().zip(z1.iter()).zip(m1.iter()) {
                *h = z.max(0.0) * m;
            }
            l2.affine(h1, &mut z2);
            for ((h, &z), &m) in h2.iter_mut().zip(&z2).zip(m2.iter()) {
                *h = z * m;
            }
            trace.scores[r] = sigmoid(dot(&l3.weights, h2) + l3.bias[0]);
        }
        Ok((trace.scores.clone(), trace))
    }

    /// Eval-mode scores only.
    pub fn score(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        self.forward(inputs, Mode::Eval).map(|(s, _)| s)
    }

    /// Gradient of a loss with respect to every parameter, given the loss
    /// gradient with respect to each score of the traced forward pass.
    pub fn backward(&self, trace: &ForwardTrace, d_scores: &[f64]) -> Result<Gradients> {
        if trace.arch != self.arch {
            return Err(Error::arg("trace was produced by a different architecture"));
        }
        if d_scores.len() != trace.rows {
            return Err(Error::arg(format!(
                "{} score gradients for {} traced rows",
                d_scores.len(),
                trace.rows
            )));
        }
        let Architecture {
            dim,
            hidden1,
            hidden2,
        } = self.arch;
        let mut grads = Gradients::zeros(&self.arch);
        let [_, l2, l3] = &self.layers;
        let mut dz2 = vec![0.0; hidden2];
        let mut dz1 = vec![0.0; hidden1];
        for (r, &ds) in d_scores.iter().enumerate() {
            if ds == 0.0 {
                continue;
            }
            let x = &trace.inputs[r * dim..(r + 1) * dim];
            let z1 = &trace.z1[r * hidden1..(r + 1) * hidden1];
            let m1 = &trace.mask1[r * hidden1..(r + 1) * hidden1];
            let h1 = &trace.h1[r * hidden1..(r + 1) * hidden1];
            let m2 = &trace.mask2[r * hidden2..(r + 1) * hidden2];
            let h2 = &trace.h2[r * hidden2..(r + 1) * hidden2];
            let s = trace.scores[r];

            let dz3 = ds * s * (1.0 - s);
            let [g1, g2, g3] = &mut grads.layers;
            for (g, &h) in g3.weights.iter_mut().zip(h2) {
                *g += dz3 * h;
            }
            g3.bias[0] += dz3;

            for j in 0..hidden2 {
                dz2[j] = dz3 * l3.weights[j] * m2[j];
            }
            dz1.fill(0.0);
            for (j, &d) in dz2.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let g_row = &mut g2.weights[j * hidden1..(j + 1) * hidden1];
                for (g, &h) in g_row.iter_mut().zip(h1) {
                    *g += d * h;
                }
                g2.bias[j] += d;
                for (acc, &w) in dz1.iter_mut().zip(l2.weight_row(j)) {
                    *acc += d * w;
                }
            }
            for j in 0..hidden1 {
                // relu subgradient at 0 is 0
                dz1[j] = if z1[j] > 0.0 { dz1[j] * m1[j] } else { 0.0 };
            }
            for (j, &d) in dz1.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let g_row = &mut g1.weights[j * dim..(j + 1) * dim];
                for (g, &xi) in g_row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                g1.bias[j] += d;
            }
        }
        Ok(grads)
    }

    pub fn to_json(&self) -> String {
        let [l1, l2, l3] = &self.layers;
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            dim: self.arch.dim,
            widths: [self.arch.hidden1, self.arch.hidden2, 1],
            dropout_rate: self.dropout_rate,
            w1: l1.weights.clone(),
            b1: l1.bias.clone(),
            w2: l2.weights.clone(),
            b2: l2.bias.clone(),
            w3: l3.weights.clone(),
            b3: l3.bias[0],
        };
        serde_json::to_string(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("checkpoint", m);
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", c.version)));
        }
        if c.widths[2] != 1 {
            return Err(bad(format!("output width must be 1, got {}", c.widths[2])));
        }
        let arch = Architecture::new(c.dim, c.widths[0], c.widths[1]).map_err(|e| bad(e.to_string()))?;
        check_dropout(c.dropout_rate).map_err(|e| bad(e.to_string()))?;
        let mut model = Self::zeros(arch, c.dropout_rate)?;
        let parts = [(c.w1, c.b1), (c.w2, c.b2), (c.w3, vec![c.b3])];
        for (k, (layer, (w, b))) in model.layers.iter_mut().zip(parts).enumerate() {
            if w.len() != layer.weights.len() || b.len() != layer.bias.len() {
                return Err(bad(format!(
                    "layer {} has {}+{} values, expected {}+{}",
                    k + 1,
                    w.len(),
                    b.len(),
                    layer.weights.len(),
                    layer.bias.len()
                )));
            }
            layer.weights = w;
            layer.bias = b;
        }
        if !model.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })
    }
}

/// Default 512/32/1 network over `dim` inputs with 60% dropout.
pub fn init_model(dim: usize, seed: u64) -> Result<MlpModel> {
    if dim == 0 {
        return Err(Error::arg("dim must be positive"));
    }
    MlpModel::init(Architecture::default_for(dim), DEFAULT_DROPOUT, seed)
}

fn check_dropout(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::arg(format!("dropout rate must be in [0, 1), got {rate}")))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    dim: usize,
    widths: [usize; 3],
    dropout_rate: f64,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: f64,
}
