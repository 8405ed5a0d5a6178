//! Adagrad, bag sampling and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::features::{Bag, DatasetManifest, Label, DEFAULT_SEGMENTS};
use crate::loss::{
    pair_loss, pair_loss_grad, regularizer_grad, BagLossBreakdown, BatchLoss, LossParams,
};
use crate::net::{
    Architecture, DropoutKey, Gradients, LayerSet, Mode, MlpModel, DEFAULT_DROPOUT,
    DEFAULT_HIDDEN1, DEFAULT_HIDDEN2,
};
use crate::rng::{self, Domain};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_BATCH: usize = 30;

/// Per-parameter sums of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    pub accumulators: Gradients,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl AdagradState {
    pub fn new(arch: &Architecture, learning_rate: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::arg(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(AdagradState {
            accumulators: Gradients::zeros(arch),
            learning_rate,
            epsilon,
        })
    }

    /// `G += g²; θ −= lr · g / (√G + ε)` for every parameter.
    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        let shapes_match = |a: &[crate::net::Dense; 3], b: &[crate::net::Dense; 3]| {
            a.iter()
                .zip(b)
                .all(|(x, y)| x.outputs == y.outputs && x.inputs == y.inputs)
        };
        if !shapes_match(&model.layers, &grads.layers)
            || !shapes_match(&model.layers, &self.accumulators.layers)
        {
            return Err(Error::arg("model, gradient and optimizer shapes differ"));
        }
        let (lr, eps) = (self.learning_rate, self.epsilon);
        for ((layer, g), acc) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.accumulators.layers.iter_mut())
        {
            let update = |theta: &mut [f64], g: &[f64], acc: &mut [f64]| {
                for ((t, &g), a) in theta.iter_mut().zip(g).zip(acc.iter_mut()) {
                    *a += g * g;
                    *t -= lr * g / (a.sqrt() + eps);
                }
            };
            update(&mut layer.weights, &g.weights, &mut acc.weights);
            update(&mut layer.bias, &g.bias, &mut acc.bias);
        }
        Ok(())
    }
}

pub fn adagrad_step(model: &mut MlpModel, grads: &Gradients, state: &mut AdagradState) -> Result<()> {
    state.step(model, grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_pos: usize,
    pub batch_neg: usize,
    pub iterations: usize,
    pub seed: u64,
    pub loss: LossParams,
    pub segments_per_bag: usize,
    /// Probe scores are recorded every this many iterations; 0 disables.
    pub snapshot_every: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout_rate: f64,
    /// Worker threads for per-pair forward/backward. Results do not depend on it.
    pub threads: usize,
    /// Video whose scores are snapshotted; defaults to the first positive bag.
    pub probe_video: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_pos: DEFAULT_BATCH,
            batch_neg: DEFAULT_BATCH,
            iterations: 1,
            seed: 0,
            loss: LossParams::default(),
            segments_per_bag: DEFAULT_SEGMENTS,
            snapshot_every: 0,
            learning_rate: DEFAULT_LEARNING_RATE,
            epsilon: DEFAULT_EPSILON,
            hidden1: DEFAULT_HIDDEN1,
            hidden2: DEFAULT_HIDDEN2,
            dropout_rate: DEFAULT_DROPOUT,
            threads: 1,
            probe_video: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pos == 0 || self.batch_pos != self.batch_neg {
            return Err(Error::arg(format!(
                "batch sizes must be equal and positive, got {}+{}",
                self.batch_pos, self.batch_neg
            )));
        }
        if self.iterations == 0 {
            return Err(Error::arg("iterations must be at least 1"));
        }
        if self.segments_per_bag < 2 {
            return Err(Error::arg("segments_per_bag must be at least 2"));
        }
        if self.threads == 0 {
            return Err(Error::arg("threads must be at least 1"));
        }
        self.loss.validate()
    }

    pub fn architecture(&self, dim: usize) -> Result<Architecture> {
        Architecture::new(dim, self.hidden1, self.hidden2)
    }
}

/// Featurized training bags, split by label, kept in manifest order.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub positives: Vec<Bag>,
    pub negatives: Vec<Bag>,
}

impl TrainingSet {
    pub fn new(bags: Vec<Bag>) -> Result<Self> {
        let dim = bags.first().map(Bag::dim).ok_or_else(|| Error::Data("no bags".into()))?;
        if let Some(b) = bags.iter().find(|b| b.dim() != dim) {
            return Err(Error::Data(format!(
                "video {} has dimension {}, expected {dim}",
                b.video_id,
                b.dim()
            )));
        }
        let (positives, negatives) = bags.into_iter().partition(|b| b.label == Label::Anomalous);
        Ok(TrainingSet {
            positives,
            negatives,
        })
    }

    pub fn from_manifest(manifest: &DatasetManifest, segments: usize) -> Result<Self> {
        manifest.validate()?;
        Self::new(manifest.load_bags(segments)?)
    }

    pub fn dim(&self) -> usize {
        self.positives
            .first()
            .or(self.negatives.first())
            .map(Bag::dim)
            .unwrap_or(0)
    }
}

/// Indices into the positive and negative pools for one iteration.
pub fn sample_indices(
    n_pos: usize,
    n_neg: usize,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<Vec<(usize, usize)>> {
    if n_pos < cfg.batch_pos || n_neg < cfg.batch_neg {
        return Err(Error::Data(format!(
            "need {} positive and {} negative bags, have {n_pos} and {n_neg}",
            cfg.batch_pos, cfg.batch_neg
        )));
    }
    let mut rng = rng::keyed(cfg.seed, Domain::BatchSample, iteration as u64, 0);
    let mut pos: Vec<usize> = (0..n_pos).collect();
    let mut neg: Vec<usize> = (0..n_neg).collect();
    let (pos, _) = pos.partial_shuffle(&mut rng, cfg.batch_pos);
    let (neg, _) = neg.partial_shuffle(&mut rng, cfg.batch_neg);
    Ok(pos.iter().copied().zip(neg.iter().copied()).collect())
}

/// Draws `batch_pos` positives and `batch_neg` negatives without replacement
/// and pairs them index-wise.
pub fn sample_batch<'a>(
    set: &'a TrainingSet,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<Vec<(&'a Bag, &'a Bag)>> {
    Ok(
        sample_indices(set.positives.len(), set.negatives.len(), cfg, iteration)?
            .into_iter()
            .map(|(p, n)| (&set.positives[p], &set.negatives[n]))
            .collect(),
    )
}

/// Dropout keys for pair `j` of iteration `iteration`: positive bag `2j`, negative `2j+1`.
fn pair_modes(seed: Option<(u64, usize)>, j: usize) -> (Mode, Mode) {
    match seed {
        None => (Mode::Eval, Mode::Eval),
        Some((seed, iteration)) => {
            let key = |bag: usize| {
                Mode::Train(DropoutKey {
                    seed,
                    iteration: iteration as u64,
                    bag: bag as u64,
                })
            };
            (key(2 * j), key(2 * j + 1))
        }
    }
}

fn pair_objective(
    model: &MlpModel,
    pos: &Bag,
    neg: &Bag,
    params: &LossParams,
    modes: (Mode, Mode),
    scale: f64,
) -> Result<(BagLossBreakdown, Gradients)> {
    let (pos_scores, pos_trace) = model.forward(&pos.segments.features, modes.0)?;
    let (neg_scores, neg_trace) = model.forward(&neg.segments.features, modes.1)?;
    let breakdown = pair_loss(&pos_scores, &neg_scores, params)?;
    let (mut dpos, mut dneg) = pair_loss_grad(&pos_scores, &neg_scores, params)?;
    dpos.iter_mut().chain(dneg.iter_mut()).for_each(|d| *d *= scale);
    let mut grads = model.backward(&pos_trace, &dpos)?;
    grads.add_assign(&model.backward(&neg_trace, &dneg)?)?;
    Ok((breakdown, grads))
}

/// Batch objective and its gradient with respect to every parameter.
///
/// `dropout` is `Some((seed, iteration))` for training-mode passes and
/// `None` for evaluation mode. Per-pair work may run on `threads` workers;
/// the reduction is always in pair order.
pub fn batch_objective(
    model: &MlpModel,
    pairs: &[(&Bag, &Bag)],
    params: &LossParams,
    dropout: Option<(u64, usize)>,
    threads: usize,
) -> Result<(BatchLoss, Gradients)> {
    if pairs.is_empty() {
        return Err(Error::arg("batch has no pairs"));
    }
    let k = pairs.len() as f64;
    let scale = 1.0 / k;
    let run = |j: usize| {
        let (pos, neg) = pairs[j];
        pair_objective(model, pos, neg, params, pair_modes(dropout, j), scale)
    };

    let mut grads = Gradients::zeros(&model.arch);
    let mut loss = BatchLoss::default();
    let mut reduce = |(b, g): (BagLossBreakdown, Gradients)| -> Result<()> {
        loss.hinge_mean += b.hinge;
        loss.smooth_mean += b.smoothness;
        loss.sparse_mean += b.sparsity;
        grads.add_assign(&g)
    };
    if threads <= 1 {
        for j in 0..pairs.len() {
            reduce(run(j)?)?;
        }
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
        let indices: Vec<usize> = (0..pairs.len()).collect();
        for chunk in indices.chunks(threads) {
            let results: Vec<Result<_>> = pool.install(|| chunk.par_iter().map(|&j| run(j)).collect());
            for r in results {
                reduce(r?)?;
            }
        }
    }
    loss.hinge_mean /= k;
    loss.smooth_mean /= k;
    loss.sparse_mean /= k;
    loss.reg = params.weight_decay * model.weight_sq_norm();
    loss.total = loss.hinge_mean + loss.smooth_mean + loss.sparse_mean + loss.reg;
    if params.weight_decay != 0.0 {
        grads.add_assign(&regularizer_grad(model, params.weight_decay))?;
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: BatchLoss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSnapshot {
    pub iteration: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
    pub probe_video: Option<String>,
    pub probe: Vec<ProbeSnapshot>,
}

impl TrainLog {
    /// `iteration,loss,hinge_mean,smooth_mean,sparse_mean,reg`
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iteration,loss,hinge_mean,smooth_mean,sparse_mean,reg\n");
        for r in &self.records {
            let l = &r.loss;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration, l.total, l.hinge_mean, l.smooth_mean, l.sparse_mean, l.reg
            );
        }
        out
    }

    /// `iteration,segment_index,score`
    pub fn probe_csv(&self) -> String {
        let mut out = String::from("iteration,segment_index,score\n");
        for snap in &self.probe {
            for (i, s) in snap.scores.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", snap.iteration, i, s);
            }
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss.total)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss.total)
    }
}

pub fn train(set: &TrainingSet, cfg: &TrainConfig) -> Result<(MlpModel, TrainLog)> {
    train_with_observer(set, cfg, |_, _| Ok(()))
}

/// Like [`train`], calling `observer(iteration, model)` after every
/// snapshot iteration.
pub fn train_with_observer<F>(
    set: &TrainingSet,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(MlpModel, TrainLog)>
where
    F: FnMut(usize, &MlpModel) -> Result<()>,
{
    cfg.validate()?;
    if let Some(b) = set
        .positives
        .iter()
        .chain(&set.negatives)
        .find(|b| b.segment_count() != cfg.segments_per_bag)
    {
        return Err(Error::Data(format!(
            "video {} has {} segments, expected {}",
            b.video_id,
            b.segment_count(),
            cfg.segments_per_bag
        )));
    }
    let arch = cfg.architecture(set.dim())?;
    let mut model = MlpModel::init(arch, cfg.dropout_rate, cfg.seed)?;
    let mut state = AdagradState::new(&arch, cfg.learning_rate, cfg.epsilon)?;

    let probe = match &cfg.probe_video {
        Some(id) => Some(
            set.positives
                .iter()
                .chain(&set.negatives)
                .find(|b| &b.video_id == id)
                .ok_or_else(|| Error::Data(format!("probe video {id} not in training set")))?,
        ),
        None => set.positives.first(),
    };
    let mut log = TrainLog {
        probe_video: probe.map(|b| b.video_id.clone()),
        ..TrainLog::default()
    };
    let snapshot = |it: usize, model: &MlpModel, log: &mut TrainLog| -> Result<()> {
        if let Some(bag) = probe {
            log.probe.push(ProbeSnapshot {
                iteration: it,
                scores: model.score(&bag.segments.features)?,
            });
        }
        Ok(())
    };
    if cfg.snapshot_every > 0 {
        snapshot(0, &model, &mut log)?;
    }

    for it in 1..=cfg.iterations {
        let pairs = sample_batch(set, cfg, it)?;
        let (loss, grads) =
            batch_objective(&model, &pairs, &cfg.loss, Some((cfg.seed, it)), cfg.threads)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                detail: format!("{loss:?}"),
            });
        }
        state.step(&mut model, &grads)?;
        if !model.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        log.records.push(IterationRecord {
            iteration: it,
            loss,
        });
        if cfg.snapshot_every > 0 && it % cfg.snapshot_every == 0 {
            snapshot(it, &model, &mut log)?;
            observer(it, &model)?;
        }
    }
    Ok((model, log))
}

/// Number of parameters touched by a nonzero update.
pub fn changed_params(before: &MlpModel, after: &MlpModel) -> usize {
    before.params().zip(after.params()).filter(|(a, b)| a != b).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{make_bag, FeatureMatrix};

    fn tiny_model() -> MlpModel {
        MlpModel::init(Architecture::new(3, 4, 2).unwrap(), 0.0, 1).unwrap()
    }

    fn unit_grads(model: &MlpModel, value: f64) -> Gradients {
        let mut g = Gradients::zeros(&model.arch);
        for i in 0..g.param_count() {
            *g.param_mut(i) = value;
        }
        g
    }

    #[test]
    fn adagrad_first_and_second_step() {
        let mut model = tiny_model();
        let start: Vec<f64> = model.params().collect();
        let mut state = AdagradState::new(&model.arch, 0.001, 1e-8).unwrap();
        let g = unit_grads(&model, 1.0);
        adagrad_step(&mut model, &g, &mut state).unwrap();
        let mid: Vec<f64> = model.params().collect();
        for (a, b) in start.iter().zip(&mid) {
            assert!((b - a - (-0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        }
        adagrad_step(&mut model, &g, &mut state).unwrap();
        for (a, b) in mid.iter().zip(model.params()) {
            assert!((b - a - (-0.001 / (2f64.sqrt() + 1e-8))).abs() < 1e-15);
        }
        assert!(state.accumulators.params().all(|v| v == 2.0));
    }

    #[test]
    fn adagrad_zero_gradient_is_identity() {
        let mut model = tiny_model();
        let before = model.clone();
        let mut state = AdagradState::new(&model.arch, 0.001, 1e-8).unwrap();
        let zero = Gradients::zeros(&model.arch);
        adagrad_step(&mut model, &zero, &mut state).unwrap();
        assert_eq!(model, before);
        assert!(state.accumulators.is_zero());
        assert_eq!(changed_params(&before, &model), 0);
    }

    #[test]
    fn adagrad_rejects_shape_mismatch() {
        let mut model = tiny_model();
        let mut state = AdagradState::new(&model.arch, 0.001, 1e-8).unwrap();
        let other = Gradients::zeros(&Architecture::new(3, 5, 2).unwrap());
        assert!(matches!(state.step(&mut model, &other), Err(Error::Argument(_))));
        assert!(AdagradState::new(&model.arch, 0.0, 1e-8).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig {
            batch_neg: 29,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn bags(n: usize, label: Label) -> Vec<Bag> {
        (0..n)
            .map(|i| {
                let data = (0..8 * 3).map(|k| ((i * 31 + k) as f64).cos()).collect();
                let f = FeatureMatrix::new(format!("{label:?}{i}"), 3, 128, data).unwrap();
                make_bag(&f, label, 4).unwrap()
            })
            .collect()
    }

    #[test]
    fn exhaustive_batch_uses_every_bag_once() {
        let set = TrainingSet {
            positives: bags(30, Label::Anomalous),
            negatives: bags(30, Label::Normal),
        };
        let cfg = TrainConfig::default();
        let idx = sample_indices(30, 30, &cfg, 1).unwrap();
        let mut p: Vec<usize> = idx.iter().map(|x| x.0).collect();
        let mut n: Vec<usize> = idx.iter().map(|x| x.1).collect();
        p.sort();
        n.sort();
        assert_eq!(p, (0..30).collect::<Vec<_>>());
        assert_eq!(n, (0..30).collect::<Vec<_>>());
        let a = sample_batch(&set, &cfg, 5).unwrap();
        let b = sample_batch(&set, &cfg, 5).unwrap();
        let ids = |v: &[(&Bag, &Bag)]| {
            v.iter()
                .map(|(p, n)| (p.video_id.clone(), n.video_id.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&a), ids(&b));
        assert!(sample_indices(29, 30, &cfg, 1).is_err());
    }

    #[test]
    fn one_iteration_gives_one_record() {
        let set = TrainingSet {
            positives: bags(4, Label::Anomalous),
            negatives: bags(4, Label::Normal),
        };
        let cfg = TrainConfig {
            batch_pos: 2,
            batch_neg: 2,
            iterations: 1,
            segments_per_bag: 4,
            hidden1: 6,
            hidden2: 3,
            ..TrainConfig::default()
        };
        let (model, log) = train(&set, &cfg).unwrap();
        assert_eq!(log.records.len(), 1);
        let init = MlpModel::init(model.arch, cfg.dropout_rate, cfg.seed).unwrap();
        assert!(changed_params(&init, &model) > 0);
        assert_eq!(log.loss_csv().lines().count(), 2);
    }

    #[test]
    fn segment_count_mismatch_is_a_data_error() {
        let set = TrainingSet {
            positives: bags(2, Label::Anomalous),
            negatives: bags(2, Label::Normal),
        };
        let cfg = TrainConfig {
            batch_pos: 2,
            batch_neg: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&set, &cfg), Err(Error::Data(_))));
    }
}
