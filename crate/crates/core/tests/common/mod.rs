#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use milrank::baseline::{score_linear, train_linear_on, video_feature, LinearTrainConfig};
use milrank::eval::{expand_scores, false_alarm_rate, roc_auc, ScoreTimeline};
use milrank::features::{make_bag, Bag, FeatureMatrix, Label, Split, DEFAULT_SEGMENTS};
use milrank::loss::LossParams;
use milrank::net::{Architecture, MlpModel};
use milrank::optim::{train, TrainConfig, TrainLog, TrainingSet};
use milrank::synthetic::{localization_accuracy, synthesize, SynthData, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sha256_file(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn random_features(r: &mut impl Rng, id: &str, n_clips: usize, dim: usize) -> FeatureMatrix {
    let data = (0..n_clips * dim).map(|_| r.random_range(-2.0..2.0)).collect();
    FeatureMatrix::new(id, dim, n_clips * 16, data).unwrap()
}

pub fn random_bag(r: &mut impl Rng, id: &str, label: Label, n_clips: usize, dim: usize, m: usize) -> Bag {
    make_bag(&random_features(r, id, n_clips, dim), label, m).unwrap()
}

/// Random weights and biases in `±scale`.
pub fn random_model(r: &mut impl Rng, arch: Architecture, dropout: f64, scale: f64) -> MlpModel {
    let mut m = MlpModel::zeros(arch, dropout).unwrap();
    for layer in &mut m.layers {
        layer.weights.iter_mut().chain(&mut layer.bias).for_each(|v| *v = r.random_range(-scale..scale));
    }
    m
}

pub fn bags(data: &SynthData, m: usize) -> Vec<Bag> {
    data.videos
        .iter()
        .map(|v| make_bag(&v.features, v.label, m).unwrap())
        .collect()
}

pub fn timelines(model: &MlpModel, bags: &[Bag]) -> Vec<ScoreTimeline> {
    bags.iter()
        .map(|b| expand_scores(b, &model.score(&b.segments.features).unwrap()).unwrap())
        .collect()
}

/// Test-split metrics of one scorer.
#[derive(Clone, Debug)]
pub struct Metrics {
    pub auc: f64,
    pub false_alarm: f64,
    pub localization: f64,
}

pub fn metrics(model: &MlpModel, test: &SynthData, test_bags: &[Bag]) -> Metrics {
    let tl = timelines(model, test_bags);
    let auc = roc_auc(&tl, &test.annotations()).unwrap().auc;
    let normal: Vec<ScoreTimeline> = tl
        .iter()
        .zip(test_bags)
        .filter(|(_, b)| b.label == Label::Normal)
        .map(|(t, _)| t.clone())
        .collect();
    Metrics {
        auc,
        false_alarm: false_alarm_rate(&normal, 0.5).unwrap(),
        localization: localization_accuracy(model, test_bags, &test.planted()).unwrap(),
    }
}

/// The scaled-down protocol: 20+20 training videos, 10+10 test videos,
/// batches of 10+10 and 2,000 iterations with the default loss.
pub struct Experiment {
    pub train: SynthData,
    pub test: SynthData,
    pub train_bags: Vec<Bag>,
    pub test_bags: Vec<Bag>,
    pub config: TrainConfig,
    pub model: MlpModel,
    pub initial: MlpModel,
    pub log: TrainLog,
    pub elapsed: Duration,
}

pub fn protocol_config(loss: LossParams) -> TrainConfig {
    TrainConfig {
        batch_pos: 10,
        batch_neg: 10,
        iterations: 2000,
        seed: 0,
        loss,
        threads: 1,
        ..TrainConfig::default()
    }
}

pub fn run_experiment(separation: f64, loss: LossParams) -> Experiment {
    let train_spec = SynthSpec {
        separation,
        ..SynthSpec::default()
    };
    let test_spec = SynthSpec {
        n_pos_videos: 10,
        n_neg_videos: 10,
        split: Split::Test,
        ..train_spec.clone()
    };
    let train_data = synthesize(&train_spec).unwrap();
    let test_data = synthesize(&test_spec).unwrap();
    let train_bags = bags(&train_data, DEFAULT_SEGMENTS);
    let test_bags = bags(&test_data, DEFAULT_SEGMENTS);
    let config = protocol_config(loss);
    let set = TrainingSet::new(train_bags.clone()).unwrap();
    let initial = MlpModel::init(config.architecture(set.dim()).unwrap(), config.dropout_rate, config.seed).unwrap();
    let start = Instant::now();
    let (model, log) = train(&set, &config).unwrap();
    let elapsed = start.elapsed();
    Experiment {
        train: train_data,
        test: test_data,
        train_bags,
        test_bags,
        config,
        model,
        initial,
        log,
        elapsed,
    }
}

/// Test AUC of the linear baseline trained on the experiment's training videos.
pub fn baseline_auc(e: &Experiment) -> f64 {
    let xs: Vec<Vec<f64>> = e.train.videos.iter().map(|v| video_feature(&v.features)).collect();
    let labels: Vec<Label> = e.train.videos.iter().map(|v| v.label).collect();
    let (lm, _) = train_linear_on(&xs, &labels, &LinearTrainConfig::default()).unwrap();
    let tl: Vec<ScoreTimeline> = e
        .test
        .videos
        .iter()
        .zip(&e.test_bags)
        .map(|(v, b)| expand_scores(b, &score_linear(&lm, &v.features, DEFAULT_SEGMENTS).unwrap()).unwrap())
        .collect();
    roc_auc(&tl, &e.test.annotations()).unwrap().auc
}

/// Brute-force `P(pos > neg) + ½ P(tie)` over all frame pairs.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let mut credit = 0.0;
    for &p in &pos {
        for &n in &neg {
            credit += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / (pos.len() * neg.len()) as f64
}
