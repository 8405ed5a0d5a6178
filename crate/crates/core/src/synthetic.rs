//! Synthetic videos with planted anomalous clip runs.
//!
//! Normal clips are drawn from `N(μ0, σ²I)`. Each positive video has one
//! contiguous run of anomalous clips drawn from `N(μ0 + s·u, σ²I)` with `u`
//! a random unit direction. `μ0` (entries `N(0, 1)`) and `u` depend only on
//! the seed, so a train and a test split generated from the same seed share
//! them; the videos themselves are keyed by split.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::eval::TemporalAnnotation;
use crate::features::{
    group_bounds, segment_source_groups, write_features, Bag, DatasetManifest, FeatureFormat,
    FeatureMatrix, Label, ManifestEntry, Split, FRAMES_PER_CLIP,
};
use crate::loss::argmax;
use crate::net::MlpModel;
use crate::rng::{self, Domain};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ANNOTATION_FILE: &str = "annotations.txt";
pub const PLANTED_FILE: &str = "planted.csv";
pub const FEATURE_DIR: &str = "features";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_pos_videos: usize,
    pub n_neg_videos: usize,
    pub dim: usize,
    pub clips_per_video: usize,
    /// Fraction of a positive video's clips that are anomalous.
    pub anomaly_fraction: f64,
    /// Mean shift between normal and anomalous clips; 0 makes them identical.
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub split: Split,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_pos_videos: 20,
            n_neg_videos: 20,
            dim: 32,
            clips_per_video: 64,
            anomaly_fraction: 0.15,
            separation: 2.0,
            noise_sigma: 1.0,
            seed: 0,
            split: Split::Train,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_pos_videos == 0 || self.n_neg_videos == 0 {
            return Err(Error::arg("need at least one positive and one negative video"));
        }
        if self.dim == 0 || self.clips_per_video == 0 {
            return Err(Error::arg("dim and clips_per_video must be positive"));
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 1.0) {
            return Err(Error::arg(format!(
                "anomaly_fraction must be in (0, 1), got {}",
                self.anomaly_fraction
            )));
        }
        if self.anomaly_fraction * (self.clips_per_video as f64) < 1.0 {
            return Err(Error::arg("anomaly_fraction · clips_per_video must be at least 1"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::arg(format!("separation must be >= 0, got {}", self.separation)));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::arg(format!("noise_sigma must be positive, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn run_length(&self) -> usize {
        ((self.anomaly_fraction * self.clips_per_video as f64).round() as usize)
            .clamp(1, self.clips_per_video)
    }

    pub fn n_frames(&self) -> usize {
        self.clips_per_video * FRAMES_PER_CLIP
    }
}

/// Distribution parameters shared by every split of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub normal_mean: Vec<f64>,
    /// Unit vector along which anomalous clips are shifted.
    pub direction: Vec<f64>,
}

impl SynthWorld {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = rng::keyed(seed, Domain::SynthWorld, dim as u64, 0);
        let normal_mean: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut direction: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        direction.iter_mut().for_each(|v| *v /= norm);
        SynthWorld {
            normal_mean,
            direction,
        }
    }
}

/// Clip indices `[clip_start, clip_end)` of a positive video's anomaly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantedRun {
    pub video_id: String,
    pub clip_start: usize,
    pub clip_end: usize,
}

impl PlantedRun {
    pub fn frames(&self) -> Range<usize> {
        self.clip_start * FRAMES_PER_CLIP..self.clip_end * FRAMES_PER_CLIP
    }
}

#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub features: FeatureMatrix,
    pub label: Label,
    pub annotation: TemporalAnnotation,
    pub planted: Option<PlantedRun>,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub world: SynthWorld,
    /// Positives first, then negatives.
    pub videos: Vec<SynthVideo>,
}

impl SynthData {
    pub fn planted(&self) -> Vec<PlantedRun> {
        self.videos.iter().filter_map(|v| v.planted.clone()).collect()
    }

    pub fn annotations(&self) -> Vec<TemporalAnnotation> {
        self.videos.iter().map(|v| v.annotation.clone()).collect()
    }
}

fn video_id(split: Split, label: Label, i: usize) -> String {
    let kind = if label.is_anomalous() { "pos" } else { "neg" };
    format!("{split}_{kind}_{i:03}")
}

/// Generates the dataset in memory. Values are rounded to `f32`, exactly as
/// they are stored on disk.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let world = SynthWorld::new(spec.seed, spec.dim);
    let split_tag = match spec.split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let labels = std::iter::repeat_n(Label::Anomalous, spec.n_pos_videos)
        .chain(std::iter::repeat_n(Label::Normal, spec.n_neg_videos));
    let mut videos = Vec::with_capacity(spec.n_pos_videos + spec.n_neg_videos);
    for (v, label) in labels.enumerate() {
        let i = if label.is_anomalous() { v } else { v - spec.n_pos_videos };
        let id = video_id(spec.split, label, i);
        let mut rng = rng::keyed(spec.seed, Domain::SynthVideo, split_tag, v as u64);
        let clips = spec.clips_per_video;
        let run = label.is_anomalous().then(|| {
            let len = spec.run_length();
            let start = rng.random_range(0..=clips - len);
            start..start + len
        });
        let mut data = Vec::with_capacity(clips * spec.dim);
        for c in 0..clips {
            let shift = match &run {
                Some(r) if r.contains(&c) => spec.separation,
                _ => 0.0,
            };
            for d in 0..spec.dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = world.normal_mean[d] + spec.noise_sigma * z + shift * world.direction[d];
                data.push(x as f32 as f64);
            }
        }
        let features = FeatureMatrix::new(id.clone(), spec.dim, spec.n_frames(), data)?;
        let planted = run.as_ref().map(|r| PlantedRun {
            video_id: id.clone(),
            clip_start: r.start,
            clip_end: r.end,
        });
        let intervals = planted.iter().map(PlantedRun::frames).collect();
        let annotation = TemporalAnnotation::new(id, spec.n_frames(), intervals)?;
        videos.push(SynthVideo {
            features,
            label,
            annotation,
            planted,
        });
    }
    Ok(SynthData {
        spec: spec.clone(),
        world,
        videos,
    })
}

/// Paths written by [`generate`].
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub data: SynthData,
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub annotation_path: PathBuf,
    pub planted_path: PathBuf,
    pub feature_paths: Vec<PathBuf>,
}

/// Writes binary feature files, the manifest, annotations and the planted
/// runs under `out_dir`. Test manifests reference the annotation file from
/// every entry; train manifests carry labels only.
pub fn write_dataset(data: SynthData, out_dir: &Path) -> Result<SynthOutput> {
    let feature_dir = out_dir.join(FEATURE_DIR);
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let annotation_path = out_dir.join(ANNOTATION_FILE);
    let mut entries = Vec::new();
    let mut feature_paths = Vec::new();
    for v in &data.videos {
        let path = feature_dir.join(format!("{}.milf", v.features.video_id()));
        write_features(&path, &v.features, FeatureFormat::Binary)?;
        entries.push(ManifestEntry {
            feature_path: path.clone(),
            label: v.label,
            annotation_path: (data.spec.split == Split::Test).then(|| annotation_path.clone()),
        });
        feature_paths.push(path);
    }
    let manifest = DatasetManifest {
        entries,
        split: data.spec.split,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let write = |path: &Path, text: String| fs::write(path, text).map_err(|e| Error::io(path, e));
    write(&manifest_path, manifest.render(out_dir))?;

    let mut ann = String::new();
    for v in &data.videos {
        ann.push_str(&v.annotation.to_line());
        ann.push('\n');
    }
    write(&annotation_path, ann)?;

    let planted_path = out_dir.join(PLANTED_FILE);
    let mut planted = String::from("video_id,clip_start,clip_end\n");
    for p in data.planted() {
        let _ = writeln!(planted, "{},{},{}", p.video_id, p.clip_start, p.clip_end);
    }
    write(&planted_path, planted)?;

    Ok(SynthOutput {
        data,
        manifest,
        manifest_path,
        annotation_path,
        planted_path,
        feature_paths,
    })
}

pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    write_dataset(synthesize(spec)?, out_dir)
}

/// Parses `planted.csv`.
pub fn parse_planted(text: &str) -> Result<Vec<PlantedRun>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(format!("planted line {}", i + 1), "expected `video_id,clip_start,clip_end`");
        if fields.len() != 3 {
            return Err(bad());
        }
        out.push(PlantedRun {
            video_id: fields[0].to_string(),
            clip_start: fields[1].parse().map_err(|_| bad())?,
            clip_end: fields[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Marks the segments whose source clip group overlaps the planted run.
pub fn planted_segments(n_clips: usize, m: usize, run: &PlantedRun) -> Vec<bool> {
    segment_source_groups(n_clips, m)
        .into_iter()
        .map(|g| {
            let clips = group_bounds(n_clips, m, g);
            clips.start < run.clip_end && run.clip_start < clips.end
        })
        .collect()
}

/// Fraction of positive bags whose top-scored segment lies on the planted run.
/// Bags without a planted run are skipped.
pub fn localization_accuracy(model: &MlpModel, bags: &[Bag], planted: &[PlantedRun]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for bag in bags {
        let Some(run) = planted.iter().find(|p| p.video_id == bag.video_id) else {
            continue;
        };
        let scores = model.score(&bag.segments.features)?;
        let inside = planted_segments(bag.n_clips, bag.segment_count(), run);
        total += 1;
        if inside[argmax(&scores)] {
            hits += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}
