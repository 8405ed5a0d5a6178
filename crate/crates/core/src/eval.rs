//! Frame-level evaluation.
//!
//! Segment scores are expanded to a per-frame timeline. Frames of all test
//! videos are pooled into one ROC curve; a frame is positive when it lies
//! inside an annotated anomalous interval.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{make_bag, Bag, FeatureMatrix, Label};
use crate::net::MlpModel;

/// Ground-truth anomalous frames of one video, as sorted half-open intervals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalAnnotation {
    pub video_id: String,
    pub n_frames: usize,
    pub intervals: Vec<Range<usize>>,
}

impl TemporalAnnotation {
    pub fn new(
        video_id: impl Into<String>,
        n_frames: usize,
        intervals: Vec<Range<usize>>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if n_frames == 0 {
            return Err(Error::arg(format!("{video_id}: n_frames must be positive")));
        }
        let mut prev_end = 0;
        for iv in &intervals {
            if iv.start >= iv.end || iv.end > n_frames || iv.start < prev_end {
                return Err(Error::arg(format!(
                    "{video_id}: interval {iv:?} is empty, out of [0, {n_frames}) or overlaps/precedes the previous one"
                )));
            }
            prev_end = iv.end;
        }
        Ok(TemporalAnnotation {
            video_id,
            n_frames,
            intervals,
        })
    }

    /// An annotation with no anomalous frames.
    pub fn normal(video_id: impl Into<String>, n_frames: usize) -> Self {
        TemporalAnnotation {
            video_id: video_id.into(),
            n_frames,
            intervals: Vec::new(),
        }
    }

    pub fn is_anomalous(&self, frame: usize) -> bool {
        self.intervals.iter().any(|iv| iv.contains(&frame))
    }

    pub fn frame_labels(&self) -> Vec<bool> {
        let mut labels = vec![false; self.n_frames];
        for iv in &self.intervals {
            labels[iv.clone()].fill(true);
        }
        labels
    }

    /// `<video_id> <n_frames> <start1> <end1> ...`
    pub fn to_line(&self) -> String {
        let mut line = format!("{} {}", self.video_id, self.n_frames);
        for iv in &self.intervals {
            let _ = write!(line, " {} {}", iv.start, iv.end);
        }
        line
    }
}

/// Parses annotation lines `<video_id> <n_frames> <start> <end> ...`.
/// `-1 -1` pairs are ignored.
pub fn parse_annotations(text: &str) -> Result<Vec<TemporalAnnotation>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let loc = || format!("annotation line {}", i + 1);
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 || !fields.len().is_multiple_of(2) {
            return Err(Error::format(
                loc(),
                "expected `<video_id> <n_frames>` followed by start/end pairs",
            ));
        }
        let n_frames: usize = fields[1]
            .parse()
            .map_err(|_| Error::format(loc(), format!("bad frame count {:?}", fields[1])))?;
        let mut intervals = Vec::new();
        for pair in fields[2..].chunks_exact(2) {
            let parse = |s: &str| {
                s.parse::<i64>()
                    .map_err(|_| Error::format(loc(), format!("bad frame index {s:?}")))
            };
            match (parse(pair[0])?, parse(pair[1])?) {
                (-1, -1) => {}
                (s, e) if s >= 0 && e >= 0 => intervals.push(s as usize..e as usize),
                (s, e) => {
                    return Err(Error::format(loc(), format!("negative interval {s} {e}")));
                }
            }
        }
        let ann = TemporalAnnotation::new(fields[0], n_frames, intervals)
            .map_err(|e| Error::format(loc(), e.to_string()))?;
        out.push(ann);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<TemporalAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Format { location, message } => {
            Error::format(format!("{}, {location}", path.display()), message)
        }
        other => other,
    })
}

/// Per-frame anomaly scores of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTimeline {
    pub video_id: String,
    pub frame_scores: Vec<f64>,
}

impl ScoreTimeline {
    /// `frame,score`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,score\n");
        for (i, s) in self.frame_scores.iter().enumerate() {
            let _ = writeln!(out, "{i},{s}");
        }
        out
    }
}

/// Gives each frame the score of the segment whose range contains it.
pub fn expand_scores(bag: &Bag, segment_scores: &[f64]) -> Result<ScoreTimeline> {
    if segment_scores.len() != bag.segment_count() {
        return Err(Error::arg(format!(
            "{} scores for {} segments",
            segment_scores.len(),
            bag.segment_count()
        )));
    }
    let mut frame_scores = vec![0.0; bag.n_frames];
    for (range, &s) in bag.segments.frame_ranges.iter().zip(segment_scores) {
        frame_scores[range.clone()].fill(s);
    }
    Ok(ScoreTimeline {
        video_id: bag.video_id.clone(),
        frame_scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Frames scoring `>= threshold` are called anomalous.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// `threshold,fpr,tpr` rows followed by `AUC,<value>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        let _ = writeln!(out, "AUC,{}", self.auc);
        out
    }
}

/// ROC over labeled scores. Thresholds run from `+inf` down through every
/// distinct score; tied scores move along a diagonal, so the trapezoidal
/// area equals the pair-counting AUC with half credit for ties.
pub fn roc_from_scores(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::arg("scores and labels differ in length"));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not comparable")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "ROC needs both classes, got {n_pos} anomalous and {n_neg} normal frames"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (pos_total, neg_total) = (n_pos as f64, n_neg as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count space, normalized once at the end
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg_total,
            tpr: tp as f64 / pos_total,
        });
    }
    Ok(RocCurve {
        points,
        auc: auc / (pos_total * neg_total),
    })
}

/// Pooled frame-level ROC across videos, matched by video id.
pub fn roc_auc(timelines: &[ScoreTimeline], annotations: &[TemporalAnnotation]) -> Result<RocCurve> {
    let by_id: HashMap<&str, &TemporalAnnotation> =
        annotations.iter().map(|a| (a.video_id.as_str(), a)).collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for t in timelines {
        let ann = by_id
            .get(t.video_id.as_str())
            .ok_or_else(|| Error::arg(format!("no annotation for video {}", t.video_id)))?;
        if ann.n_frames != t.frame_scores.len() {
            return Err(Error::arg(format!(
                "video {}: annotation has {} frames, timeline {}",
                t.video_id,
                ann.n_frames,
                t.frame_scores.len()
            )));
        }
        scores.extend_from_slice(&t.frame_scores);
        labels.extend(ann.frame_labels());
    }
    roc_from_scores(&scores, &labels)
}

/// Fraction of pooled frames scoring at or above `threshold`.
pub fn false_alarm_rate(timelines: &[ScoreTimeline], threshold: f64) -> Result<f64> {
    let total: usize = timelines.iter().map(|t| t.frame_scores.len()).sum();
    if total == 0 {
        return Err(Error::Metric("no frames to evaluate".into()));
    }
    let alarms = timelines
        .iter()
        .flat_map(|t| &t.frame_scores)
        .filter(|&&s| s >= threshold)
        .count();
    Ok(alarms as f64 / total as f64)
}

/// Normalize, segment, score in eval mode and expand to frames.
pub fn score_video(model: &MlpModel, f: &FeatureMatrix, m: usize) -> Result<(Vec<f64>, ScoreTimeline)> {
    if model.dim() != f.dim() {
        return Err(Error::arg(format!(
            "model expects {}-dimensional features, video {} has {}",
            model.dim(),
            f.video_id(),
            f.dim()
        )));
    }
    let bag = make_bag(f, Label::Normal, m)?;
    let scores = model.score(&bag.segments.features)?;
    let timeline = expand_scores(&bag, &scores)?;
    Ok((scores, timeline))
}
