//! Clip-feature ingestion and bag formation.
//!
//! A video arrives as a matrix of per-clip feature vectors (one row per
//! 16-frame clip). Rows are L2-normalized, then grouped into a fixed number
//! of contiguous temporal segments whose features are the mean of their
//! clips. A bag is the resulting segment matrix plus the video-level label.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MILF"
//! 4       4     u32 version (= 1)
//! 8       4     u32 n_clips
//! 12      4     u32 dim
//! 16      4     u32 n_frames
//! 20      4*n   f32 values, row-major, n = n_clips * dim
//! ```

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MILF";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Frames covered by one clip feature.
pub const FRAMES_PER_CLIP: usize = 16;

/// Default number of segments per bag.
pub const DEFAULT_SEGMENTS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureFormat {
    Binary,
    Csv,
}

impl FeatureFormat {
    /// `.csv` files are CSV; everything else is treated as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

/// Per-video clip features, `n_clips × dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    video_id: String,
    n_clips: usize,
    dim: usize,
    n_frames: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(
        video_id: impl Into<String>,
        dim: usize,
        n_frames: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("feature dimension must be positive"));
        }
        if n_frames == 0 {
            return Err(Error::arg("n_frames must be positive"));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::arg(format!(
                "{} values do not form a non-empty matrix with {} columns",
                data.len(),
                dim
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite feature value at index {i}")));
        }
        Ok(FeatureMatrix {
            video_id: video_id.into(),
            n_clips: data.len() / dim,
            dim,
            n_frames,
            data,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn n_clips(&self) -> usize {
        self.n_clips
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn with_video_id(mut self, video_id: impl Into<String>) -> Self {
        self.video_id = video_id.into();
        self
    }

    /// Encodes in the binary layout. Values are stored as `f32`.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for word in [
            FORMAT_VERSION,
            self.n_clips as u32,
            self.dim as u32,
            self.n_frames as u32,
        ] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_binary(video_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::format(format!("byte offset {offset}"), msg);
        if bytes.len() < HEADER_LEN {
            return Err(fail(
                bytes.len(),
                format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fail(0, "bad magic, expected \"MILF\"".into()));
        }
        let word = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let (n_clips, dim, n_frames) = (word(8) as usize, word(12) as usize, word(16) as usize);
        if n_clips == 0 {
            return Err(fail(8, "n_clips must be positive".into()));
        }
        if dim == 0 {
            return Err(fail(12, "dim must be positive".into()));
        }
        if n_frames == 0 {
            return Err(fail(16, "n_frames must be positive".into()));
        }
        let expected = n_clips
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| fail(8, "header dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(fail(
                bytes.len().min(expected),
                format!(
                    "dimension mismatch: header declares {n_clips}x{dim} values ({expected} bytes), file has {} bytes",
                    bytes.len()
                ),
            ));
        }
        let mut data = Vec::with_capacity(n_clips * dim);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fail(HEADER_LEN + 4 * i, format!("non-finite value {v}")));
            }
            data.push(v as f64);
        }
        Ok(FeatureMatrix {
            video_id: video_id.into(),
            n_clips,
            dim,
            n_frames,
            data,
        })
    }

    /// Encodes as CSV: a `n_clips,dim,n_frames` header then one clip per line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{},{}\n", self.n_clips, self.dim, self.n_frames);
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|&v| (v as f32).to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(video_id: impl Into<String>, text: &str) -> Result<Self> {
        let fail = |line: usize, msg: String| Error::format(format!("line {line}"), msg);
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or_else(|| fail(1, "empty file".into()))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(fail(hline, "header must be `n_clips,dim,n_frames`".into()));
        }
        let mut dims = [0usize; 3];
        for (slot, field) in dims.iter_mut().zip(&fields) {
            *slot = field
                .parse()
                .map_err(|_| fail(hline, format!("bad header field {field:?}")))?;
            if *slot == 0 {
                return Err(fail(hline, "header fields must be positive".into()));
            }
        }
        let [n_clips, dim, n_frames] = dims;
        let mut data = Vec::with_capacity(n_clips * dim);
        let mut rows = 0;
        for (lineno, line) in lines {
            if rows == n_clips {
                return Err(fail(lineno, format!("more than the declared {n_clips} rows")));
            }
            let before = data.len();
            for field in line.split(',') {
                let v: f32 = field
                    .trim()
                    .parse()
                    .map_err(|_| fail(lineno, format!("bad number {field:?}")))?;
                if !v.is_finite() {
                    return Err(fail(lineno, format!("non-finite value {v}")));
                }
                data.push(v as f64);
            }
            let width = data.len() - before;
            if width != dim {
                return Err(fail(lineno, format!("ragged row: {width} values, expected {dim}")));
            }
            rows += 1;
        }
        if rows != n_clips {
            return Err(fail(
                text.lines().count(),
                format!("dimension mismatch: {rows} rows, header declares {n_clips}"),
            ));
        }
        Ok(FeatureMatrix {
            video_id: video_id.into(),
            n_clips,
            dim,
            n_frames,
            data,
        })
    }
}

/// Video id taken from a feature file's stem.
pub fn video_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureMatrix> {
    let id = video_id_from_path(path);
    let located = |e: Error| match e {
        Error::Format { location, message } => Error::Format {
            location: format!("{}, {location}", path.display()),
            message,
        },
        other => other,
    };
    match format {
        FeatureFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            FeatureMatrix::from_binary(id, &bytes).map_err(located)
        }
        FeatureFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            FeatureMatrix::from_csv(id, &text).map_err(located)
        }
    }
}

pub fn write_features(path: &Path, f: &FeatureMatrix, format: FeatureFormat) -> Result<()> {
    let bytes = match format {
        FeatureFormat::Binary => f.to_binary(),
        FeatureFormat::Csv => f.to_csv().into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Scales each row to unit Euclidean norm. All-zero rows are left as is.
pub fn l2_normalize_rows(mut f: FeatureMatrix) -> FeatureMatrix {
    for row in f.data.chunks_exact_mut(f.dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    f
}

/// Half-open bounds of group `g` when `n` items are split into `m` groups.
pub fn group_bounds(n: usize, m: usize, g: usize) -> Range<usize> {
    (g * n / m)..((g + 1) * n / m)
}

/// For each of `m` segments, the index of the non-empty clip group whose
/// features it carries. Empty groups take the nearest preceding non-empty
/// one; leading empty groups take the first non-empty group.
pub fn segment_source_groups(n_clips: usize, m: usize) -> Vec<usize> {
    let non_empty: Vec<bool> = (0..m).map(|g| !group_bounds(n_clips, m, g).is_empty()).collect();
    let first = non_empty.iter().position(|&b| b).unwrap_or(0);
    let mut last = first;
    non_empty
        .iter()
        .enumerate()
        .map(|(g, &ne)| {
            if ne {
                last = g;
            }
            last
        })
        .collect()
}

/// Segment features and the frame ranges they cover.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    pub features: Vec<f64>,
    pub dim: usize,
    pub frame_ranges: Vec<Range<usize>>,
}

impl Segments {
    pub fn count(&self) -> usize {
        self.frame_ranges.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn partition_segments(f: &FeatureMatrix, m: usize) -> Result<Segments> {
    if m < 2 {
        return Err(Error::arg(format!("segment count must be at least 2, got {m}")));
    }
    let dim = f.dim;
    let mut features = vec![0.0; m * dim];
    let sources = segment_source_groups(f.n_clips, m);
    for (g, &src) in sources.iter().enumerate() {
        let out = &mut features[g * dim..(g + 1) * dim];
        if src != g {
            // filled from its source group below
            continue;
        }
        let clips = group_bounds(f.n_clips, m, g);
        let count = clips.len() as f64;
        for c in clips {
            for (o, v) in out.iter_mut().zip(f.row(c)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= count);
    }
    for (g, &src) in sources.iter().enumerate() {
        if src != g {
            let (lo, hi) = (src * dim, g * dim);
            features.copy_within(lo..lo + dim, hi);
        }
    }
    let frame_ranges = (0..m).map(|g| group_bounds(f.n_frames, m, g)).collect();
    Ok(Segments {
        features,
        dim,
        frame_ranges,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Label::Normal),
            1 => Some(Label::Anomalous),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

/// One video as a multiple-instance bag.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub video_id: String,
    pub label: Label,
    pub n_clips: usize,
    pub n_frames: usize,
    pub segments: Segments,
}

impl Bag {
    pub fn segment_count(&self) -> usize {
        self.segments.count()
    }

    pub fn dim(&self) -> usize {
        self.segments.dim
    }
}

/// Normalizes, segments and labels one video.
pub fn make_bag(f: &FeatureMatrix, label: Label, m: usize) -> Result<Bag> {
    let normalized = l2_normalize_rows(f.clone());
    let segments = partition_segments(&normalized, m)?;
    Ok(Bag {
        video_id: f.video_id.clone(),
        label,
        n_clips: f.n_clips,
        n_frames: f.n_frames,
        segments,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::arg(format!("split must be `train` or `test`, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub feature_path: PathBuf,
    pub label: Label,
    pub annotation_path: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn video_id(&self) -> String {
        video_id_from_path(&self.feature_path)
    }

    pub fn load(&self) -> Result<FeatureMatrix> {
        load_features(&self.feature_path, FeatureFormat::from_path(&self.feature_path))
    }
}

/// A list of labeled feature files. Paths are stored resolved against the
/// directory of the manifest file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl DatasetManifest {
    /// Parses manifest text. Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path, split: Split) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(Error::format(
                    format!("manifest line {lineno}"),
                    "expected `<feature_path> <label> [<annotation_path>]`",
                ));
            }
            let label = fields[1]
                .parse::<u8>()
                .ok()
                .and_then(Label::from_bit)
                .ok_or_else(|| {
                    Error::format(
                        format!("manifest line {lineno}"),
                        format!("label must be 0 or 1, got {:?}", fields[1]),
                    )
                })?;
            entries.push(ManifestEntry {
                feature_path: base_dir.join(fields[0]),
                label,
                annotation_path: fields.get(2).map(|p| base_dir.join(p)),
            });
        }
        Ok(DatasetManifest { entries, split })
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::parse(&text, base, split)
    }

    /// Checks that every referenced file exists and that anomalous test
    /// videos carry annotations.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !e.feature_path.is_file() {
                return Err(Error::Data(format!(
                    "feature file {} does not exist",
                    e.feature_path.display()
                )));
            }
            match &e.annotation_path {
                Some(a) if !a.is_file() => {
                    return Err(Error::Data(format!(
                        "annotation file {} does not exist",
                        a.display()
                    )))
                }
                None if self.split == Split::Test && e.label.is_anomalous() => {
                    return Err(Error::Data(format!(
                        "anomalous test video {} has no annotation",
                        e.feature_path.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Renders entries with paths relative to `base_dir` where possible.
    pub fn render(&self, base_dir: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(base_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        };
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&rel(&e.feature_path));
            out.push(' ');
            out.push_str(&e.label.bit().to_string());
            if let Some(a) = &e.annotation_path {
                out.push(' ');
                out.push_str(&rel(a));
            }
            out.push('\n');
        }
        out
    }

    /// Loads, normalizes and segments every entry, in manifest order.
    pub fn load_bags(&self, m: usize) -> Result<Vec<Bag>> {
        self.entries
            .iter()
            .map(|e| make_bag(&e.load()?, e.label, m))
            .collect()
    }
}
