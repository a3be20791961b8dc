//! Per-snippet feature tensors, dataset manifests, and bag assembly.
//!
//! A video is represented by two aligned matrices: one row of visual
//! features and one row of semantic (caption embedding) features per
//! snippet. Feature extraction happens offline; this crate consumes the
//! results as LAPF files listed in a JSON manifest.

pub mod lapf;
pub mod synth;

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{LapError, Result};

/// Frames covered by one snippet during feature extraction.
pub const FRAMES_PER_SNIPPET: usize = 16;

/// One video's features and labels, as loaded from disk or synthesized.
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub video_id: String,
    /// 0 = normal, 1 = abnormal (video level).
    pub label: u8,
    pub class_name: Option<String>,
    /// `snippets x d_v`.
    pub visual: Array2<f64>,
    /// `snippets x d_t`.
    pub semantic: Array2<f64>,
    pub frame_count: usize,
    pub frames_per_snippet: usize,
}

impl VideoFeatures {
    pub fn snippet_count(&self) -> usize {
        self.visual.nrows()
    }

    pub fn d_v(&self) -> usize {
        self.visual.ncols()
    }

    pub fn d_t(&self) -> usize {
        self.semantic.ncols()
    }

    /// Check the invariants that must hold for raw (unresampled) features.
    pub fn validate_raw(&self) -> Result<()> {
        if self.visual.nrows() == 0 {
            return Err(LapError::invalid(format!(
                "video {}: zero snippets",
                self.video_id
            )));
        }
        if self.visual.nrows() != self.semantic.nrows() {
            return Err(LapError::dims(
                format!("video {}: semantic snippet rows", self.video_id),
                self.visual.nrows(),
                self.semantic.nrows(),
            ));
        }
        if self.frame_count < self.visual.nrows() {
            return Err(LapError::invalid(format!(
                "video {}: frame_count {} < snippet count {}",
                self.video_id,
                self.frame_count,
                self.visual.nrows()
            )));
        }
        if self.frames_per_snippet == 0 {
            return Err(LapError::invalid(format!(
                "video {}: frames_per_snippet must be positive",
                self.video_id
            )));
        }
        for (name, m) in [("visual", &self.visual), ("semantic", &self.semantic)] {
            if !m.iter().all(|x| x.is_finite()) {
                return Err(LapError::NonFinite(format!(
                    "video {}: {name} features contain a non-finite entry",
                    self.video_id
                )));
            }
        }
        Ok(())
    }
}

/// A training batch: `b` abnormal videos followed by `b` normal videos,
/// each contributing `l` snippet rows.
#[derive(Debug, Clone)]
pub struct FeatureBag {
    /// `2*b*l x d_v`; abnormal rows first.
    pub visual: Array2<f64>,
    /// `2*b*l x d_t`; abnormal rows first.
    pub semantic: Array2<f64>,
    /// `2*b` video-level labels: `b` ones then `b` zeros.
    pub video_labels: Vec<u8>,
    pub b: usize,
    pub l: usize,
}

impl FeatureBag {
    /// Snippets per half (abnormal or normal).
    pub fn n(&self) -> usize {
        self.b * self.l
    }

    pub fn abnormal_visual(&self) -> ndarray::ArrayView2<'_, f64> {
        self.visual.slice(s![..self.n(), ..])
    }

    pub fn normal_visual(&self) -> ndarray::ArrayView2<'_, f64> {
        self.visual.slice(s![self.n().., ..])
    }

    pub fn abnormal_semantic(&self) -> ndarray::ArrayView2<'_, f64> {
        self.semantic.slice(s![..self.n(), ..])
    }

    pub fn normal_semantic(&self) -> ndarray::ArrayView2<'_, f64> {
        self.semantic.slice(s![self.n().., ..])
    }

    /// Recover each video's feature rows, in bag order.
    pub fn split_videos(&self) -> Vec<(Array2<f64>, Array2<f64>)> {
        (0..2 * self.b)
            .map(|j| {
                let lo = j * self.l;
                let hi = lo + self.l;
                (
                    self.visual.slice(s![lo..hi, ..]).to_owned(),
                    self.semantic.slice(s![lo..hi, ..]).to_owned(),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One manifest record. Paths are relative to the manifest file's directory
/// unless absolute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub label: u8,
    pub class_name: Option<String>,
    pub visual_path: String,
    pub semantic_path: String,
    pub frame_count: usize,
}

/// A validated list of videos for one split.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
    /// Visual feature dimension, consistent across all entries.
    pub d_v: usize,
    /// Semantic feature dimension, consistent across all entries.
    pub d_t: usize,
}

impl DatasetManifest {
    /// Load and validate a manifest. Every referenced feature file must
    /// exist and carry a parseable LAPF header; dimensions must be
    /// consistent across the dataset and between the manifest and the file
    /// headers. Errors name the offending video.
    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LapError::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| LapError::malformed(path, format!("invalid manifest JSON: {e}")))?;
        if entries.is_empty() {
            return Err(LapError::malformed(path, "no videos"));
        }
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));

        let mut seen = HashSet::new();
        let mut d_v = None;
        let mut d_t = None;
        for entry in &entries {
            if !seen.insert(entry.video_id.clone()) {
                return Err(LapError::malformed(
                    path,
                    format!("duplicate video_id {:?}", entry.video_id),
                ));
            }
            if entry.label > 1 {
                return Err(LapError::malformed(
                    path,
                    format!("video {}: label must be 0 or 1", entry.video_id),
                ));
            }
            let vis = lapf::read_header(&resolve(&base_dir, &entry.visual_path))?;
            let sem = lapf::read_header(&resolve(&base_dir, &entry.semantic_path))?;
            if vis.rows != sem.rows {
                return Err(LapError::dims(
                    format!("video {}: semantic snippet rows", entry.video_id),
                    vis.rows,
                    sem.rows,
                ));
            }
            if entry.frame_count < vis.rows {
                return Err(LapError::malformed(
                    path,
                    format!(
                        "video {}: frame_count {} < snippet count {}",
                        entry.video_id, entry.frame_count, vis.rows
                    ),
                ));
            }
            match d_v {
                None => d_v = Some(vis.cols),
                Some(d) if d != vis.cols => {
                    return Err(LapError::dims(
                        format!("video {}: visual dimension d_v", entry.video_id),
                        d,
                        vis.cols,
                    ))
                }
                _ => {}
            }
            match d_t {
                None => d_t = Some(sem.cols),
                Some(d) if d != sem.cols => {
                    return Err(LapError::dims(
                        format!("video {}: semantic dimension d_t", entry.video_id),
                        d,
                        sem.cols,
                    ))
                }
                _ => {}
            }
        }
        Ok(DatasetManifest {
            split,
            entries,
            base_dir,
            d_v: d_v.unwrap(),
            d_t: d_t.unwrap(),
        })
    }

    /// Load one video's full feature matrices.
    pub fn load_video(&self, index: usize) -> Result<VideoFeatures> {
        let entry = &self.entries[index];
        let video = VideoFeatures {
            video_id: entry.video_id.clone(),
            label: entry.label,
            class_name: entry.class_name.clone(),
            visual: lapf::read_matrix(&resolve(&self.base_dir, &entry.visual_path))?,
            semantic: lapf::read_matrix(&resolve(&self.base_dir, &entry.semantic_path))?,
            frame_count: entry.frame_count,
            frames_per_snippet: FRAMES_PER_SNIPPET,
        };
        video.validate_raw()?;
        Ok(video)
    }

    pub fn load_all(&self) -> Result<Vec<VideoFeatures>> {
        (0..self.entries.len()).map(|i| self.load_video(i)).collect()
    }

    pub fn count_with_label(&self, label: u8) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Resample both feature matrices to exactly `l` rows.
///
/// Output row `i` is the mean of the raw rows in the i-th of `l` contiguous
/// partitions with boundaries at `floor(i * raw / l)`. When a partition is
/// empty (raw < l) the row at the partition start is copied, so every
/// output row copies exactly one input row.
pub fn resample_to_l(video: &VideoFeatures, l: usize) -> Result<VideoFeatures> {
    if l == 0 {
        return Err(LapError::invalid("snippet count L must be positive"));
    }
    if video.snippet_count() == 0 {
        return Err(LapError::invalid(format!(
            "video {}: zero snippets",
            video.video_id
        )));
    }
    Ok(VideoFeatures {
        video_id: video.video_id.clone(),
        label: video.label,
        class_name: video.class_name.clone(),
        visual: resample_matrix(&video.visual, l),
        semantic: resample_matrix(&video.semantic, l),
        frame_count: video.frame_count,
        frames_per_snippet: video.frames_per_snippet,
    })
}

fn resample_matrix(m: &Array2<f64>, l: usize) -> Array2<f64> {
    let raw = m.nrows();
    if raw == l {
        return m.clone();
    }
    let mut out = Array2::zeros((l, m.ncols()));
    for i in 0..l {
        let lo = i * raw / l;
        let hi = ((i + 1) * raw / l).max(lo + 1);
        let mean = m.slice(s![lo..hi, ..]).mean_axis(Axis(0)).unwrap();
        out.row_mut(i).assign(&mean);
    }
    out
}

/// Stack resampled videos into a training bag: abnormal half first.
pub fn make_bag(abnormal: &[VideoFeatures], normal: &[VideoFeatures], l: usize) -> Result<FeatureBag> {
    if abnormal.len() != normal.len() {
        return Err(LapError::invalid(format!(
            "bag halves must have equal video counts, got {} abnormal and {} normal",
            abnormal.len(),
            normal.len()
        )));
    }
    if abnormal.is_empty() {
        return Err(LapError::invalid("bag must contain at least one video per half"));
    }
    let b = abnormal.len();
    let d_v = abnormal[0].d_v();
    let d_t = abnormal[0].d_t();
    for v in abnormal.iter().chain(normal.iter()) {
        if v.snippet_count() != l {
            return Err(LapError::dims(
                format!("video {}: snippet rows (resample to L first)", v.video_id),
                l,
                v.snippet_count(),
            ));
        }
        if v.d_v() != d_v {
            return Err(LapError::dims(format!("video {}: d_v", v.video_id), d_v, v.d_v()));
        }
        if v.d_t() != d_t {
            return Err(LapError::dims(format!("video {}: d_t", v.video_id), d_t, v.d_t()));
        }
    }
    let n = b * l;
    let mut visual = Array2::zeros((2 * n, d_v));
    let mut semantic = Array2::zeros((2 * n, d_t));
    for (slot, v) in abnormal.iter().chain(normal.iter()).enumerate() {
        let lo = slot * l;
        visual.slice_mut(s![lo..lo + l, ..]).assign(&v.visual);
        semantic.slice_mut(s![lo..lo + l, ..]).assign(&v.semantic);
    }
    let mut video_labels = vec![1u8; b];
    video_labels.extend(std::iter::repeat(0u8).take(b));
    Ok(FeatureBag {
        visual,
        semantic,
        video_labels,
        b,
        l,
    })
}

/// Per-video anomalous frame ranges, half-open `[start, end)`.
///
/// Videos with no anomalous frames may be listed with an empty range list
/// or omitted entirely.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruth(pub BTreeMap<String, Vec<(usize, usize)>>);

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LapError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| LapError::malformed(path, format!("invalid ground truth JSON: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| LapError::invalid(format!("serializing ground truth: {e}")))?;
        crate::ioutil::atomic_write(path, text.as_bytes())
    }

    /// Expand to one 0/1 label per frame.
    pub fn frame_labels(&self, video_id: &str, frame_count: usize) -> Result<Vec<u8>> {
        let mut labels = vec![0u8; frame_count];
        if let Some(ranges) = self.0.get(video_id) {
            for &(start, end) in ranges {
                if start >= end || end > frame_count {
                    return Err(LapError::invalid(format!(
                        "video {video_id}: ground-truth range [{start}, {end}) outside 0..{frame_count}"
                    )));
                }
                for label in &mut labels[start..end] {
                    *label = 1;
                }
            }
        }
        Ok(labels)
    }
}
