//! Deterministic synthetic planted-anomaly benchmark.
//!
//! Normal snippets are noisy copies of a shared normal center in both
//! modalities. Each abnormal video carries one contiguous anomalous window
//! whose semantic rows are noisy copies of a single dictionary prompt
//! embedding and whose visual rows are shifted by a class-specific offset.
//! The normal semantic center is orthogonalized against the prompt span so
//! that normal captions carry no systematic prompt preference.
//!
//! This is the crate's desk-scale testbed. Its numbers characterize the
//! generator itself, not any external dataset.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LapError, Result};
use crate::features::{
    lapf, GroundTruth, ManifestEntry, Split, VideoFeatures, FRAMES_PER_SNIPPET,
};
use crate::ioutil::{atomic_write, ensure_dir};
use crate::prompts::DEFAULT_PROMPTS;

/// Shape of the generated benchmark. Defaults are sized so a full training
/// run finishes in well under a minute on one CPU core.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Abnormal training videos.
    pub n_abnormal: usize,
    /// Normal training videos.
    pub n_normal: usize,
    pub n_abnormal_test: usize,
    pub n_normal_test: usize,
    pub d_v: usize,
    pub d_t: usize,
    /// Dictionary capacity (also the number of anomaly classes).
    pub p: usize,
    /// Raw snippet counts are drawn uniformly from this inclusive range.
    pub min_snippets: usize,
    pub max_snippets: usize,
    pub frames_per_snippet: usize,
    /// Fraction of each abnormal video covered by the planted window.
    pub anomaly_window_frac: f64,
    /// Per-coordinate Gaussian noise added to every feature row.
    pub noise_sigma: f64,
    /// Norm of the class-specific visual offset inside the window.
    pub visual_offset: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_abnormal: 16,
            n_normal: 16,
            n_abnormal_test: 10,
            n_normal_test: 10,
            d_v: 32,
            d_t: 32,
            p: 8,
            min_snippets: 48,
            max_snippets: 96,
            frames_per_snippet: FRAMES_PER_SNIPPET,
            anomaly_window_frac: 0.25,
            noise_sigma: 0.1,
            visual_offset: 1.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_abnormal == 0 || self.n_normal == 0 {
            return Err(LapError::invalid(
                "synthetic spec needs at least one abnormal and one normal training video",
            ));
        }
        if self.n_abnormal_test == 0 || self.n_normal_test == 0 {
            return Err(LapError::invalid(
                "synthetic spec needs at least one abnormal and one normal test video",
            ));
        }
        if self.d_v < 8 || self.d_t < 8 {
            return Err(LapError::invalid("feature dimensions must be at least 8"));
        }
        if self.p < 2 {
            return Err(LapError::invalid("dictionary capacity P must be at least 2"));
        }
        if self.min_snippets == 0 || self.min_snippets > self.max_snippets {
            return Err(LapError::invalid("invalid snippet count range"));
        }
        if self.frames_per_snippet == 0 {
            return Err(LapError::invalid("frames_per_snippet must be positive"));
        }
        if !(self.anomaly_window_frac > 0.0 && self.anomaly_window_frac <= 1.0) {
            return Err(LapError::invalid("anomaly_window_frac must be in (0, 1]"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(LapError::invalid("noise_sigma must be finite and nonnegative"));
        }
        if !self.visual_offset.is_finite() {
            return Err(LapError::invalid("visual_offset must be finite"));
        }
        Ok(())
    }
}

/// A fully generated benchmark, before anything touches the filesystem.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: Vec<VideoFeatures>,
    pub test: Vec<VideoFeatures>,
    pub dictionary_texts: Vec<String>,
    /// `P x d_t`, rows aligned with `dictionary_texts`.
    pub dictionary_embeddings: Array2<f64>,
    /// Anomalous frame ranges for every video (empty for normal videos).
    pub ground_truth: GroundTruth,
}

/// One standard-normal draw via Box-Muller (two uniforms per call, so the
/// stream is reproducible without a distributions dependency).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_vector<R: Rng>(rng: &mut R, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| standard_normal(rng))
}

fn normalized<R: Rng>(rng: &mut R, dim: usize) -> Array1<f64> {
    loop {
        let v = gaussian_vector(rng, dim);
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Remove the component of `v` lying in the span of `basis` rows
/// (orthonormal), then normalize. Falls back to plain normalization when
/// nothing is left.
fn orthogonalize_against(v: &Array1<f64>, basis: &[Array1<f64>]) -> Array1<f64> {
    let mut out = v.clone();
    for q in basis {
        let coef = out.dot(q);
        out = out - q * coef;
    }
    let norm = out.dot(&out).sqrt();
    if norm > 1e-9 {
        out / norm
    } else {
        let norm = v.dot(v).sqrt();
        v / norm
    }
}

fn orthonormal_basis(rows: &Array2<f64>) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for row in rows.rows() {
        let mut q = row.to_owned();
        for b in &basis {
            let coef = q.dot(b);
            q = q - b * coef;
        }
        let norm = q.dot(&q).sqrt();
        if norm > 1e-9 {
            basis.push(q / norm);
        }
    }
    basis
}

fn prompt_texts(p: usize) -> Vec<String> {
    (0..p)
        .map(|j| {
            let base = DEFAULT_PROMPTS[j % DEFAULT_PROMPTS.len()];
            if j < DEFAULT_PROMPTS.len() {
                base.to_string()
            } else {
                format!("{base} (variant {})", j / DEFAULT_PROMPTS.len())
            }
        })
        .collect()
}

pub fn class_name(prompt_index: usize) -> String {
    format!("event_{prompt_index:02}")
}

struct Centers {
    prompts: Array2<f64>,
    normal_semantic: Array1<f64>,
    normal_visual: Array1<f64>,
    class_offsets: Vec<Array1<f64>>,
}

fn generate_video<R: Rng>(
    rng: &mut R,
    spec: &SyntheticSpec,
    centers: &Centers,
    video_id: String,
    abnormal: bool,
) -> (VideoFeatures, Vec<(usize, usize)>) {
    let raw = rng.random_range(spec.min_snippets..=spec.max_snippets);
    let fps = spec.frames_per_snippet;
    let frame_count = raw * fps;

    let (class, window) = if abnormal {
        let class = rng.random_range(0..spec.p);
        let len = ((spec.anomaly_window_frac * raw as f64).round() as usize).clamp(1, raw);
        let start = rng.random_range(0..=raw - len);
        (Some(class), Some((start, start + len)))
    } else {
        (None, None)
    };

    let mut visual = Array2::zeros((raw, spec.d_v));
    let mut semantic = Array2::zeros((raw, spec.d_t));
    for i in 0..raw {
        let noise_t = gaussian_vector(rng, spec.d_t) * spec.noise_sigma;
        let noise_v = gaussian_vector(rng, spec.d_v) * spec.noise_sigma;
        let in_window = window.map(|(a, b)| i >= a && i < b).unwrap_or(false);
        if in_window {
            let j = class.unwrap();
            let sem = &centers.prompts.row(j).to_owned() + &noise_t;
            let vis = &(&centers.normal_visual + &centers.class_offsets[j]) + &noise_v;
            semantic.row_mut(i).assign(&sem);
            visual.row_mut(i).assign(&vis);
        } else {
            semantic.row_mut(i).assign(&(&centers.normal_semantic + &noise_t));
            visual.row_mut(i).assign(&(&centers.normal_visual + &noise_v));
        }
    }
    lapf::quantize_to_f32(&mut visual);
    lapf::quantize_to_f32(&mut semantic);

    let gt = window
        .map(|(a, b)| vec![(a * fps, (b * fps).min(frame_count))])
        .unwrap_or_default();

    let video = VideoFeatures {
        video_id,
        label: abnormal as u8,
        class_name: class.map(class_name),
        visual,
        semantic,
        frame_count,
        frames_per_snippet: fps,
    };
    (video, gt)
}

/// Generate the benchmark. Deterministic for a fixed `(seed, spec)` pair.
pub fn generate(seed: u64, spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut prompts = Array2::zeros((spec.p, spec.d_t));
    for j in 0..spec.p {
        prompts.row_mut(j).assign(&normalized(&mut rng, spec.d_t));
    }
    let prompt_basis = orthonormal_basis(&prompts);
    let normal_semantic = orthogonalize_against(&normalized(&mut rng, spec.d_t), &prompt_basis);
    let normal_visual = normalized(&mut rng, spec.d_v);
    let class_offsets: Vec<Array1<f64>> = (0..spec.p)
        .map(|_| normalized(&mut rng, spec.d_v) * spec.visual_offset)
        .collect();
    let centers = Centers {
        prompts,
        normal_semantic,
        normal_visual,
        class_offsets,
    };

    let mut ground_truth = GroundTruth::default();
    let gen_group = |rng: &mut ChaCha20Rng,
                         gt: &mut GroundTruth,
                         split: Split,
                         abnormal: bool,
                         count: usize|
     -> Vec<VideoFeatures> {
        (0..count)
            .map(|i| {
                let kind = if abnormal { "abn" } else { "nrm" };
                let id = format!("{split}_{kind}_{i:03}");
                let (video, ranges) = generate_video(rng, spec, &centers, id.clone(), abnormal);
                gt.0.insert(id, ranges);
                video
            })
            .collect()
    };

    let mut train = gen_group(&mut rng, &mut ground_truth, Split::Train, true, spec.n_abnormal);
    train.extend(gen_group(&mut rng, &mut ground_truth, Split::Train, false, spec.n_normal));
    let mut test = gen_group(&mut rng, &mut ground_truth, Split::Test, true, spec.n_abnormal_test);
    test.extend(gen_group(&mut rng, &mut ground_truth, Split::Test, false, spec.n_normal_test));

    let mut dictionary_embeddings = centers.prompts;
    lapf::quantize_to_f32(&mut dictionary_embeddings);

    Ok(SyntheticDataset {
        train,
        test,
        dictionary_texts: prompt_texts(spec.p),
        dictionary_embeddings,
        ground_truth,
    })
}

/// Relative layout of a dataset directory written by [`write_dataset`].
pub mod layout {
    pub const TRAIN_MANIFEST: &str = "train_manifest.json";
    pub const TEST_MANIFEST: &str = "test_manifest.json";
    pub const GROUND_TRUTH: &str = "ground_truth.json";
    pub const DICTIONARY: &str = "dictionary.txt";
    pub const DICTIONARY_EMB: &str = "dictionary_emb.lapf";
    pub const SPEC_ECHO: &str = "synth_spec.json";
    pub const FEATURES_DIR: &str = "features";
}

fn manifest_entries(videos: &[VideoFeatures]) -> Vec<ManifestEntry> {
    videos
        .iter()
        .map(|v| ManifestEntry {
            video_id: v.video_id.clone(),
            label: v.label,
            class_name: v.class_name.clone(),
            visual_path: format!("{}/{}_vis.lapf", layout::FEATURES_DIR, v.video_id),
            semantic_path: format!("{}/{}_sem.lapf", layout::FEATURES_DIR, v.video_id),
            frame_count: v.frame_count,
        })
        .collect()
}

/// Generate and write a complete dataset directory: manifests, feature
/// files, dictionary text and embeddings, frame ground truth, and an echo
/// of the generating spec. Nothing is written if generation fails.
pub fn write_dataset(out_dir: &Path, seed: u64, spec: &SyntheticSpec) -> Result<()> {
    let ds = generate(seed, spec)?;

    ensure_dir(out_dir)?;
    let features_dir = out_dir.join(layout::FEATURES_DIR);
    ensure_dir(&features_dir)?;

    for v in ds.train.iter().chain(ds.test.iter()) {
        lapf::write_matrix(&features_dir.join(format!("{}_vis.lapf", v.video_id)), &v.visual)?;
        lapf::write_matrix(&features_dir.join(format!("{}_sem.lapf", v.video_id)), &v.semantic)?;
    }

    let write_manifest = |name: &str, videos: &[VideoFeatures]| -> Result<()> {
        let entries = manifest_entries(videos);
        let text = serde_json::to_string_pretty(&entries)
            .map_err(|e| LapError::invalid(format!("serializing manifest: {e}")))?;
        atomic_write(&out_dir.join(name), text.as_bytes())
    };
    write_manifest(layout::TRAIN_MANIFEST, &ds.train)?;
    write_manifest(layout::TEST_MANIFEST, &ds.test)?;

    ds.ground_truth.save(&out_dir.join(layout::GROUND_TRUTH))?;

    let mut dict_text = ds.dictionary_texts.join("\n");
    dict_text.push('\n');
    atomic_write(&out_dir.join(layout::DICTIONARY), dict_text.as_bytes())?;
    lapf::write_matrix(&out_dir.join(layout::DICTIONARY_EMB), &ds.dictionary_embeddings)?;

    #[derive(Serialize)]
    struct SpecEcho<'a> {
        seed: u64,
        spec: &'a SyntheticSpec,
    }
    let echo = serde_json::to_string_pretty(&SpecEcho { seed, spec })
        .map_err(|e| LapError::invalid(format!("serializing spec echo: {e}")))?;
    atomic_write(&out_dir.join(layout::SPEC_ECHO), echo.as_bytes())?;
    Ok(())
}

/// Parse a planted window back out of ground-truth frame ranges, in raw
/// snippet coordinates.
pub fn window_from_ranges(ranges: &[(usize, usize)], frames_per_snippet: usize) -> Option<(usize, usize)> {
    ranges.first().map(|&(s, e)| {
        (s / frames_per_snippet, e.div_ceil(frames_per_snippet))
    })
}
