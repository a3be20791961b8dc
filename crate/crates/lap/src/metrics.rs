//! Frame-level evaluation: ROC AUC, average precision, false alarm rates,
//! and the inference path that turns checkpoints plus feature files into an
//! evaluation report.
//!
//! Tie handling is fixed throughout: ROC AUC groups tied scores into one
//! threshold step (equivalently, the rank statistic with half credit for
//! ties) and AP uses step-wise precision over descending unique thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LapError, Result};
use crate::features::{resample_to_l, GroundTruth, VideoFeatures};
use crate::model::{forward, fuse, smooth_scores, FusionConfig, MlpParams, SmootherConfig};

/// Operating threshold for the false alarm rate.
pub const FAR_THRESHOLD: f64 = 0.5;

fn validate_scores_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(LapError::dims("scores vs labels length", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(LapError::invalid("no samples"));
    }
    if !scores.iter().all(|x| x.is_finite()) {
        return Err(LapError::NonFinite("scores".into()));
    }
    if !labels.iter().all(|&y| y <= 1) {
        return Err(LapError::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Area under the ROC curve with grouped threshold steps at distinct
/// scores. Computed as the rank statistic: tied groups share their average
/// rank, which credits ties at one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    validate_scores_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(LapError::Degenerate(
            "AUC undefined: only one class present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0_f64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their average.
        let avg_rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            if labels[i] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        start = end;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Average precision over descending unique score thresholds with
/// step-wise (non-interpolated) precision; tied scores form one step.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    validate_scores_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(LapError::Degenerate("AP undefined: no positive samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut ap = 0.0_f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0_f64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        start = end;
    }
    Ok(ap)
}

/// False alarm rate: the fraction of negative samples scored strictly
/// above `threshold`.
pub fn far(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    validate_scores_labels(scores, labels)?;
    let n_neg = labels.iter().filter(|&&y| y == 0).count();
    if n_neg == 0 {
        return Err(LapError::Degenerate("FAR undefined: no negative samples".into()));
    }
    let fp = scores
        .iter()
        .zip(labels.iter())
        .filter(|&(&s, &y)| y == 0 && s > threshold)
        .count();
    Ok(fp as f64 / n_neg as f64)
}

/// Replicate `l` snippet scores over `frame_count` frames: frame `f` takes
/// the score at index `floor(f * l / frame_count)`.
pub fn expand_scores(snippet_scores: &[f64], frame_count: usize) -> Vec<f64> {
    let l = snippet_scores.len();
    (0..frame_count).map(|f| snippet_scores[f * l / frame_count]).collect()
}

/// One test video's frame-level scores and ground truth.
#[derive(Debug, Clone)]
pub struct FrameScores {
    pub video_id: String,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub video_label: u8,
    pub class_name: Option<String>,
}

impl FrameScores {
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(LapError::dims(
                format!("video {}: frame labels", self.video_id),
                self.scores.len(),
                self.labels.len(),
            ));
        }
        if !self.scores.iter().all(|&s| (0.0..=1.0).contains(&s)) {
            return Err(LapError::invalid(format!(
                "video {}: frame scores must lie in [0, 1]",
                self.video_id
            )));
        }
        Ok(())
    }
}

/// Frame-level metric bundle. Metrics that are undefined on the given data
/// (a single class, no positives) are `None`, with the reason recorded in
/// `notes` under the metric's name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_all: Option<f64>,
    pub auc_abn: Option<f64>,
    pub ap: Option<f64>,
    pub far_all: Option<f64>,
    pub far_abn: Option<f64>,
    pub class_auc: BTreeMap<String, Option<f64>>,
    pub frames_evaluated: usize,
    pub abnormal_video_frames: usize,
    pub positive_frames: usize,
    pub notes: BTreeMap<String, String>,
}

fn record<T>(
    result: Result<T>,
    name: &str,
    notes: &mut BTreeMap<String, String>,
) -> Result<Option<T>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(LapError::Degenerate(msg)) => {
            notes.insert(name.to_string(), msg);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Pool per-video frame scores into the metric bundle.
///
/// `auc_abn` and `far_abn` restrict to frames of abnormal videos (their
/// own normal frames serve as the negatives). Class-wise AUC pools each
/// class's video frames against all normal-video frames.
pub fn evaluate_frames(frames: &[FrameScores]) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(LapError::invalid("no videos to evaluate"));
    }
    for f in frames {
        f.validate()?;
    }

    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut abn_scores = Vec::new();
    let mut abn_labels = Vec::new();
    let mut normal_scores = Vec::new();
    let mut by_class: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();

    for f in frames {
        all_scores.extend_from_slice(&f.scores);
        all_labels.extend_from_slice(&f.labels);
        if f.video_label == 1 {
            abn_scores.extend_from_slice(&f.scores);
            abn_labels.extend_from_slice(&f.labels);
            if let Some(class) = &f.class_name {
                let entry = by_class.entry(class.clone()).or_default();
                entry.0.extend_from_slice(&f.scores);
                entry.1.extend_from_slice(&f.labels);
            }
        } else {
            normal_scores.extend_from_slice(&f.scores);
        }
    }

    let mut notes = BTreeMap::new();
    let auc_all = record(roc_auc(&all_scores, &all_labels), "auc_all", &mut notes)?;
    let ap = record(average_precision(&all_scores, &all_labels), "ap", &mut notes)?;
    let far_all = record(far(&all_scores, &all_labels, FAR_THRESHOLD), "far_all", &mut notes)?;
    let (auc_abn, far_abn) = if abn_scores.is_empty() {
        notes.insert("auc_abn".into(), "no abnormal videos".into());
        notes.insert("far_abn".into(), "no abnormal videos".into());
        (None, None)
    } else {
        (
            record(roc_auc(&abn_scores, &abn_labels), "auc_abn", &mut notes)?,
            record(far(&abn_scores, &abn_labels, FAR_THRESHOLD), "far_abn", &mut notes)?,
        )
    };

    let mut class_auc = BTreeMap::new();
    for (class, (scores, labels)) in by_class {
        let mut pooled_scores = scores;
        let mut pooled_labels = labels;
        pooled_scores.extend_from_slice(&normal_scores);
        pooled_labels.extend(std::iter::repeat(0u8).take(normal_scores.len()));
        let auc = record(
            roc_auc(&pooled_scores, &pooled_labels),
            &format!("class_auc.{class}"),
            &mut notes,
        )?;
        class_auc.insert(class, auc);
    }

    Ok(EvalReport {
        auc_all,
        auc_abn,
        ap,
        far_all,
        far_abn,
        class_auc,
        frames_evaluated: all_scores.len(),
        abnormal_video_frames: abn_scores.len(),
        positive_frames: all_labels.iter().filter(|&&y| y == 1).count(),
        notes,
    })
}

/// Everything the inference path needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct InferenceConfig {
    pub fusion: FusionConfig,
    pub l: usize,
    pub smoother: SmootherConfig,
    /// Zero the semantic features before fusion (ablation baseline).
    pub visual_only: bool,
}

/// Snippet scores for one video: resample, fuse, predict, optionally
/// smooth. The prompt dictionary plays no role here.
pub fn score_video(video: &VideoFeatures, params: &MlpParams, cfg: &InferenceConfig) -> Result<Vec<f64>> {
    let resampled = resample_to_l(video, cfg.l)?;
    let semantic = if cfg.visual_only {
        ndarray::Array2::zeros(resampled.semantic.dim())
    } else {
        resampled.semantic.clone()
    };
    let fused = fuse(resampled.visual.view(), semantic.view(), &cfg.fusion)?;
    let scores = forward(&fused, params)?;
    smooth_scores(&scores, &cfg.smoother)
}

/// Score every video and expand to frame level with ground-truth labels.
pub fn frame_scores(
    videos: &[VideoFeatures],
    params: &MlpParams,
    cfg: &InferenceConfig,
    gt: &GroundTruth,
) -> Result<Vec<FrameScores>> {
    videos
        .iter()
        .map(|v| {
            let snippet_scores = score_video(v, params, cfg)?;
            Ok(FrameScores {
                video_id: v.video_id.clone(),
                scores: expand_scores(&snippet_scores, v.frame_count),
                labels: gt.frame_labels(&v.video_id, v.frame_count)?,
                video_label: v.label,
                class_name: v.class_name.clone(),
            })
        })
        .collect()
}

/// The full inference-plus-metrics path.
pub fn evaluate_videos(
    videos: &[VideoFeatures],
    params: &MlpParams,
    cfg: &InferenceConfig,
    gt: &GroundTruth,
) -> Result<EvalReport> {
    evaluate_frames(&frame_scores(videos, params, cfg, gt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// O(n^2) pairwise oracle: P(score_pos > score_neg) + 0.5 P(equal).
    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 1)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 0)
            .map(|(&s, _)| s)
            .collect();
        let mut acc = 0.0;
        for &p in &pos {
            for &q in &neg {
                if p > q {
                    acc += 1.0;
                } else if p == q {
                    acc += 0.5;
                }
            }
        }
        acc / (pos.len() as f64 * neg.len() as f64)
    }

    /// Threshold-sweep oracle for AP: recount TP/FP from scratch at every
    /// unique threshold, descending.
    fn sweep_ap(scores: &[f64], labels: &[u8]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&y| y == 1).count();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &y)| s >= t && y == 1)
                .count();
            let fp = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &y)| s >= t && y == 0)
                .count();
            let recall = tp as f64 / n_pos as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    fn random_instance(rng: &mut ChaCha20Rng, n: usize, levels: usize) -> (Vec<f64>, Vec<u8>) {
        // Quantized scores force plenty of ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0..levels) as f64) / levels as f64)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1) as u8).collect();
        // Ensure both classes.
        labels[0] = 1;
        if n > 1 {
            labels[1] = 0;
        }
        (scores, labels)
    }

    #[test]
    fn auc_perfect_separation_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn auc_all_tied_scores_is_exactly_half() {
        let scores = [0.5; 6];
        let labels = [1, 0, 1, 0, 0, 1];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_rejects_single_class() {
        let err = roc_auc(&[0.1, 0.2], &[1, 1]).unwrap_err();
        assert!(err.to_string().contains("AUC undefined"));
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..40 {
            let n = rng.random_range(2..400);
            let (scores, labels) = random_instance(&mut rng, n, 17);
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = pairwise_auc(&scores, &labels);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ap_perfect_ranking_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn ap_single_positive_at_rank_k() {
        // Positive ranked 3rd of 5 distinct scores -> AP = 1/3.
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5];
        let labels = [0, 0, 1, 0, 0];
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ap_rejects_no_positives() {
        assert!(average_precision(&[0.3, 0.4], &[0, 0]).is_err());
    }

    #[test]
    fn ap_matches_sweep_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..40 {
            let n = rng.random_range(2..400);
            let (scores, labels) = random_instance(&mut rng, n, 11);
            let fast = average_precision(&scores, &labels).unwrap();
            let slow = sweep_ap(&scores, &labels);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn far_hand_examples() {
        assert_eq!(far(&[0.0, 0.0], &[0, 1], FAR_THRESHOLD).unwrap(), 0.0);
        assert_eq!(far(&[1.0, 1.0], &[0, 0], FAR_THRESHOLD).unwrap(), 1.0);
        // scores [0.6, 0.4, 0.7], labels [0, 0, 1]: one of two negatives fires.
        assert_eq!(far(&[0.6, 0.4, 0.7], &[0, 0, 1], FAR_THRESHOLD).unwrap(), 0.5);
        assert!(far(&[0.5], &[1], FAR_THRESHOLD).is_err());
    }

    #[test]
    fn expand_scores_replicates_by_nearest_snippet() {
        // 2 snippets over 6 frames: first 3 frames -> snippet 0.
        assert_eq!(expand_scores(&[0.1, 0.9], 6), vec![0.1, 0.1, 0.1, 0.9, 0.9, 0.9]);
        // More snippets than frames: every frame picks its floor index.
        assert_eq!(expand_scores(&[0.1, 0.2, 0.3, 0.4], 2), vec![0.1, 0.3]);
        // Non-divisible counts.
        assert_eq!(expand_scores(&[0.0, 1.0], 3), vec![0.0, 0.0, 1.0]);
    }

    fn toy_frames(scores_a: Vec<f64>, labels_a: Vec<u8>, scores_n: Vec<f64>) -> Vec<FrameScores> {
        vec![
            FrameScores {
                video_id: "abn".into(),
                scores: scores_a,
                labels: labels_a,
                video_label: 1,
                class_name: Some("event_00".into()),
            },
            FrameScores {
                video_id: "nrm".into(),
                labels: vec![0; scores_n.len()],
                scores: scores_n,
                video_label: 0,
                class_name: None,
            },
        ]
    }

    #[test]
    fn evaluate_frames_oracle_scores_are_perfect() {
        let frames = toy_frames(vec![0.0, 1.0, 1.0, 0.0], vec![0, 1, 1, 0], vec![0.0, 0.0]);
        let report = evaluate_frames(&frames).unwrap();
        assert_eq!(report.auc_all, Some(1.0));
        assert_eq!(report.auc_abn, Some(1.0));
        assert_eq!(report.ap, Some(1.0));
        assert_eq!(report.far_all, Some(0.0));
        assert_eq!(report.far_abn, Some(0.0));
        assert_eq!(report.class_auc["event_00"], Some(1.0));
        assert_eq!(report.frames_evaluated, 6);
        assert_eq!(report.positive_frames, 2);
    }

    #[test]
    fn evaluate_frames_constant_scores_give_exactly_half() {
        let frames = toy_frames(vec![0.5; 4], vec![0, 1, 1, 0], vec![0.5; 3]);
        let report = evaluate_frames(&frames).unwrap();
        assert_eq!(report.auc_all, Some(0.5));
        assert_eq!(report.auc_abn, Some(0.5));
    }

    #[test]
    fn evaluate_frames_reports_degenerate_metrics_without_failing() {
        // Abnormal video whose frames are all positive: auc_abn undefined.
        let frames = toy_frames(vec![0.9, 0.8], vec![1, 1], vec![0.1, 0.2]);
        let report = evaluate_frames(&frames).unwrap();
        assert!(report.auc_all.is_some());
        assert_eq!(report.auc_abn, None);
        assert!(report.notes.contains_key("auc_abn"));
    }

    #[test]
    fn zero_init_model_scores_half_auc() {
        use crate::features::FRAMES_PER_SNIPPET;
        let params = MlpParams::zeros(4);
        let cfg = InferenceConfig {
            fusion: FusionConfig::new(crate::model::FusionMode::Concat, 2, 2).unwrap(),
            l: 4,
            smoother: SmootherConfig::default(),
            visual_only: false,
        };
        let video = |id: &str, label: u8| VideoFeatures {
            video_id: id.into(),
            label,
            class_name: (label == 1).then(|| "event_00".into()),
            visual: ndarray::Array2::from_elem((4, 2), label as f64),
            semantic: ndarray::Array2::from_elem((4, 2), 0.3),
            frame_count: 4 * FRAMES_PER_SNIPPET,
            frames_per_snippet: FRAMES_PER_SNIPPET,
        };
        let videos = vec![video("a", 1), video("n", 0)];
        let mut gt = GroundTruth::default();
        gt.0.insert("a".into(), vec![(0, 32)]);
        gt.0.insert("n".into(), vec![]);
        let report = evaluate_videos(&videos, &params, &cfg, &gt).unwrap();
        assert_eq!(report.auc_all, Some(0.5));
    }

    proptest! {
        /// AUC is invariant under strictly increasing transforms.
        #[test]
        fn auc_invariant_under_monotone_transform(seed in 0u64..300) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (scores, labels) = random_instance(&mut rng, 50, 9);
            let base = roc_auc(&scores, &labels).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|&s| 2.0 * s + 1.0).collect();
            prop_assert!((roc_auc(&transformed, &labels).unwrap() - base).abs() < 1e-12);
            let expd: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
            prop_assert!((roc_auc(&expd, &labels).unwrap() - base).abs() < 1e-12);
        }

        /// Complement symmetry: flipping labels (or negating scores)
        /// complements the AUC.
        #[test]
        fn auc_complement_symmetry(seed in 0u64..300) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (scores, labels) = random_instance(&mut rng, 60, 7);
            let auc = roc_auc(&scores, &labels).unwrap();
            let flipped: Vec<u8> = labels.iter().map(|&y| 1 - y).collect();
            prop_assert!((auc + roc_auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-9);
            let negated: Vec<f64> = scores.iter().map(|&s| -s).collect();
            prop_assert!((auc + roc_auc(&negated, &labels).unwrap() - 1.0).abs() < 1e-9);
        }

        /// FAR is monotone non-increasing in the threshold.
        #[test]
        fn far_monotone_in_threshold(seed in 0u64..300) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (scores, labels) = random_instance(&mut rng, 40, 13);
            let mut prev = f64::INFINITY;
            for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let value = far(&scores, &labels, t).unwrap();
                prop_assert!(value <= prev + 1e-12);
                prev = value;
            }
        }
    }
}
