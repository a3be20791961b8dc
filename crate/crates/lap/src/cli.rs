//! Command implementations behind the `lap` binary. Each command validates
//! all of its inputs before creating any output, and writes every artifact
//! atomically, so a failing invocation leaves no partial directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{LapError, Result};
use crate::features::synth::{write_dataset, SyntheticSpec};
use crate::features::{DatasetManifest, GroundTruth, Split, VideoFeatures};
use crate::ioutil::{atomic_write, ensure_dir};
use crate::metrics::{evaluate_videos, frame_scores, EvalReport, InferenceConfig};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, HIDDEN1, HIDDEN2};
use crate::optim::{train, EpochRow, TrainOutcome};
use crate::prompts::{anomaly_matrix, anomaly_vector, prompt_distribution, PromptDictionary};

pub const LOG_CSV: &str = "log.csv";
pub const BEST_CHECKPOINT: &str = "best.lapc";
pub const LAST_CHECKPOINT: &str = "last.lapc";
pub const CONFIG_ECHO: &str = "config.toml";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const HISTOGRAM_CSV: &str = "histogram.csv";

/// Generate the synthetic benchmark into `out_dir`.
pub fn cmd_gen_synth(out_dir: &Path, seed: u64, spec: &SyntheticSpec) -> Result<()> {
    write_dataset(out_dir, seed, spec)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn log_csv_text(log: &[EpochRow]) -> String {
    let mut out = String::from("epoch,step,l_mil,l_mpl,l_pal,l_lap,auc_all,auc_abn,ap,far_all,far_abn\n");
    for row in log {
        let (auc_all, auc_abn, ap, far_all, far_abn) = match &row.eval {
            Some(e) => (e.auc_all, e.auc_abn, e.ap, e.far_all, e.far_abn),
            None => (None, None, None, None, None),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.epoch,
            row.step,
            row.l_mil,
            row.l_mpl,
            row.l_pal,
            row.l_lap,
            fmt_opt(auc_all),
            fmt_opt(auc_abn),
            fmt_opt(ap),
            fmt_opt(far_all),
            fmt_opt(far_abn),
        )
        .unwrap();
    }
    out
}

struct LoadedData {
    train_videos: Vec<VideoFeatures>,
    test: Option<(Vec<VideoFeatures>, GroundTruth)>,
    dict: PromptDictionary,
}

fn load_training_inputs(cfg: &RunConfig) -> Result<LoadedData> {
    let train_path = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| LapError::invalid("train_manifest is required"))?;
    let dict_path = cfg
        .dictionary
        .as_ref()
        .ok_or_else(|| LapError::invalid("dictionary is required"))?;
    let emb_path = cfg
        .dictionary_embeddings
        .as_ref()
        .ok_or_else(|| LapError::invalid("dictionary_embeddings is required"))?;

    let train_manifest = DatasetManifest::load(train_path, Split::Train)?;
    let train_videos = train_manifest.load_all()?;
    let dict = PromptDictionary::load(dict_path, emb_path)?;

    let test = match (&cfg.test_manifest, &cfg.ground_truth) {
        (Some(manifest), Some(gt)) => {
            let test_manifest = DatasetManifest::load(manifest, Split::Test)?;
            Some((test_manifest.load_all()?, GroundTruth::load(gt)?))
        }
        (Some(_), None) | (None, Some(_)) => {
            return Err(LapError::invalid(
                "test_manifest and ground_truth must be given together",
            ))
        }
        (None, None) => None,
    };
    Ok(LoadedData {
        train_videos,
        test,
        dict,
    })
}

fn run_training(cfg: &RunConfig, data: &LoadedData) -> Result<TrainOutcome> {
    let train_cfg = cfg.train_config(data.dict.p());
    let test_ref = data.test.as_ref().map(|(v, g)| (v.as_slice(), g));
    train(&data.train_videos, test_ref, &data.dict, &train_cfg)
}

fn checkpoint_meta(cfg: &RunConfig, outcome: &TrainOutcome) -> CheckpointMeta {
    CheckpointMeta {
        fusion: outcome.fusion,
        d_f: outcome.fusion.d_f(),
        hidden: [HIDDEN1, HIDDEN2],
        l: cfg.l,
        smoother: crate::model::SmootherConfig {
            enabled: cfg.smoother,
            window: cfg.smoother_window,
        },
        visual_only: cfg.visual_only,
    }
}

/// Result of `lap train`: where the artifacts went and the headline
/// numbers.
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub steps: u64,
    pub final_eval: Option<EvalReport>,
    pub best_epoch: usize,
    pub best_auc: Option<f64>,
}

impl TrainSummary {
    /// One line suitable for stdout.
    pub fn line(&self) -> String {
        let final_metrics = match &self.final_eval {
            Some(e) => format!(
                "final auc_all={} auc_abn={} ap={} far_all={} far_abn={}",
                fmt_opt(e.auc_all),
                fmt_opt(e.auc_abn),
                fmt_opt(e.ap),
                fmt_opt(e.far_all),
                fmt_opt(e.far_abn)
            ),
            None => "no test split evaluated".to_string(),
        };
        format!(
            "trained {} epochs ({} steps); {}; best auc_all={} at epoch {}; artifacts in {}",
            self.epochs,
            self.steps,
            final_metrics,
            fmt_opt(self.best_auc),
            self.best_epoch,
            self.out_dir.display()
        )
    }
}

/// Train, then write the log, both checkpoints, and the effective config.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| LapError::invalid("out_dir is required"))?;
    let data = load_training_inputs(cfg)?;
    let outcome = run_training(cfg, &data)?;

    ensure_dir(&out_dir)?;
    atomic_write(&out_dir.join(LOG_CSV), log_csv_text(&outcome.log).as_bytes())?;
    let meta = checkpoint_meta(cfg, &outcome);
    save_checkpoint(&out_dir.join(BEST_CHECKPOINT), &outcome.best_params, &meta)?;
    save_checkpoint(&out_dir.join(LAST_CHECKPOINT), &outcome.final_params, &meta)?;
    atomic_write(&out_dir.join(CONFIG_ECHO), cfg.effective_toml()?.as_bytes())?;

    let last_row = outcome.log.last().expect("epochs >= 1");
    Ok(TrainSummary {
        out_dir,
        epochs: cfg.epochs,
        steps: last_row.step,
        final_eval: last_row.eval.clone(),
        best_epoch: outcome.best_epoch,
        best_auc: outcome.best_auc,
    })
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub ground_truth: PathBuf,
    /// Where to write the JSON report (also returned for stdout).
    pub out: Option<PathBuf>,
    pub per_frame_csv: Option<PathBuf>,
}

/// Score a test manifest with a checkpoint and bundle the frame-level
/// metrics.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let (params, meta) = load_checkpoint(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest, Split::Test)?;
    let expected = meta.fusion;
    if manifest.d_v != expected.d_v || manifest.d_t != expected.d_t {
        let data_fusion = crate::model::FusionConfig::new(expected.mode, manifest.d_v, manifest.d_t)
            .map(|f| f.d_f())
            .unwrap_or(manifest.d_v + manifest.d_t);
        return Err(LapError::invalid(format!(
            "checkpoint expects d_v={} d_t={} (d_f={}), data has d_v={} d_t={} (d_f={})",
            expected.d_v,
            expected.d_t,
            meta.d_f,
            manifest.d_v,
            manifest.d_t,
            data_fusion,
        )));
    }
    let videos = manifest.load_all()?;
    let gt = GroundTruth::load(&args.ground_truth)?;
    let inference = InferenceConfig {
        fusion: meta.fusion,
        l: meta.l,
        smoother: meta.smoother,
        visual_only: meta.visual_only,
    };

    let report = evaluate_videos(&videos, &params, &inference, &gt)?;

    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| LapError::invalid(format!("serializing report: {e}")))?;
        atomic_write(out, json.as_bytes())?;
    }
    if let Some(csv_path) = &args.per_frame_csv {
        let frames = frame_scores(&videos, &params, &inference, &gt)?;
        let mut out = String::from("video_id,frame_index,score,label\n");
        for f in &frames {
            for (i, (&score, &label)) in f.scores.iter().zip(f.labels.iter()).enumerate() {
                writeln!(out, "{},{},{},{}", f.video_id, i, score, label).unwrap();
            }
        }
        atomic_write(csv_path, out.as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub auc_all: Option<f64>,
    pub auc_abn: Option<f64>,
    pub ap: Option<f64>,
}

/// The four-configuration grid: visual-only MIL baseline, plus feature
/// synthesis, plus the triplet term, plus pseudo labels. All rows share the
/// seed, so the data order and initialization are identical and differences
/// are attributable to the toggled terms alone.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| LapError::invalid("out_dir is required"))?;
    if cfg.test_manifest.is_none() || cfg.ground_truth.is_none() {
        return Err(LapError::invalid(
            "ablation requires test_manifest and ground_truth",
        ));
    }
    let data = load_training_inputs(cfg)?;

    let variants: [(&'static str, bool, f64, f64); 4] = [
        ("baseline", true, 0.0, 0.0),
        ("fs", false, 0.0, 0.0),
        ("fs_mpl", false, cfg.beta, 0.0),
        ("fs_mpl_pal", false, cfg.beta, cfg.gamma),
    ];

    let mut rows = Vec::with_capacity(variants.len());
    for (name, visual_only, beta, gamma) in variants {
        let mut variant_cfg = cfg.clone();
        variant_cfg.seed = Some(cfg.resolve_seed());
        variant_cfg.visual_only = visual_only;
        variant_cfg.beta = beta;
        variant_cfg.gamma = gamma;
        let outcome = run_training(&variant_cfg, &data)?;
        let best_eval = outcome
            .log
            .iter()
            .find(|row| row.epoch == outcome.best_epoch)
            .and_then(|row| row.eval.clone())
            .ok_or_else(|| LapError::invalid("ablation run produced no evaluation"))?;
        rows.push(AblationRow {
            name,
            auc_all: best_eval.auc_all,
            auc_abn: best_eval.auc_abn,
            ap: best_eval.ap,
        });
    }

    ensure_dir(&out_dir)?;
    let mut csv = String::from("config,auc_all,auc_abn,ap\n");
    for row in &rows {
        writeln!(
            csv,
            "{},{},{},{}",
            row.name,
            fmt_opt(row.auc_all),
            fmt_opt(row.auc_abn),
            fmt_opt(row.ap)
        )
        .unwrap();
    }
    atomic_write(&out_dir.join(ABLATION_CSV), csv.as_bytes())?;
    atomic_write(&out_dir.join(CONFIG_ECHO), cfg.effective_toml()?.as_bytes())?;
    Ok(rows)
}

pub struct InspectArgs {
    pub manifest: PathBuf,
    pub dictionary: PathBuf,
    pub dictionary_embeddings: PathBuf,
    pub out_dir: PathBuf,
    /// Snippets per video for the similarity dumps.
    pub l: usize,
    /// Also dump similarity matrices for normal videos.
    pub include_normal: bool,
}

pub struct InspectSummary {
    pub out_dir: PathBuf,
    pub videos_dumped: usize,
    pub abnormal_snippets: usize,
}

fn csv_quote(text: &str) -> String {
    format!("\"{}\"", text.replace('"', "\"\""))
}

/// Dump each video's snippet-by-prompt similarity matrix and the
/// best-prompt histogram over abnormal snippets.
pub fn cmd_inspect_prompts(args: &InspectArgs) -> Result<InspectSummary> {
    if args.l == 0 {
        return Err(LapError::invalid("l must be positive"));
    }
    let manifest = DatasetManifest::load(&args.manifest, Split::Train)?;
    let dict = PromptDictionary::load(&args.dictionary, &args.dictionary_embeddings)?;
    if manifest.d_t != dict.d_t() {
        return Err(LapError::dims(
            "dictionary d_t vs manifest semantic features",
            manifest.d_t,
            dict.d_t(),
        ));
    }
    let videos = manifest.load_all()?;

    // Compute everything before writing anything.
    let mut dumps: Vec<(String, String)> = Vec::new();
    let mut best_all: Vec<usize> = Vec::new();
    let mut abnormal_snippets = 0usize;
    for video in &videos {
        if video.label == 0 && !args.include_normal {
            continue;
        }
        let resampled = crate::features::resample_to_l(video, args.l)?;
        let psi = anomaly_matrix(resampled.semantic.view(), &dict)?;
        let mut csv = (0..dict.p())
            .map(|j| format!("prompt_{j}"))
            .collect::<Vec<_>>()
            .join(",");
        csv.push('\n');
        for row in psi.rows() {
            let line = row.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            csv.push_str(&line);
            csv.push('\n');
        }
        dumps.push((format!("psi_{}.csv", video.video_id), csv));

        if video.label == 1 {
            let (_, best) = anomaly_vector(&psi)?;
            abnormal_snippets += best.len();
            best_all.extend(best);
        }
    }
    if best_all.is_empty() {
        return Err(LapError::invalid("manifest contains no abnormal videos"));
    }
    let histogram = prompt_distribution(&best_all, &dict)?;

    ensure_dir(&args.out_dir)?;
    for (name, content) in &dumps {
        atomic_write(&args.out_dir.join(name), content.as_bytes())?;
    }
    let mut csv = String::from("prompt_index,count,prompt_text\n");
    for entry in &histogram {
        writeln!(csv, "{},{},{}", entry.prompt, entry.count, csv_quote(&entry.text)).unwrap();
    }
    atomic_write(&args.out_dir.join(HISTOGRAM_CSV), csv.as_bytes())?;

    Ok(InspectSummary {
        out_dir: args.out_dir.clone(),
        videos_dumped: dumps.len(),
        abnormal_snippets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_csv_has_expected_shape() {
        let report = EvalReport {
            auc_all: Some(0.9),
            auc_abn: Some(0.8),
            ap: Some(0.7),
            far_all: Some(0.1),
            far_abn: None,
            class_auc: Default::default(),
            frames_evaluated: 10,
            abnormal_video_frames: 5,
            positive_frames: 3,
            notes: Default::default(),
        };
        let log = vec![
            EpochRow {
                epoch: 1,
                step: 2,
                l_mil: 1.5,
                l_mpl: 0.5,
                l_pal: 2.0,
                l_lap: 1.552,
                eval: None,
            },
            EpochRow {
                epoch: 2,
                step: 4,
                l_mil: 1.0,
                l_mpl: 0.25,
                l_pal: 1.5,
                l_lap: 1.0265,
                eval: Some(report),
            },
        ];
        let text = log_csv_text(&log);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "epoch,step,l_mil,l_mpl,l_pal,l_lap,auc_all,auc_abn,ap,far_all,far_abn"
        );
        assert!(lines[1].ends_with(",,,,,"));
        assert!(lines[2].contains("0.9"));
        // far_abn was degenerate: trailing empty cell.
        assert!(lines[2].ends_with("0.1,"));
    }

    #[test]
    fn csv_quoting_escapes_embedded_quotes() {
        assert_eq!(csv_quote("plain"), "\"plain\"");
        assert_eq!(csv_quote("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
