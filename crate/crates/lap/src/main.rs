//! Thin command-line front end; all logic lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lap::cli;
use lap::config::{seed_from_env, RunConfig};
use lap::features::synth::SyntheticSpec;

#[derive(Parser)]
#[command(
    name = "lap",
    version,
    about = "Weakly supervised video anomaly detection over precomputed snippet features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic planted-anomaly benchmark.
    GenSynth(GenSynthArgs),
    /// Train the score predictor and write log + checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test manifest.
    Eval(EvalArgs),
    /// Run the four-row component ablation grid.
    Ablate(TrainArgs),
    /// Dump snippet/prompt similarity matrices and the match histogram.
    InspectPrompts(InspectArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Defaults to LAP_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_abnormal: Option<usize>,
    #[arg(long)]
    n_normal: Option<usize>,
    #[arg(long)]
    n_abnormal_test: Option<usize>,
    #[arg(long)]
    n_normal_test: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    d_t: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    min_snippets: Option<usize>,
    #[arg(long)]
    max_snippets: Option<usize>,
    #[arg(long)]
    frames_per_snippet: Option<usize>,
    #[arg(long)]
    anomaly_window_frac: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    visual_offset: Option<f64>,
}

impl GenSynthArgs {
    fn spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec::default();
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { spec.$field = v; })*
            };
        }
        set!(
            n_abnormal,
            n_normal,
            n_abnormal_test,
            n_normal_test,
            d_v,
            d_t,
            p,
            min_snippets,
            max_snippets,
            frames_per_snippet,
            anomaly_window_frac,
            noise_sigma,
            visual_offset
        );
        spec
    }
}

/// Flags mirror the config-file keys one-to-one; a flag beats the file.
#[derive(Args)]
struct TrainArgs {
    /// TOML config file with the same keys as the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    dictionary: Option<PathBuf>,
    #[arg(long)]
    dictionary_embeddings: Option<PathBuf>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// "concat" or "add".
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    set_size: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Defaults to LAP_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_cadence: Option<usize>,
    #[arg(long)]
    smoother: Option<bool>,
    #[arg(long)]
    smoother_window: Option<usize>,
    /// "dynamic" or "static".
    #[arg(long)]
    threshold_mode: Option<String>,
    #[arg(long)]
    visual_only: Option<bool>,
}

impl TrainArgs {
    fn resolve(&self) -> lap::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! override_path {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = Some(v.clone()); })*
            };
        }
        override_path!(
            train_manifest,
            test_manifest,
            dictionary,
            dictionary_embeddings,
            ground_truth,
            out_dir
        );
        if let Some(v) = &self.fusion {
            cfg.fusion = v.parse()?;
        }
        if let Some(v) = &self.threshold_mode {
            cfg.threshold_mode = v.parse()?;
        }
        macro_rules! override_value {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        override_value!(k, alpha, beta, gamma, tau, b, l, epochs, eval_cadence, smoother, smoother_window, visual_only);
        if let Some(v) = self.set_size {
            cfg.set_size = Some(v);
        }
        if let Some(v) = self.seed {
            cfg.seed = Some(v);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one row per frame: video_id, frame_index, score, label.
    #[arg(long)]
    per_frame_csv: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    dictionary: PathBuf,
    #[arg(long)]
    dictionary_embeddings: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    l: usize,
    /// Also dump similarity matrices for normal videos.
    #[arg(long, default_value_t = false)]
    include_normal: bool,
}

fn run() -> lap::Result<()> {
    match Cli::parse().command {
        Command::GenSynth(args) => {
            let seed = args.seed.or_else(seed_from_env).unwrap_or(0);
            let spec = args.spec();
            cli::cmd_gen_synth(&args.out_dir, seed, &spec)?;
            println!(
                "wrote synthetic dataset (seed {seed}, {} train / {} test videos) to {}",
                spec.n_abnormal + spec.n_normal,
                spec.n_abnormal_test + spec.n_normal_test,
                args.out_dir.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let summary = cli::cmd_train(&cfg)?;
            println!("{}", summary.line());
        }
        Command::Eval(args) => {
            let report = cli::cmd_eval(&cli::EvalArgs {
                checkpoint: args.checkpoint,
                manifest: args.manifest,
                ground_truth: args.ground_truth,
                out: args.out,
                per_frame_csv: args.per_frame_csv,
            })?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
        }
        Command::Ablate(args) => {
            let cfg = args.resolve()?;
            let rows = cli::cmd_ablate(&cfg)?;
            println!("config,auc_all,auc_abn,ap");
            for row in rows {
                println!(
                    "{},{},{},{}",
                    row.name,
                    row.auc_all.map(|v| v.to_string()).unwrap_or_default(),
                    row.auc_abn.map(|v| v.to_string()).unwrap_or_default(),
                    row.ap.map(|v| v.to_string()).unwrap_or_default()
                );
            }
        }
        Command::InspectPrompts(args) => {
            let summary = cli::cmd_inspect_prompts(&cli::InspectArgs {
                manifest: args.manifest,
                dictionary: args.dictionary,
                dictionary_embeddings: args.dictionary_embeddings,
                out_dir: args.out_dir,
                l: args.l,
                include_normal: args.include_normal,
            })?;
            println!(
                "dumped {} similarity matrices ({} abnormal snippets) to {}",
                summary.videos_dumped,
                summary.abnormal_snippets,
                summary.out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
