//! Command-line front end for the training and evaluation pipeline.
//!
//! One verb per pipeline stage, each writing into its own output directory:
//! the resolved config, a `run.json` with seed and checkpoint format
//! version, the stage checkpoint, and a line-delimited step log. Exit codes
//! mirror the error taxonomy: 0 success, 2 config, 3 data, 4 checkpoint
//! incompatibility, 5 runtime.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vidadapt::backbone::{apply_freeze_policy, trainability_report, FreezePolicy, Model};
use vidadapt::checkpoint::{load_checkpoint, CHECKPOINT_FORMAT_VERSION};
use vidadapt::config::{parse_config, render_config, HeadChoice, RunConfig};
use vidadapt::data::{
    generate_synthetic_dataset, write_then_rename, Dataset, DomainStyle, Motif, SplitTag, SynthDatasetConfig,
};
use vidadapt::error::{Error, Result};
use vidadapt::metrics::{comparison_report, evaluate_model, EvalConfig, RunSummary};
use vidadapt::trainer::{
    run_continual_pretrain, run_finetune, run_pretrain_general, write_metrics_log, StageResult,
};

#[derive(Parser)]
#[command(
    name = "vidadapt",
    about = "Continual pretraining and score assessment for small 3D-CNN video models",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.epochs=2 (repeatable,
    /// applied after the file; includes `seed`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic scored-video dataset with a manifest.
    GenData {
        /// Output directory for manifest.csv and videos/.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        videos: usize,
        /// Rendering style: "general" or "target" (shifted appearance).
        #[arg(long, default_value = "target")]
        domain: String,
        /// Shortest video length in frames (lengths vary upward from here).
        #[arg(long, default_value_t = 48)]
        frames: usize,
        /// Square frame edge in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Motion motifs, comma-separated: translation, oscillator.
        #[arg(long, default_value = "translation,oscillator")]
        motifs: String,
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        /// Subjects held out as the test split.
        #[arg(long, default_value_t = 2)]
        test_subjects: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Supervised pretraining of the bare backbone on a general dataset.
    PretrainGeneral {
        #[command(flatten)]
        config: ConfigArgs,
        /// Manifest of the general-domain dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised adapter training on unlabeled target-domain videos.
    ContinualPretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Manifest of the target-domain dataset (labels are ignored).
        #[arg(long)]
        data: PathBuf,
        /// Full checkpoint from pretrain-general.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning of the scoring head (and, by default, everything else).
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Full checkpoint from pretrain-general.
        #[arg(long)]
        base: PathBuf,
        /// Trainable-only checkpoint from continual-pretrain to lay on top.
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split with a fine-tuned checkpoint and write EvalResult JSON.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Full checkpoint from finetune.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which videos to score: test, train or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Exemplar pool for the pairwise head: train or all.
        #[arg(long, default_value = "train")]
        exemplar_split: String,
        /// Run label recorded in summary.json.
        #[arg(long, default_value = "run")]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge evaluate summaries into a comparison table.
    Report {
        /// summary.json files from evaluate runs (repeatable).
        #[arg(long = "summary", value_name = "FILE", required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, videos, domain, frames, size, motifs, subjects, test_subjects, noise, seed } => {
            gen_data(&out, videos, &domain, frames, size, &motifs, subjects, test_subjects, noise, seed)
        }
        Cmd::PretrainGeneral { config, data, out } => {
            let cfg = load_config(&config)?;
            let ds = Dataset::load(&data)?;
            let result = run_pretrain_general(&cfg, &ds, &out)?;
            finish_stage(&out, &cfg, "pretrain_general", &result)
        }
        Cmd::ContinualPretrain { config, data, base, out } => {
            let cfg = load_config(&config)?;
            let ds = Dataset::load(&data)?;
            let result = run_continual_pretrain(&cfg, &ds, &base, &out)?;
            finish_stage(&out, &cfg, "continual_pretrain", &result)
        }
        Cmd::Finetune { config, data, base, overlay, out } => {
            let cfg = load_config(&config)?;
            let ds = Dataset::load(&data)?;
            let tagged = ds.indices_with_tag(SplitTag::Train);
            let train_indices: Vec<usize> = if tagged.is_empty() { (0..ds.len()).collect() } else { tagged };
            let result = run_finetune(&cfg, &ds, &train_indices, &base, overlay.as_deref(), &out)?;
            finish_stage(&out, &cfg, "finetune", &result)
        }
        Cmd::Evaluate { config, data, checkpoint, split, exemplar_split, label, out } => {
            evaluate(&config, &data, &checkpoint, &split, &exemplar_split, &label, &out)
        }
        Cmd::Report { summaries, out } => report(&summaries, &out),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    parse_config(args.config.as_deref(), &args.overrides)
}

/// Write the provenance files that make a run directory replayable.
fn write_provenance(out: &Path, cfg: &RunConfig, stage: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_then_rename(&out.join("config.txt"), render_config(cfg).as_bytes())?;
    let run = serde_json::json!({
        "stage": stage,
        "seed": cfg.seed,
        "checkpoint_format_version": CHECKPOINT_FORMAT_VERSION,
    });
    write_then_rename(&out.join("run.json"), format!("{run:#}\n").as_bytes())
}

fn finish_stage(out: &Path, cfg: &RunConfig, stage: &str, result: &StageResult) -> Result<()> {
    write_provenance(out, cfg, stage)?;
    write_metrics_log(&out.join("metrics.jsonl"), &result.records)?;
    let last = result.records.last().map(|r| r.loss);
    match last {
        Some(loss) => println!("{stage}: {} steps, final loss {loss:.6}, wrote {}", result.records.len(), result.checkpoint_path.display()),
        None => println!("{stage}: no steps run, wrote {}", result.checkpoint_path.display()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: &Path,
    videos: usize,
    domain: &str,
    frames: usize,
    size: usize,
    motifs: &str,
    subjects: usize,
    test_subjects: usize,
    noise: f64,
    seed: u64,
) -> Result<()> {
    let domain = match domain {
        "general" => DomainStyle::General,
        "target" => DomainStyle::Target,
        other => return Err(Error::config(format!("unknown domain {other:?} (expected general or target)"))),
    };
    let motifs: Vec<Motif> = motifs
        .split(',')
        .map(|m| match m.trim() {
            "translation" => Ok(Motif::Translation),
            "oscillator" => Ok(Motif::Oscillator),
            other => Err(Error::config(format!("unknown motif {other:?} (expected translation or oscillator)"))),
        })
        .collect::<Result<_>>()?;
    let cfg = SynthDatasetConfig {
        num_videos: videos,
        frames,
        size,
        motifs,
        noise_level: noise,
        domain,
        num_subjects: subjects,
        test_subjects,
        rate_range: None,
    };
    let records = generate_synthetic_dataset(&cfg, seed, out)?;
    let gen = serde_json::json!({
        "seed": seed,
        "num_videos": records.len(),
        "frames": frames,
        "size": size,
        "domain": match domain { DomainStyle::General => "general", DomainStyle::Target => "target" },
        "subjects": subjects,
        "test_subjects": test_subjects,
        "noise": noise,
    });
    write_then_rename(&out.join("gen.json"), format!("{gen:#}\n").as_bytes())?;
    println!("gen-data: wrote {} videos under {}", records.len(), out.display());
    Ok(())
}

fn pick_indices(ds: &Dataset, which: &str, role: &str) -> Result<Vec<usize>> {
    let indices = match which {
        "all" => (0..ds.len()).collect(),
        "train" => ds.indices_with_tag(SplitTag::Train),
        "test" => ds.indices_with_tag(SplitTag::Test),
        other => return Err(Error::config(format!("unknown {role} split {other:?} (expected test, train or all)"))),
    };
    if indices.is_empty() {
        return Err(Error::data(format!("manifest has no videos in the {which:?} split for {role}")));
    }
    Ok(indices)
}

fn evaluate(
    config: &ConfigArgs,
    data: &Path,
    checkpoint: &Path,
    split: &str,
    exemplar_split: &str,
    label: &str,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = Dataset::load(data)?;
    let mut model = Model::build(&cfg.backbone, Some(cfg.adapter_init), cfg.finetune_head_kind(), cfg.seed)?;
    load_checkpoint(checkpoint, &mut model)?;

    let eval_indices = pick_indices(&ds, split, "evaluation")?;
    let exemplar_indices = match cfg.head {
        HeadChoice::Pairwise => pick_indices(&ds, exemplar_split, "exemplars")?,
        HeadChoice::Distribution { .. } => Vec::new(),
    };
    let eval_cfg = EvalConfig {
        clip_len: cfg.clip_len,
        crop: cfg.crop,
        support: cfg.support()?,
        max_exemplars: cfg.max_exemplars,
    };
    let result = evaluate_model(&mut model, &ds, &eval_indices, &exemplar_indices, &eval_cfg)?;

    // Trainability is reported for the fine-tuning regime this config implies.
    apply_freeze_policy(&mut model, &FreezePolicy::new(cfg.finetune_mode));
    let t = trainability_report(&mut model);
    let summary = RunSummary {
        label: label.to_string(),
        trainable_params: t.trainable_params,
        total_params: t.total_params,
        epochs: cfg.epochs,
        checkpoint_bytes: std::fs::metadata(checkpoint)?.len(),
        eval: result.clone(),
    };

    write_provenance(out, &cfg, "evaluate")?;
    write_then_rename(
        &out.join("eval.json"),
        format!("{:#}\n", serde_json::to_value(&result).expect("eval serializes")).as_bytes(),
    )?;
    write_then_rename(
        &out.join("summary.json"),
        format!("{:#}\n", serde_json::to_value(&summary).expect("summary serializes")).as_bytes(),
    )?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    println!("evaluate: {} videos, average Spearman {:.2}", eval_indices.len(), result.average);
    Ok(())
}

fn report(summaries: &[PathBuf], out: &Path) -> Result<()> {
    let mut runs = Vec::with_capacity(summaries.len());
    for path in summaries {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read summary {}: {e}", path.display())))?;
        let run: RunSummary = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{} is not an evaluate summary: {e}", path.display())))?;
        runs.push(run);
    }
    let rep = comparison_report(&runs)?;
    std::fs::create_dir_all(out)?;
    write_then_rename(&out.join("report.txt"), rep.table.as_bytes())?;
    write_then_rename(&out.join("report.jsonl"), rep.jsonl.as_bytes())?;
    print!("{}", rep.table);
    Ok(())
}
