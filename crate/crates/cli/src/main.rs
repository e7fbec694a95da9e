use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use spectra_core::corpus::{build_samples, generate_synthetic, load_corpus, write_shards, Dialog, SyntheticConfig};
use spectra_core::encoders::export_attention;
use spectra_core::finetune::{load_task, make_crossmodal_task, resolve_task, save_task, Finetuner, TaskSpec};
use spectra_core::model::SpeechInput;
use spectra_core::speech::{estimate_mask_rate, SpanMaskConfig};
use spectra_core::text::{tokenize_sample, Vocab, WhitespaceTokenizer};
use spectra_core::train::{
    evaluate_pretrain, truncate_metrics, Checkpoint, MetricsWriter, PretrainData, TrainConfig, Trainer,
};
use spectra_numerics::Graph;

#[derive(Parser)]
#[command(name = "spectra", version, about = "Speech-text dialog pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Masker {
    Spectra,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Classification,
    Regression,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aligned corpus and write it as shards.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        dialogs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON generator settings; omitted keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pre-train on a sharded corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Path to the corpus manifest.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint; the output directory's metrics
        /// are cut back to the checkpoint's step.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune on a downstream task.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Task records (JSON lines).
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Classification)]
        kind: Kind,
        /// Number of classes (ignored for regression).
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Pre-trained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Replace speech by Gaussian noise of this standard deviation.
        #[arg(long)]
        speech_noise: Option<f64>,
        /// Task records scored after training.
        #[arg(long)]
        eval_task: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: pre-training metrics, or the task metric of a
    /// fine-tuned model on `--task`.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        speech_noise: Option<f64>,
        #[arg(long, default_value_t = 4)]
        crs_draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo estimate of the fraction of masked frames.
    SimulateMasking {
        #[arg(long, default_value_t = 99)]
        length: usize,
        #[arg(long, default_value_t = 1_000_000)]
        trials: u64,
        #[arg(long, value_enum, default_value_t = Masker::Spectra)]
        masker: Masker,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write fusion-layer attention maps for one sample.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dialog: String,
        /// 1-based index of the current turn (at least 2).
        #[arg(long)]
        turn: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a cross-modal topic task from a synthetic corpus.
    MakeTask {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const SYNTHETIC_FILE: &str = "synthetic.json";

fn read_synthetic(path: &Path) -> Result<SyntheticConfig> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn load_dialogs(manifest: &Path) -> Result<Vec<Dialog>> {
    Ok(load_corpus(manifest)?.dialogs)
}

fn threads() -> usize {
    std::env::var("SPECTRA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn noise(std: Option<f64>, seed: u64) -> Option<(f64, u64)> {
    std.map(|s| (s, seed ^ 0x5EED))
}

fn generate(out: &Path, dialogs: usize, seed: u64, config: Option<&Path>) -> Result<()> {
    let mut cfg: SyntheticConfig = match config {
        Some(p) => read_synthetic(p)?,
        None => SyntheticConfig::default(),
    };
    cfg.num_dialogs = dialogs;
    let corpus = generate_synthetic(&cfg, seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = write_shards(&corpus, &out.join("manifest.json"), cfg.max_turn_seconds)?;
    std::fs::write(out.join(SYNTHETIC_FILE), serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "wrote {} dialogs in {} shards to {}",
        manifest.dialogs.len(),
        manifest.shards.len(),
        out.display()
    );
    Ok(())
}

fn pretrain(config: Option<&Path>, corpus: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let dialogs = load_dialogs(corpus)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            truncate_metrics(&out.join("metrics.jsonl"), ckpt.step)?;
            Trainer::from_checkpoint(&ckpt)?
        }
        None => {
            let cfg = load_config(config)?;
            Trainer::new(cfg, Vocab::from_dialogs(&dialogs))?
        }
    };
    let data = PretrainData::new(&dialogs, &trainer.config)?;
    eprintln!(
        "pre-training on {} samples from {} dialogs, steps {}..{}",
        data.samples.len(),
        data.dialogs.len(),
        trainer.step,
        trainer.config.steps
    );
    trainer.run(&data, Some(out), |m| {
        if m.step % 10 == 0 || m.step == 1 {
            eprintln!("step {:>6} loss {:.4} lr {:.2e} |g| {:.3}", m.step, m.loss, m.lr, m.grad_norm);
        }
    })?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finetune(
    config: Option<&Path>,
    corpus: &Path,
    task: &Path,
    spec: TaskSpec,
    init: Option<&Path>,
    out: &Path,
    speech_noise: Option<f64>,
    eval_task: Option<&Path>,
) -> Result<()> {
    let dialogs = load_dialogs(corpus)?;
    let cfg = load_config(config)?;
    let seed = cfg.seed;
    let examples = resolve_task(&load_task(task)?, &dialogs, noise(speech_noise, seed))?;
    let init = init.map(Checkpoint::load).transpose()?;
    let mut f = Finetuner::new(cfg, spec, Vocab::from_dialogs(&dialogs), init.as_ref())?;
    std::fs::create_dir_all(out)?;
    let mut writer = MetricsWriter::append(&out.join("metrics.jsonl"))?;
    while f.step < f.config.steps {
        let m = f.train_step(&examples)?;
        writer.write(&m)?;
        if m.step % 10 == 0 {
            eprintln!("step {:>6} loss {:.4}", m.step, m.loss);
        }
    }
    f.checkpoint().save(&out.join("finetuned.json"))?;
    if let Some(p) = eval_task {
        let held_out = resolve_task(&load_task(p)?, &dialogs, noise(speech_noise, seed.wrapping_add(1)))?;
        println!("{}", serde_json::json!({ "metric": f.evaluate(&held_out)? }));
    }
    Ok(())
}

fn evaluate(
    checkpoint: &Path,
    corpus: &Path,
    task: Option<&Path>,
    speech_noise: Option<f64>,
    crs_draws: usize,
    seed: u64,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dialogs = load_dialogs(corpus)?;
    if ckpt.task.is_some() {
        let Some(task) = task else { bail!("a fine-tuned checkpoint needs --task") };
        let f = Finetuner::from_checkpoint(&ckpt)?;
        let examples = resolve_task(&load_task(task)?, &dialogs, noise(speech_noise, seed))?;
        println!("{}", serde_json::json!({ "metric": f.evaluate(&examples)?, "examples": examples.len() }));
    } else {
        let t = Trainer::from_checkpoint(&ckpt)?;
        let data = PretrainData::new(&dialogs, &t.config)?;
        let probs = t.config.objective.crs.class_probs;
        let draws = if t.config.objective.crs.enabled { crs_draws } else { 0 };
        let ev = evaluate_pretrain(&t.model, &t.store, &t.vocab, &data, &probs, draws, seed)?;
        println!("{}", serde_json::to_string(&ev)?);
    }
    Ok(())
}

fn simulate_masking(length: usize, trials: u64, masker: Masker, seed: u64) -> Result<()> {
    let cfg = match masker {
        Masker::Spectra => SpanMaskConfig::spectra(),
        Masker::Baseline => SpanMaskConfig::baseline(),
    };
    let started = std::time::Instant::now();
    let est = estimate_mask_rate(&cfg, length, trials, seed, threads())?;
    println!(
        "{}",
        serde_json::json!({
            "masker": match masker { Masker::Spectra => "spectra", Masker::Baseline => "baseline" },
            "length": length,
            "trials": est.trials,
            "mean": est.mean,
            "stderr": est.stderr,
            "seconds": started.elapsed().as_secs_f64(),
        })
    );
    Ok(())
}

fn export(checkpoint: &Path, corpus: &Path, dialog: &str, turn: usize, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dialogs = load_dialogs(corpus)?;
    let d = dialogs
        .iter()
        .find(|d| d.dialog_id == dialog)
        .with_context(|| format!("no dialog {dialog} in the corpus"))?;
    let sample = build_samples(d, ckpt.config.k)?
        .into_iter()
        .find(|s| s.target_turn_index == turn)
        .with_context(|| format!("dialog {dialog} has no sample for turn {turn}"))?;
    let (model, store, vocab) = if ckpt.task.is_some() {
        let f = Finetuner::from_checkpoint(&ckpt)?;
        (f.model, f.store, f.vocab)
    } else {
        let t = Trainer::from_checkpoint(&ckpt)?;
        (t.model, t.store, t.vocab)
    };
    let t = tokenize_sample(&sample, &vocab, &WhitespaceTokenizer, model.config.max_text_len)?;
    let mut g = Graph::new();
    let speech = SpeechInput {
        prev: &sample.speech_prev,
        cur: &sample.speech_cur,
    };
    let fwd = model.forward(&mut g, &store, &t, &t.token_ids, speech, None, None)?;
    let meta = export_attention(&g, &fwd.fused, out)?;
    println!("{}", serde_json::to_string(&meta)?);
    Ok(())
}

fn make_task(corpus: &Path, out: &Path, n: usize, seed: u64) -> Result<()> {
    let dialogs = load_dialogs(corpus)?;
    let syn_path = corpus.parent().unwrap_or(Path::new(".")).join(SYNTHETIC_FILE);
    let syn: SyntheticConfig = if syn_path.exists() { read_synthetic(&syn_path)? } else { SyntheticConfig::default() };
    let records = make_crossmodal_task(&dialogs, &syn, n, seed)?;
    save_task(&records, out)?;
    println!("wrote {} task records to {}", records.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { out, dialogs, seed, config } => generate(&out, dialogs, seed, config.as_deref()),
        Command::Pretrain { config, corpus, out, resume } => pretrain(config.as_deref(), &corpus, &out, resume.as_deref()),
        Command::Finetune {
            config,
            corpus,
            task,
            kind,
            classes,
            init,
            out,
            speech_noise,
            eval_task,
        } => {
            let spec = match kind {
                Kind::Classification => TaskSpec::classification(classes),
                Kind::Regression => TaskSpec::regression(),
            };
            finetune(
                config.as_deref(),
                &corpus,
                &task,
                spec,
                init.as_deref(),
                &out,
                speech_noise,
                eval_task.as_deref(),
            )
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            task,
            speech_noise,
            crs_draws,
            seed,
        } => evaluate(&checkpoint, &corpus, task.as_deref(), speech_noise, crs_draws, seed),
        Command::SimulateMasking { length, trials, masker, seed } => simulate_masking(length, trials, masker, seed),
        Command::ExportAttention {
            checkpoint,
            corpus,
            dialog,
            turn,
            out,
        } => export(&checkpoint, &corpus, &dialog, turn, &out),
        Command::MakeTask { corpus, out, n, seed } => make_task(corpus.as_path(), &out, n, seed),
    }
}
