//! Command-line front end. Exit codes: 0 success, 1 numerical failure,
//! 2 configuration error, 3 I/O or file-format error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{Dtype, RunConfig};
use crate::data::{ingest, mask_with_rng, pack, pack_stats, Corpus, FileCorpus, MaskingConfig, PackedBatch};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::heads::{evaluate, finetune, load_examples, FinetuneConfig, HeadKind, LabeledExample, Target, TaskHead};
use crate::rng;
use crate::tensor::{GradCheckConfig, Graph, Real, Tensor, IGNORE_INDEX};
use crate::tokenizer::{train_wordpiece_with_report, NormalizerConfig, UnicodeForm, Vocab};
use crate::trainer::{
    model_grad_check, peek_value_width, toy_fixture, Checkpoint, OptimState, TrainConfig, Trainer,
};

#[derive(Debug, Parser)]
#[command(name = "neobert", version, about = "Train and fine-tune a small BERT-style encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct NormArgs {
    /// Lowercase text before tokenization.
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long, default_value = "nfc")]
    pub unicode_form: UnicodeForm,
}

impl NormArgs {
    fn config(&self) -> NormalizerConfig {
        NormalizerConfig {
            unicode_form: self.unicode_form,
            lowercase: self.lowercase,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Cls,
    Ner,
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Size {
    Toy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a WordPiece vocabulary from text files.
    TrainTokenizer {
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        norm: NormArgs,
        #[arg(long)]
        force: bool,
    },
    /// Run the phase plan of a run config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Do not echo per-step metrics.
        #[arg(long)]
        quiet: bool,
    },
    /// Raise a checkpoint's maximum context.
    Extend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Fine-tune a task head together with the encoder.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        norm: NormArgs,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        num_labels: Option<usize>,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the tuned model, head and metrics.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Task metrics with --head, otherwise MLM loss over a text corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        norm: NormArgs,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        window: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long, value_enum, default_value = "toy")]
        size: Size,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Packing statistics against one document per row.
    PackStats {
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        norm: NormArgs,
        #[arg(long)]
        window: usize,
    },
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::config(format!(
            "refusing to overwrite {}; pass --force",
            path.display()
        )));
    }
    Ok(())
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::TrainTokenizer {
            corpus,
            vocab_size,
            out: path,
            norm,
            force,
        } => train_tokenizer(&corpus, vocab_size, &path, norm.config(), force, out),
        Command::Pretrain {
            config,
            resume,
            force,
            quiet,
        } => pretrain(&config, resume.as_deref(), force, quiet, out),
        Command::Extend {
            checkpoint,
            window,
            out: path,
            force,
        } => match peek_value_width(&checkpoint)? {
            4 => extend::<f32>(&checkpoint, window, &path, force, out),
            _ => extend::<f64>(&checkpoint, window, &path, force, out),
        },
        Command::Finetune {
            checkpoint,
            vocab,
            norm,
            task,
            data,
            num_labels,
            epochs,
            lr,
            batch_size,
            seed,
            out: dir,
            force,
        } => {
            let vocab = Vocab::load(&vocab, norm.config())?;
            let examples = load_examples(&data, &vocab)?;
            let cfg = FinetuneConfig {
                epochs,
                lr,
                batch_size,
                seed,
                ..Default::default()
            };
            refuse_overwrite(&dir, force)?;
            match peek_value_width(&checkpoint)? {
                4 => finetune_cmd::<f32>(&checkpoint, task, &examples, num_labels, &cfg, &dir, out),
                _ => finetune_cmd::<f64>(&checkpoint, task, &examples, num_labels, &cfg, &dir, out),
            }
        }
        Command::Eval {
            checkpoint,
            vocab,
            norm,
            data,
            head,
            window,
            batch_size,
            seed,
        } => {
            let vocab = Vocab::load(&vocab, norm.config())?;
            match peek_value_width(&checkpoint)? {
                4 => eval_cmd::<f32>(&checkpoint, &vocab, &data, head.as_deref(), window, batch_size, seed, out),
                _ => eval_cmd::<f64>(&checkpoint, &vocab, &data, head.as_deref(), window, batch_size, seed, out),
            }
        }
        Command::Gradcheck { size: Size::Toy, seed } => gradcheck(seed, out),
        Command::PackStats {
            corpus,
            vocab,
            norm,
            window,
        } => {
            let vocab = Vocab::load(&vocab, norm.config())?;
            let s = pack_stats(ingest(&corpus, &vocab), window)?;
            writeln!(out, "rows                  {}", s.rows).map_err(io_out)?;
            writeln!(out, "tokens                {}", s.tokens).map_err(io_out)?;
            writeln!(out, "pad_fraction          {:.4}", s.pad_fraction).map_err(io_out)?;
            writeln!(out, "utilization           {:.4}", s.utilization()).map_err(io_out)?;
            writeln!(out, "baseline_rows         {}", s.baseline_rows).map_err(io_out)?;
            writeln!(out, "baseline_pad_fraction {:.4}", s.baseline_pad_fraction).map_err(io_out)?;
            writeln!(out, "baseline_utilization  {:.4}", s.baseline_utilization()).map_err(io_out)?;
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to() as u64,
    })
}

fn train_tokenizer(
    corpus: &[PathBuf],
    vocab_size: usize,
    path: &Path,
    norm: NormalizerConfig,
    force: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let texts = corpus.iter().map(|p| read_text(p)).collect::<Result<Vec<_>>>()?;
    refuse_overwrite(path, force)?;
    let (vocab, report) = train_wordpiece_with_report(texts.iter().flat_map(|t| t.lines()), vocab_size, norm)?;
    vocab.save(path)?;
    writeln!(out, "vocab size {}", vocab.len()).map_err(io_out)?;
    let top: Vec<&str> = report.merges.iter().take(20).map(String::as_str).collect();
    writeln!(out, "top merges: {}", top.join(" ")).map_err(io_out)?;
    Ok(())
}

fn pretrain(config: &Path, resume: Option<&Path>, force: bool, quiet: bool, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = &cfg.out_dir;
    let occupied = dir.is_dir() && std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
    if occupied && resume.is_none() && !force {
        return Err(Error::config(format!(
            "output directory {} is not empty; pass --force",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if resume.is_none() {
        let metrics = dir.join("metrics.jsonl");
        if metrics.exists() {
            std::fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
        }
    }
    let resolved = dir.join("resolved.cfg");
    std::fs::write(&resolved, cfg.to_text()).map_err(|e| Error::io(&resolved, e))?;
    let corpus = FileCorpus::new(cfg.files.clone(), cfg.vocab()?, cfg.seed, cfg.cache_dir.clone())?;
    match cfg.dtype {
        Dtype::F32 => pretrain_typed::<f32>(&cfg, &corpus, resume, quiet, out),
        Dtype::F64 => pretrain_typed::<f64>(&cfg, &corpus, resume, quiet, out),
    }
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        plan: cfg.plan.clone(),
        optim: cfg.optim,
        masking: cfg.masking,
        seed: cfg.seed,
        clip_norm: (cfg.clip_norm > 0.0).then_some(cfg.clip_norm),
        checkpoint_every: (cfg.checkpoint_every > 0).then_some(cfg.checkpoint_every),
        out_dir: Some(cfg.out_dir.clone()),
        echo: false,
    }
}

fn pretrain_typed<T: Real>(
    cfg: &RunConfig,
    corpus: &dyn Corpus,
    resume: Option<&Path>,
    quiet: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let tc = TrainConfig {
        echo: !quiet,
        ..train_config(cfg)
    };
    let mut trainer = match resume {
        Some(p) => Trainer::resume(Checkpoint::<T>::load_for(p, &cfg.model)?, tc)?,
        None => Trainer::new(EncoderModel::<T>::new(cfg.model.clone(), cfg.seed)?, tc)?,
    };
    let metrics = trainer.run(corpus)?;
    let final_path = cfg.out_dir.join("final.ckpt");
    trainer.checkpoint().save(&final_path)?;
    if let Some(last) = metrics.last() {
        writeln!(
            out,
            "finished step {} (phase {}) loss {:.4}; checkpoint {}",
            last.step,
            last.phase,
            last.loss,
            final_path.display()
        )
        .map_err(io_out)?;
    }
    Ok(())
}

fn extend<T: Real>(checkpoint: &Path, window: usize, path: &Path, force: bool, out: &mut dyn Write) -> Result<()> {
    refuse_overwrite(path, force)?;
    let mut ck = Checkpoint::<T>::load(checkpoint)?;
    let before = ck.model.param_count();
    let from = ck.model.config().max_context;
    ck.model.extend_context(window)?;
    ck.save(path)?;
    writeln!(
        out,
        "max_context {from} -> {window}; parameters {before} -> {}",
        ck.model.param_count()
    )
    .map_err(io_out)?;
    Ok(())
}

fn head_kind(task: Task, examples: &[LabeledExample], num_labels: Option<usize>) -> HeadKind {
    let inferred = || {
        examples
            .iter()
            .map(|e| match &e.target {
                Target::Class(c) => *c + 1,
                Target::Tokens(l) => l.iter().map(|&x| (x.max(0) + 1) as usize).max().unwrap_or(0),
                _ => 0,
            })
            .max()
            .unwrap_or(0)
            .max(2)
    };
    match task {
        Task::Cls => HeadKind::SequenceClassification {
            num_labels: num_labels.unwrap_or_else(inferred),
        },
        Task::Ner => HeadKind::TokenClassification {
            num_labels: num_labels.unwrap_or_else(inferred),
        },
        Task::Qa => HeadKind::SpanExtraction,
    }
}

pub fn save_head<T: Real>(head: &TaskHead<T>, path: &Path) -> Result<()> {
    let (kind, num_labels) = match head.kind {
        HeadKind::SequenceClassification { num_labels } => ("sequence_classification", num_labels),
        HeadKind::TokenClassification { num_labels } => ("token_classification", num_labels),
        HeadKind::SpanExtraction => ("span_extraction", 2),
        HeadKind::PooledEmbedding => ("pooled_embedding", 0),
    };
    let v = json!({
        "kind": kind,
        "num_labels": num_labels,
        "shape": head.weight.shape(),
        "weight": head.weight.to_f64_vec(),
        "bias": head.bias.to_f64_vec(),
    });
    std::fs::write(path, v.to_string()).map_err(|e| Error::io(path, e))
}

pub fn load_head<T: Real>(path: &Path) -> Result<TaskHead<T>> {
    let text = read_text(path)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: e.column() as u64,
        msg: format!("head file {}: {e}", path.display()),
    })?;
    let bad = |what: &str| Error::Format {
        offset: 0,
        msg: format!("head file {}: {what}", path.display()),
    };
    let num_labels = v["num_labels"].as_u64().ok_or_else(|| bad("num_labels"))? as usize;
    let kind = match v["kind"].as_str() {
        Some("sequence_classification") => HeadKind::SequenceClassification { num_labels },
        Some("token_classification") => HeadKind::TokenClassification { num_labels },
        Some("span_extraction") => HeadKind::SpanExtraction,
        Some("pooled_embedding") => HeadKind::PooledEmbedding,
        _ => return Err(bad("unknown kind")),
    };
    let floats = |key: &str| -> Result<Vec<T>> {
        v[key]
            .as_array()
            .ok_or_else(|| bad(key))?
            .iter()
            .map(|x| x.as_f64().map(T::of).ok_or_else(|| bad(key)))
            .collect()
    };
    let shape: Vec<usize> = v["shape"]
        .as_array()
        .ok_or_else(|| bad("shape"))?
        .iter()
        .map(|x| x.as_u64().map(|d| d as usize).ok_or_else(|| bad("shape")))
        .collect::<Result<_>>()?;
    if shape.len() != 2 {
        return Err(bad("shape"));
    }
    Ok(TaskHead {
        kind,
        weight: Tensor::from_vec(&shape, floats("weight")?)?,
        bias: Tensor::from_vec(&[shape[1]], floats("bias")?)?,
    })
}

fn finetune_cmd<T: Real>(
    checkpoint: &Path,
    task: Task,
    examples: &[LabeledExample],
    num_labels: Option<usize>,
    cfg: &FinetuneConfig,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let mut model = ck.model;
    let kind = head_kind(task, examples, num_labels);
    let mut head = TaskHead::<T>::new(kind, model.config().width, cfg.seed)?;
    let reports = finetune(&mut model, &mut head, examples, cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in &reports {
        writeln!(out, "{}", serde_json::to_string(r).expect("serializable")).map_err(io_out)?;
    }
    let shapes: Vec<Vec<usize>> = model.parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let ck = Checkpoint {
        optim: OptimState::new(cfg.optim, &shapes)?,
        model,
        progress: Default::default(),
        seed: cfg.seed,
    };
    ck.save(dir.join("model.ckpt"))?;
    save_head(&head, &dir.join("head.json"))?;
    let metrics_path = dir.join("metrics.json");
    let last = reports.last().map(|r| r.train);
    std::fs::write(&metrics_path, serde_json::to_string(&last).expect("serializable"))
        .map_err(|e| Error::io(&metrics_path, e))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd<T: Real>(
    checkpoint: &Path,
    vocab: &Vocab,
    data: &[PathBuf],
    head: Option<&Path>,
    window: usize,
    batch_size: usize,
    seed: u64,
    out: &mut dyn Write,
) -> Result<()> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let model = ck.model;
    if let Some(h) = head {
        let head = load_head::<T>(h)?;
        let mut examples = Vec::new();
        for p in data {
            examples.extend(load_examples(p, vocab)?);
        }
        let m = evaluate(&model, &head, &examples)?;
        writeln!(out, "{}", serde_json::to_string(&m).expect("serializable")).map_err(io_out)?;
        return Ok(());
    }
    let window = window.min(model.config().max_context);
    let mut total = 0.0;
    let mut batches = 0u64;
    let mut rows = Vec::new();
    let flush = |rows: Vec<_>, batches: &mut u64, total: &mut f64| -> Result<()> {
        let mut b = PackedBatch::from_rows(rows, window)?;
        let mut r = rng::stream(seed, rng::MASKING, &[u64::MAX, *batches]);
        mask_with_rng(&mut b, &MaskingConfig::default(), &mut r)?;
        let input = b.encoder_input()?;
        let picked: Vec<usize> = (0..b.labels.len()).filter(|&i| b.labels[i] != IGNORE_INDEX).collect();
        let labels: Vec<i64> = picked.iter().map(|&i| b.labels[i]).collect();
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g);
        let h = model.encode(&mut g, &bound, &input)?;
        let flat = g.reshape(h, &[input.batch * input.len, model.config().width])?;
        let sel = g.select_rows(flat, &picked)?;
        let z = model.logits(&mut g, &bound, sel)?;
        let loss = g.cross_entropy(z, &labels)?;
        *total += g.value(loss).data()[0].as_f64();
        *batches += 1;
        Ok(())
    };
    for row in pack(ingest(data, vocab), window)? {
        rows.push(row?);
        if rows.len() == batch_size.max(1) {
            flush(std::mem::take(&mut rows), &mut batches, &mut total)?;
        }
    }
    if !rows.is_empty() {
        flush(rows, &mut batches, &mut total)?;
    }
    if batches == 0 {
        return Err(Error::input("evaluation corpus has no documents"));
    }
    let loss = total / batches as f64;
    writeln!(out, "{}", json!({ "mlm_loss": loss, "batches": batches })).map_err(io_out)?;
    Ok(())
}

fn gradcheck(seed: u64, out: &mut dyn Write) -> Result<()> {
    let (model, input, labels) = toy_fixture(seed)?;
    let cfg = GradCheckConfig::default();
    let reports = model_grad_check(&model, &input, &labels, &cfg)?;
    writeln!(out, "{:<22} {:>7} {:>14}  status", "parameter", "numel", "max_rel_error").map_err(io_out)?;
    let mut failed = Vec::new();
    for (name, r) in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        writeln!(out, "{name:<22} {:>7} {:>14.3e}  {status}", r.analytic.len(), r.max_rel_error).map_err(io_out)?;
        if !r.passed {
            failed.push(name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed (tolerance {:e}) for {}",
            cfg.tolerance,
            failed.join(", ")
        )))
    }
}
