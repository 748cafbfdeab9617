use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use super::checkpoint::{Checkpoint, Progress};
use super::optim::{clip_grad_norm, AdamWConfig, OptimState};
use super::schedule::{lr_at, ScheduleConfig};
use crate::data::{mask_with_rng, pack, Corpus, Document, MaskingConfig, PackedBatch, PackedRow, Packer, MIN_WINDOW};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Real, Var, IGNORE_INDEX};

/// Mean cross-entropy over positions whose label is not −100.
pub fn mlm_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[i64]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    pub window: usize,
    pub batch_size: usize,
    /// `total_steps` is the phase's step budget.
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
}

impl PhasePlan {
    /// Window 1,024 at peak 6e-3, then window 4,096 at peak 1e-4.
    pub fn two_phase(steps_1: u64, steps_2: u64, batch_size: usize) -> Self {
        Self {
            phases: vec![
                Phase {
                    window: 1024,
                    batch_size,
                    schedule: ScheduleConfig::new(6e-3, steps_1),
                },
                Phase {
                    window: 4096,
                    batch_size,
                    schedule: ScheduleConfig::new(1e-4, steps_2),
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::config("phase plan has no phases"));
        }
        let mut prev = 0;
        for (i, p) in self.phases.iter().enumerate() {
            if p.window < prev {
                return Err(Error::config(format!(
                    "phase {} window {} is smaller than the previous phase's {prev}",
                    i + 1,
                    p.window
                )));
            }
            if p.window < MIN_WINDOW {
                return Err(Error::config(format!("phase {} window {} is below {MIN_WINDOW}", i + 1, p.window)));
            }
            if p.batch_size == 0 {
                return Err(Error::config(format!("phase {} batch size must be positive", i + 1)));
            }
            p.schedule.validate()?;
            prev = p.window;
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.schedule.total_steps).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub plan: PhasePlan,
    pub optim: AdamWConfig,
    /// `seed` is ignored; per-step masking seeds derive from [`Self::seed`].
    pub masking: MaskingConfig,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: Option<u64>,
    /// Metrics and checkpoints are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Print each metrics record to standard output.
    pub echo: bool,
}

impl TrainConfig {
    pub fn new(plan: PhasePlan, seed: u64) -> Self {
        Self {
            plan,
            optim: AdamWConfig::default(),
            masking: MaskingConfig::default(),
            seed,
            clip_norm: Some(1.0),
            checkpoint_every: None,
            out_dir: None,
            echo: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    /// 1-based across all phases.
    pub step: u64,
    /// 1-based.
    pub phase: u64,
    pub phase_step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    pub masked: usize,
    pub tokens_per_sec: f64,
}

impl StepMetrics {
    /// Every field except wall-clock throughput.
    pub fn deterministic_eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.phase == other.phase
            && self.phase_step == other.phase_step
            && self.loss.to_bits() == other.loss.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
            && self.tokens == other.tokens
            && self.masked == other.masked
    }
}

/// Endless row stream at a fixed window, cycling through the corpus.
struct RowStream<'c> {
    corpus: &'c dyn Corpus,
    window: usize,
    packer: Option<Packer<Box<dyn Iterator<Item = Result<Document>> + 'c>>>,
    epoch_rows: u64,
}

impl<'c> RowStream<'c> {
    fn new(corpus: &'c dyn Corpus, window: usize) -> Self {
        Self {
            corpus,
            window,
            packer: None,
            epoch_rows: 0,
        }
    }

    fn next_row(&mut self) -> Result<PackedRow> {
        loop {
            if self.packer.is_none() {
                self.packer = Some(pack(self.corpus.documents(), self.window)?);
                self.epoch_rows = 0;
            }
            match self.packer.as_mut().and_then(Iterator::next) {
                Some(row) => {
                    self.epoch_rows += 1;
                    return row;
                }
                None if self.epoch_rows == 0 => return Err(Error::input("training corpus has no documents")),
                None => self.packer = None,
            }
        }
    }
}

pub struct Trainer<T> {
    pub model: EncoderModel<T>,
    pub optim: OptimState<T>,
    pub progress: Progress,
    config: TrainConfig,
    metrics_out: Option<BufWriter<File>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: EncoderModel<T>, config: TrainConfig) -> Result<Self> {
        let shapes: Vec<Vec<usize>> = model.parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let optim = OptimState::new(config.optim, &shapes)?;
        Self::assemble(model, optim, Progress::default(), config)
    }

    /// Continues a run from `ck`; the checkpoint's seed must equal the
    /// config's.
    pub fn resume(ck: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        if ck.seed != config.seed {
            return Err(Error::config(format!(
                "checkpoint was trained with seed {}, config has seed {}",
                ck.seed, config.seed
            )));
        }
        Self::assemble(ck.model, ck.optim, ck.progress, config)
    }

    fn assemble(model: EncoderModel<T>, optim: OptimState<T>, progress: Progress, config: TrainConfig) -> Result<Self> {
        config.plan.validate()?;
        config.optim.validate()?;
        config.masking.validate()?;
        if progress.phase as usize > config.plan.phases.len() {
            return Err(Error::config("checkpoint phase is beyond the phase plan"));
        }
        let metrics_out = match &config.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        Ok(Self {
            model,
            optim,
            progress,
            config,
            metrics_out,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            optim: self.optim.clone(),
            progress: self.progress,
            seed: self.config.seed,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.normalized().phase as usize >= self.config.plan.phases.len()
    }

    fn normalized(&self) -> Progress {
        let mut p = self.progress;
        while let Some(phase) = self.config.plan.phases.get(p.phase as usize) {
            if p.step < phase.schedule.total_steps {
                break;
            }
            p.phase += 1;
            p.step = 0;
            p.rows_consumed = 0;
        }
        p
    }

    /// Runs the whole remaining plan.
    pub fn run(&mut self, corpus: &dyn Corpus) -> Result<Vec<StepMetrics>> {
        self.run_until(corpus, u64::MAX)
    }

    /// Runs until `global_step` reaches `stop_at` or the plan ends.
    pub fn run_until(&mut self, corpus: &dyn Corpus, stop_at: u64) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while self.progress.global_step < stop_at && !self.is_finished() {
            self.progress = self.normalized();
            let phase = self.config.plan.phases[self.progress.phase as usize];
            if phase.window > self.model.config().max_context {
                self.model.extend_context(phase.window)?;
            }
            let mut rows = RowStream::new(corpus, phase.window);
            for _ in 0..self.progress.rows_consumed {
                rows.next_row()?;
            }
            while self.progress.step < phase.schedule.total_steps && self.progress.global_step < stop_at {
                let mut batch_rows = Vec::with_capacity(phase.batch_size);
                for _ in 0..phase.batch_size {
                    batch_rows.push(rows.next_row()?);
                }
                let batch = PackedBatch::from_rows(batch_rows, phase.window)?;
                let m = self.step(batch, &phase)?;
                self.emit(&m)?;
                out.push(m);
                if let (Some(k), Some(dir)) = (self.config.checkpoint_every, &self.config.out_dir) {
                    if k > 0 && self.progress.global_step.is_multiple_of(k) {
                        let path = dir.join(format!("step-{:06}.ckpt", self.progress.global_step));
                        self.checkpoint().save(path)?;
                    }
                }
            }
        }
        if let Some(w) = self.metrics_out.as_mut() {
            w.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(out)
    }

    fn step(&mut self, mut batch: PackedBatch, phase: &Phase) -> Result<StepMetrics> {
        let started = Instant::now();
        let p = self.progress;
        let mut r = rng::stream(self.config.seed, rng::MASKING, &[p.phase, p.step]);
        mask_with_rng(&mut batch, &self.config.masking, &mut r)?;

        let input = batch.encoder_input()?;
        let (masked_rows, labels): (Vec<usize>, Vec<i64>) = batch
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE_INDEX)
            .map(|(i, &l)| (i, l))
            .unzip();
        let d = self.model.config().width;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let hidden = self.model.encode(&mut g, &bound, &input)?;
        let flat = g.reshape(hidden, &[input.batch * input.len, d])?;
        let picked = g.select_rows(flat, &masked_rows)?;
        let logits = self.model.logits(&mut g, &bound, picked)?;
        let loss = mlm_loss(&mut g, logits, &labels)?;
        let loss_value = g.value(loss).data()[0].as_f64();
        let step_no = p.global_step + 1;
        if !loss_value.is_finite() {
            if let Some(dir) = &self.config.out_dir {
                self.checkpoint().save(dir.join(format!("abort-step-{step_no:06}.ckpt")))?;
            }
            return Err(Error::Numerical(format!("loss is {loss_value} at step {step_no}")));
        }
        g.backward(loss)?;

        let mut grads: Vec<Vec<T>> = bound
            .vars()
            .into_iter()
            .map(|v| g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); g.value(v).numel()]))
            .collect();
        drop(g);
        let grad_norm = {
            let mut views: Vec<&mut [T]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
            match self.config.clip_norm {
                Some(max) => clip_grad_norm(&mut views, max),
                None => clip_grad_norm(&mut views, f64::INFINITY),
            }
        };
        let lr = lr_at(p.step + 1, &phase.schedule);
        let decay = self.model.decay_mask();
        let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut crate::tensor::Tensor<T>> =
            self.model.parameters_mut().into_iter().map(|(_, t)| t).collect();
        self.optim.step(&mut params, &grad_refs, &decay, lr)?;

        self.progress = Progress {
            phase: p.phase,
            step: p.step + 1,
            rows_consumed: p.rows_consumed + batch.rows() as u64,
            global_step: step_no,
        };
        let tokens = batch.non_pad_tokens();
        let secs = started.elapsed().as_secs_f64();
        Ok(StepMetrics {
            step: step_no,
            phase: p.phase + 1,
            phase_step: p.step + 1,
            loss: loss_value,
            lr,
            grad_norm,
            tokens,
            masked: labels.len(),
            tokens_per_sec: if secs > 0.0 { tokens as f64 / secs } else { 0.0 },
        })
    }

    fn emit(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m).map_err(|e| Error::Numerical(e.to_string()))?;
        if self.config.echo {
            println!("{line}");
        }
        if let Some(w) = self.metrics_out.as_mut() {
            writeln!(w, "{line}").map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(())
    }
}
