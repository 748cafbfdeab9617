//! Task heads on top of the encoder: sequence classification, token
//! classification, extractive span prediction and pooled sentence
//! embeddings.

mod data;
mod span;

pub use data::{align_answer, align_word_labels, encode_text, load_examples, parse_record, LabeledExample, Target};
pub use span::{predict_span, span_f1, MAX_ANSWER_LEN};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::encoder::{BoundModel, EncoderInput, EncoderModel};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{AttentionMask, Graph, Real, Tensor, Var, IGNORE_INDEX};
use crate::tokenizer::special;
use crate::trainer::{clip_grad_norm, AdamWConfig, OptimState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    SequenceClassification { num_labels: usize },
    TokenClassification { num_labels: usize },
    SpanExtraction,
    PooledEmbedding,
}

impl HeadKind {
    pub fn output_dim(&self, width: usize) -> usize {
        match *self {
            HeadKind::SequenceClassification { num_labels } | HeadKind::TokenClassification { num_labels } => num_labels,
            HeadKind::SpanExtraction => 2,
            HeadKind::PooledEmbedding => width,
        }
    }

    fn num_labels(&self) -> Option<usize> {
        match *self {
            HeadKind::SequenceClassification { num_labels } | HeadKind::TokenClassification { num_labels } => {
                Some(num_labels)
            }
            _ => None,
        }
    }

    fn accepts(&self, t: &Target) -> bool {
        matches!(
            (self, t),
            (HeadKind::SequenceClassification { .. }, Target::Class(_))
                | (HeadKind::TokenClassification { .. }, Target::Tokens(_))
                | (HeadKind::SpanExtraction, Target::Span { .. })
                | (HeadKind::PooledEmbedding, Target::None)
        )
    }
}

/// Projection `[width, output_dim]` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead<T> {
    pub kind: HeadKind,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> TaskHead<T> {
    /// Classification and span heads start from N(0, 0.02); the embedding
    /// head starts as the identity.
    pub fn new(kind: HeadKind, width: usize, seed: u64) -> Result<Self> {
        let out = kind.output_dim(width);
        if out == 0 || kind.num_labels() == Some(1) {
            return Err(Error::config(format!("head {kind:?} needs at least two outputs")));
        }
        let weight = match kind {
            HeadKind::PooledEmbedding => {
                let mut w = vec![T::zero(); width * width];
                for i in 0..width {
                    w[i * width + i] = T::one();
                }
                w
            }
            _ => {
                let mut r = rng::stream(seed, rng::INIT, &[u64::MAX]);
                let normal = Normal::new(0.0, 0.02).expect("valid std");
                (0..width * out).map(|_| T::of(normal.sample(&mut r))).collect()
            }
        };
        Ok(Self {
            kind,
            weight: Tensor::from_vec(&[width, out], weight)?.requiring_grad(),
            bias: Tensor::zeros(&[out]).requiring_grad(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "metric")]
pub enum Metrics {
    Accuracy { accuracy: f64 },
    TokenF1 { precision: f64, recall: f64, f1: f64 },
    Span { exact_match: f64, f1: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: AdamWConfig,
    pub clip_norm: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            optim: AdamWConfig::default(),
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train: Metrics,
}

fn check_data<T: Real>(head: &TaskHead<T>, data: &[LabeledExample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::input("no examples"));
    }
    for ex in data {
        if !head.kind.accepts(&ex.target) {
            return Err(Error::config(format!(
                "head {:?} cannot be used with target {:?}",
                head.kind, ex.target
            )));
        }
        ex.validate(head.kind.num_labels())?;
    }
    if let HeadKind::TokenClassification { .. } = head.kind {
        let supervised = data.iter().any(|ex| match &ex.target {
            Target::Tokens(l) => l.iter().any(|&x| x != IGNORE_INDEX),
            _ => false,
        });
        if !supervised {
            return Err(Error::contract("token classification data has no supervised positions"));
        }
    }
    Ok(())
}

fn batch_input(batch: &[&LabeledExample]) -> Result<EncoderInput> {
    let seqs: Vec<Vec<u32>> = batch.iter().map(|e| e.ids.clone()).collect();
    EncoderInput::padded(&seqs, special::PAD)
}

/// Head outputs for a padded batch: `[B, C]` for sequence classification,
/// `[B·L, C]` for token classification and `([B, L], [B, L])` start/end
/// logits (padding pushed to the masked logit) for spans.
enum Outputs {
    Rows(Var),
    Span(Var, Var),
}

fn head_forward<T: Real>(
    g: &mut Graph<T>,
    model: &EncoderModel<T>,
    bound: &BoundModel,
    head: (Var, Var),
    kind: HeadKind,
    input: &EncoderInput,
) -> Result<Outputs> {
    let d = model.config().width;
    let (b, l) = (input.batch, input.len);
    let hidden = model.encode(g, bound, input)?;
    let flat = g.reshape(hidden, &[b * l, d])?;
    match kind {
        HeadKind::SequenceClassification { .. } => {
            let cls: Vec<usize> = (0..b).map(|i| i * l).collect();
            let rows = g.select_rows(flat, &cls)?;
            let z = g.matmul(rows, head.0)?;
            Ok(Outputs::Rows(g.add_bias(z, head.1)?))
        }
        HeadKind::TokenClassification { .. } => {
            let z = g.matmul(flat, head.0)?;
            Ok(Outputs::Rows(g.add_bias(z, head.1)?))
        }
        HeadKind::SpanExtraction => {
            let z = g.matmul(flat, head.0)?;
            let z = g.add_bias(z, head.1)?;
            let pad: Vec<T> = input
                .ids
                .iter()
                .map(|&id| if id == special::PAD { T::masked_logit() } else { T::zero() })
                .collect();
            let pad = g.constant(Tensor::from_vec(&[b, l], pad)?);
            let s = g.pick_last(z, 0)?;
            let s = g.reshape(s, &[b, l])?;
            let e = g.pick_last(z, 1)?;
            let e = g.reshape(e, &[b, l])?;
            Ok(Outputs::Span(g.add(s, pad)?, g.add(e, pad)?))
        }
        HeadKind::PooledEmbedding => Err(Error::config(
            "the pooled-embedding head has no supervised fine-tuning objective",
        )),
    }
}

fn batch_loss<T: Real>(g: &mut Graph<T>, out: &Outputs, batch: &[&LabeledExample], len: usize) -> Result<Option<Var>> {
    match out {
        Outputs::Rows(z) => {
            let labels: Vec<i64> = match &batch[0].target {
                Target::Class(_) => batch
                    .iter()
                    .map(|e| match e.target {
                        Target::Class(c) => c as i64,
                        _ => IGNORE_INDEX,
                    })
                    .collect(),
                _ => batch
                    .iter()
                    .flat_map(|e| {
                        let mut l = match &e.target {
                            Target::Tokens(t) => t.clone(),
                            _ => Vec::new(),
                        };
                        l.resize(len, IGNORE_INDEX);
                        l
                    })
                    .collect(),
            };
            if labels.iter().all(|&l| l == IGNORE_INDEX) {
                return Ok(None);
            }
            g.cross_entropy(*z, &labels).map(Some)
        }
        Outputs::Span(s, e) => {
            let (starts, ends): (Vec<i64>, Vec<i64>) = batch
                .iter()
                .map(|ex| match ex.target {
                    Target::Span { start, end } => (start as i64, end as i64),
                    _ => (IGNORE_INDEX, IGNORE_INDEX),
                })
                .unzip();
            let ls = g.cross_entropy(*s, &starts)?;
            let le = g.cross_entropy(*e, &ends)?;
            let sum = g.add(ls, le)?;
            g.scale(sum, T::of(0.5)).map(Some)
        }
    }
}

/// Fine-tunes encoder and head together with AdamW at a constant rate and
/// reports the training metric after every epoch.
pub fn finetune<T: Real>(
    model: &mut EncoderModel<T>,
    head: &mut TaskHead<T>,
    data: &[LabeledExample],
    cfg: &FinetuneConfig,
) -> Result<Vec<EpochReport>> {
    check_data(head, data)?;
    if let HeadKind::PooledEmbedding = head.kind {
        return Err(Error::config("the pooled-embedding head has no supervised fine-tuning objective"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("epochs and batch size must be positive"));
    }
    let mut shapes: Vec<Vec<usize>> = model.parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
    shapes.push(head.weight.shape().to_vec());
    shapes.push(head.bias.shape().to_vec());
    let mut optim = OptimState::<T>::new(cfg.optim, &shapes)?;
    let mut decay = model.decay_mask();
    decay.extend([true, false]);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, rng::SHUFFLE, &[epoch as u64]);
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &data[i]).collect();
            let input = batch_input(&batch)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let hw = g.param(&head.weight);
            let hb = g.param(&head.bias);
            let out = head_forward(&mut g, model, &bound, (hw, hb), head.kind, &input)?;
            let Some(loss) = batch_loss(&mut g, &out, &batch, input.len)? else { continue };
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("fine-tuning loss is {value} in epoch {}", epoch + 1)));
            }
            g.backward(loss)?;
            let mut vars = bound.vars();
            vars.extend([hw, hb]);
            let mut grads: Vec<Vec<T>> = vars
                .iter()
                .map(|&v| g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); g.value(v).numel()]))
                .collect();
            drop(g);
            let mut views: Vec<&mut [T]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
            clip_grad_norm(&mut views, cfg.clip_norm);
            let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut Tensor<T>> = model.parameters_mut().into_iter().map(|(_, t)| t).collect();
            params.push(&mut head.weight);
            params.push(&mut head.bias);
            optim.step(&mut params, &grad_refs, &decay, cfg.lr)?;
            total += value;
            batches += 1;
        }
        reports.push(EpochReport {
            epoch: epoch + 1,
            mean_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
            train: evaluate(model, head, data)?,
        });
    }
    Ok(reports)
}

/// Class (or per-token class) predictions and span predictions for one
/// example.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(usize),
    Tokens(Vec<usize>),
    Span(usize, usize),
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Real>(model: &EncoderModel<T>, head: &TaskHead<T>, examples: &[LabeledExample]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(16) {
        let batch: Vec<&LabeledExample> = chunk.iter().collect();
        let input = batch_input(&batch)?;
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g);
        let hw = g.constant(head.weight.clone());
        let hb = g.constant(head.bias.clone());
        let o = head_forward(&mut g, model, &bound, (hw, hb), head.kind, &input)?;
        let l = input.len;
        match o {
            Outputs::Rows(z) => {
                let v = g.value(z);
                let c = v.shape()[1];
                let data = v.to_f64_vec();
                let rows: Vec<usize> = data.chunks(c).map(argmax).collect();
                match head.kind {
                    HeadKind::SequenceClassification { .. } => out.extend(rows.into_iter().map(Prediction::Class)),
                    _ => {
                        for (bi, ex) in batch.iter().enumerate() {
                            out.push(Prediction::Tokens(rows[bi * l..bi * l + ex.ids.len()].to_vec()));
                        }
                    }
                }
            }
            Outputs::Span(s, e) => {
                let (s, e) = (g.value(s).to_f64_vec(), g.value(e).to_f64_vec());
                for (bi, ex) in batch.iter().enumerate() {
                    let n = ex.ids.len();
                    let (ps, pe) = predict_span(&s[bi * l..bi * l + n], &e[bi * l..bi * l + n], MAX_ANSWER_LEN);
                    out.push(Prediction::Span(ps, pe));
                }
            }
        }
    }
    Ok(out)
}

/// Accuracy, micro token-F1 (label 0 is the outside class) or exact match
/// plus token-overlap F1, depending on the head.
pub fn evaluate<T: Real>(model: &EncoderModel<T>, head: &TaskHead<T>, data: &[LabeledExample]) -> Result<Metrics> {
    check_data(head, data)?;
    let preds = predict(model, head, data)?;
    match head.kind {
        HeadKind::SequenceClassification { .. } => {
            let correct = preds
                .iter()
                .zip(data)
                .filter(|(p, ex)| matches!((p, &ex.target), (Prediction::Class(a), Target::Class(b)) if a == b))
                .count();
            Ok(Metrics::Accuracy {
                accuracy: correct as f64 / data.len() as f64,
            })
        }
        HeadKind::TokenClassification { .. } => {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (p, ex) in preds.iter().zip(data) {
                let (Prediction::Tokens(p), Target::Tokens(gold)) = (p, &ex.target) else { continue };
                for (&pi, &gi) in p.iter().zip(gold) {
                    if gi == IGNORE_INDEX {
                        continue;
                    }
                    let gi = gi as usize;
                    if pi == gi {
                        if gi != 0 {
                            tp += 1;
                        }
                    } else {
                        if pi != 0 {
                            fp += 1;
                        }
                        if gi != 0 {
                            fneg += 1;
                        }
                    }
                }
            }
            let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
            Ok(Metrics::TokenF1 {
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fneg),
                f1: ratio(2 * tp, 2 * tp + fp + fneg),
            })
        }
        HeadKind::SpanExtraction => {
            let (mut em, mut f1) = (0.0, 0.0);
            for (p, ex) in preds.iter().zip(data) {
                if let (Prediction::Span(ps, pe), Target::Span { start, end }) = (p, &ex.target) {
                    if (*ps, *pe) == (*start, *end) {
                        em += 1.0;
                    }
                    f1 += span_f1((*ps, *pe), (*start, *end));
                }
            }
            let n = data.len() as f64;
            Ok(Metrics::Span {
                exact_match: em / n,
                f1: f1 / n,
            })
        }
        HeadKind::PooledEmbedding => Err(Error::config("the pooled-embedding head has no evaluation metric")),
    }
}

/// Mean of the final hidden states over non-`[PAD]` positions, scaled to
/// unit L2 norm. Padding is hidden from attention, so trailing `[PAD]`s do
/// not change the result.
pub fn pooled_embedding<T: Real>(model: &EncoderModel<T>, ids: &[u32]) -> Result<Vec<T>> {
    let keep: Vec<bool> = ids.iter().map(|&id| id != special::PAD).collect();
    let n = keep.iter().filter(|&&k| k).count();
    if n == 0 {
        return Err(Error::contract("pooled embedding of an all-[PAD] sequence"));
    }
    let mask = AttentionMask::segments(1, ids.len(), keep.iter().map(|&k| k as u32).collect())?;
    let positions = {
        let mut p = 0;
        keep.iter()
            .map(|&k| {
                let here = if k { p } else { 0 };
                p += k as usize;
                here
            })
            .collect()
    };
    let input = EncoderInput::new(ids.to_vec(), 1, ids.len(), mask, positions)?;
    let h = model.forward(&input)?;
    let d = model.config().width;
    let mut sum = vec![0.0f64; d];
    for (row, &k) in h.data().chunks(d).zip(&keep) {
        if k {
            for (s, &x) in sum.iter_mut().zip(row) {
                *s += x.as_f64();
            }
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numerical(format!("pooled embedding has norm {norm}")));
    }
    Ok(sum.iter().map(|x| T::of(x / norm)).collect())
}
