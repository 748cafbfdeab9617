use std::collections::VecDeque;

use super::Document;
use crate::encoder::EncoderInput;
use crate::error::{Error, Result};
use crate::tensor::{AttentionMask, IGNORE_INDEX};
use crate::tokenizer::special;

pub const MIN_WINDOW: usize = 8;

/// One packed row of `window` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedRow {
    pub ids: Vec<u32>,
    /// `[start, end)` of each wrapped document, ordered and disjoint.
    pub spans: Vec<(usize, usize)>,
    /// Offset of each token within its own document; 0 on padding.
    pub positions: Vec<usize>,
    pub labels: Vec<i64>,
}

impl PackedRow {
    fn empty(window: usize) -> Self {
        Self {
            ids: Vec::with_capacity(window),
            spans: Vec::new(),
            positions: Vec::with_capacity(window),
            labels: Vec::with_capacity(window),
        }
    }

    fn used(&self) -> usize {
        self.ids.len()
    }

    fn push_doc(&mut self, body: &[u32]) {
        let start = self.ids.len();
        self.ids.push(special::CLS);
        self.ids.extend_from_slice(body);
        self.ids.push(special::SEP);
        let end = self.ids.len();
        self.positions.extend(0..end - start);
        self.labels.extend(std::iter::repeat_n(IGNORE_INDEX, end - start));
        self.spans.push((start, end));
    }

    fn finish(mut self, window: usize) -> Self {
        let pad = window - self.ids.len();
        self.ids.extend(std::iter::repeat_n(special::PAD, pad));
        self.positions.extend(std::iter::repeat_n(0, pad));
        self.labels.extend(std::iter::repeat_n(IGNORE_INDEX, pad));
        self
    }

    pub fn non_pad(&self) -> usize {
        self.spans.iter().map(|(s, e)| e - s).sum()
    }
}

/// Greedy packer: each wrapped document (`[CLS] ids [SEP]`) goes into the
/// current row if it fits, otherwise the row is closed and a new one is
/// started. Documents longer than `window - 2` are cut into
/// `window - 2`-token chunks, each wrapped on its own.
pub struct Packer<I> {
    docs: I,
    window: usize,
    current: PackedRow,
    chunks: VecDeque<Vec<u32>>,
    done: bool,
}

pub fn pack<I>(docs: I, window: usize) -> Result<Packer<I::IntoIter>>
where
    I: IntoIterator<Item = Result<Document>>,
{
    if window < MIN_WINDOW {
        return Err(Error::config(format!("packing window must be at least {MIN_WINDOW}, got {window}")));
    }
    Ok(Packer {
        docs: docs.into_iter(),
        window,
        current: PackedRow::empty(window),
        chunks: VecDeque::new(),
        done: false,
    })
}

impl<I: Iterator<Item = Result<Document>>> Iterator for Packer<I> {
    type Item = Result<PackedRow>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(chunk) = self.chunks.pop_front() {
                if self.current.used() + chunk.len() + 2 <= self.window {
                    self.current.push_doc(&chunk);
                    continue;
                }
                let full = std::mem::replace(&mut self.current, PackedRow::empty(self.window));
                self.current.push_doc(&chunk);
                return Some(Ok(full.finish(self.window)));
            }
            if self.done {
                if self.current.used() == 0 {
                    return None;
                }
                let last = std::mem::replace(&mut self.current, PackedRow::empty(self.window));
                return Some(Ok(last.finish(self.window)));
            }
            match self.docs.next() {
                None => self.done = true,
                Some(Err(e)) => {
                    self.done = true;
                    self.current = PackedRow::empty(self.window);
                    return Some(Err(e));
                }
                Some(Ok(doc)) => {
                    if doc.ids.is_empty() {
                        continue;
                    }
                    for c in doc.ids.chunks(self.window - 2) {
                        self.chunks.push_back(c.to_vec());
                    }
                }
            }
        }
    }
}

/// `B` packed rows stacked into one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub window: usize,
    /// Row-major `[B, window]`.
    pub input_ids: Vec<u32>,
    pub spans: Vec<Vec<(usize, usize)>>,
    pub positions: Vec<usize>,
    pub labels: Vec<i64>,
}

impl PackedBatch {
    pub fn from_rows(rows: Vec<PackedRow>, window: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("a batch needs at least one row"));
        }
        let mut b = Self {
            window,
            input_ids: Vec::with_capacity(rows.len() * window),
            spans: Vec::with_capacity(rows.len()),
            positions: Vec::with_capacity(rows.len() * window),
            labels: Vec::with_capacity(rows.len() * window),
        };
        for r in rows {
            if r.ids.len() != window {
                return Err(Error::Dimension {
                    op: "packed_batch",
                    left: vec![window],
                    right: vec![r.ids.len()],
                });
            }
            b.input_ids.extend(r.ids);
            b.spans.push(r.spans);
            b.positions.extend(r.positions);
            b.labels.extend(r.labels);
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.spans.len()
    }

    pub fn row_ids(&self, r: usize) -> &[u32] {
        &self.input_ids[r * self.window..(r + 1) * self.window]
    }

    pub fn non_pad_tokens(&self) -> usize {
        self.spans.iter().flatten().map(|(s, e)| e - s).sum()
    }

    pub fn masked_tokens(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    /// Block-diagonal segments (one per document, padding 0) with
    /// per-document positions.
    pub fn encoder_input(&self) -> Result<EncoderInput> {
        let mut segments = vec![0u32; self.input_ids.len()];
        for (r, spans) in self.spans.iter().enumerate() {
            for (k, &(s, e)) in spans.iter().enumerate() {
                for seg in &mut segments[r * self.window + s..r * self.window + e] {
                    *seg = k as u32 + 1;
                }
            }
        }
        let mask = AttentionMask::segments(self.rows(), self.window, segments)?;
        EncoderInput::new(self.input_ids.clone(), self.rows(), self.window, mask, self.positions.clone())
    }

    /// Checks span, padding and label consistency.
    pub fn validate(&self) -> Result<()> {
        for (r, spans) in self.spans.iter().enumerate() {
            let ids = self.row_ids(r);
            let mut covered = vec![false; self.window];
            let mut prev_end = 0;
            for &(s, e) in spans {
                if s < prev_end || e <= s || e > self.window {
                    return Err(Error::contract(format!("row {r}: spans out of order")));
                }
                prev_end = e;
                covered[s..e].iter_mut().for_each(|c| *c = true);
            }
            for (p, &id) in ids.iter().enumerate() {
                let label = self.labels[r * self.window + p];
                if covered[p] == (id == special::PAD) {
                    return Err(Error::contract(format!("row {r}: span coverage disagrees with padding at {p}")));
                }
                if label != IGNORE_INDEX {
                    if id != special::MASK {
                        return Err(Error::contract(format!("row {r}: labeled position {p} is not [MASK]")));
                    }
                    if (label as u32) < special::COUNT as u32 {
                        return Err(Error::contract(format!("row {r}: special token labeled at {p}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Groups rows into batches of `batch_size` (the last may be smaller).
pub struct Batcher<I> {
    rows: I,
    batch_size: usize,
    window: usize,
}

pub fn batches<I>(rows: I, batch_size: usize, window: usize) -> Batcher<I::IntoIter>
where
    I: IntoIterator<Item = Result<PackedRow>>,
{
    Batcher {
        rows: rows.into_iter(),
        batch_size: batch_size.max(1),
        window,
    }
}

impl<I: Iterator<Item = Result<PackedRow>>> Iterator for Batcher<I> {
    type Item = Result<PackedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut rows = Vec::with_capacity(self.batch_size);
        for r in self.rows.by_ref() {
            match r {
                Ok(r) => rows.push(r),
                Err(e) => return Some(Err(e)),
            }
            if rows.len() == self.batch_size {
                break;
            }
        }
        if rows.is_empty() {
            None
        } else {
            Some(PackedBatch::from_rows(rows, self.window))
        }
    }
}

/// Padding statistics of a row stream against one-document-per-row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PackStats {
    pub rows: usize,
    pub tokens: usize,
    pub pad_fraction: f64,
    pub baseline_rows: usize,
    pub baseline_pad_fraction: f64,
}

impl PackStats {
    pub fn utilization(&self) -> f64 {
        1.0 - self.pad_fraction
    }

    pub fn baseline_utilization(&self) -> f64 {
        1.0 - self.baseline_pad_fraction
    }
}

/// Packs `docs` and tallies rows and padding. Wrapped lengths (including
/// `[CLS]`/`[SEP]`) count as non-padding.
pub fn pack_stats<I>(docs: I, window: usize) -> Result<PackStats>
where
    I: IntoIterator<Item = Result<Document>>,
{
    let mut baseline_rows = 0usize;
    let mut rows = 0usize;
    let mut tokens = 0usize;
    let counted = docs.into_iter().inspect(|d| {
        if let Ok(d) = d {
            baseline_rows += d.ids.len().div_ceil(window - 2);
        }
    });
    for row in pack(counted, window)? {
        let row = row?;
        rows += 1;
        tokens += row.non_pad();
    }
    let frac = |r: usize| {
        if r == 0 {
            0.0
        } else {
            (r * window - tokens) as f64 / (r * window) as f64
        }
    };
    Ok(PackStats {
        rows,
        tokens,
        pad_fraction: frac(rows),
        baseline_rows,
        baseline_pad_fraction: frac(baseline_rows),
    })
}
