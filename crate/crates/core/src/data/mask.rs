use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::PackedBatch;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::IGNORE_INDEX;
use crate::tokenizer::special;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    pub mask_rate: f64,
    /// Probability that a selected position is replaced by `[MASK]`; the
    /// remaining selections keep their original token.
    pub mask_replace_prob: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.20,
            mask_replace_prob: 1.0,
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::config(format!("mask_rate must be in (0, 1], got {}", self.mask_rate)));
        }
        if !(0.0..=1.0).contains(&self.mask_replace_prob) {
            return Err(Error::config(format!(
                "mask_replace_prob must be in [0, 1], got {}",
                self.mask_replace_prob
            )));
        }
        Ok(())
    }
}

pub fn is_maskable(id: u32) -> bool {
    id as usize >= special::COUNT
}

/// Selects MLM targets in place with a generator derived from `cfg.seed`.
pub fn mask_for_mlm(batch: &mut PackedBatch, cfg: &MaskingConfig) -> Result<()> {
    let mut r = rng::stream(cfg.seed, rng::MASKING, &[]);
    mask_with_rng(batch, cfg, &mut r)
}

pub fn mask_with_rng(batch: &mut PackedBatch, cfg: &MaskingConfig, r: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    if batch.labels.iter().any(|&l| l != IGNORE_INDEX) {
        return Err(Error::contract("labels must be unset before masking"));
    }
    let w = batch.window;
    for row in 0..batch.rows() {
        let ids = &mut batch.input_ids[row * w..(row + 1) * w];
        let labels = &mut batch.labels[row * w..(row + 1) * w];
        let eligible: Vec<usize> = (0..w).filter(|&p| is_maskable(ids[p])).collect();
        if eligible.is_empty() {
            return Err(Error::contract(format!("row {row} has no maskable positions")));
        }
        let mut selected: Vec<usize> = eligible.iter().copied().filter(|_| r.random_bool(cfg.mask_rate)).collect();
        if selected.is_empty() {
            selected.push(eligible[r.random_range(0..eligible.len())]);
        }
        for p in selected {
            labels[p] = ids[p] as i64;
            if cfg.mask_replace_prob >= 1.0 || r.random_bool(cfg.mask_replace_prob) {
                ids[p] = special::MASK;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{pack, Document};

    fn batch(lens: &[usize], window: usize) -> PackedBatch {
        let docs = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| Ok(Document::new("t", i as u64, (0..n).map(|k| 5 + (k % 50) as u32).collect())));
        let rows = pack(docs, window).unwrap().collect::<Result<Vec<_>>>().unwrap();
        PackedBatch::from_rows(rows, window).unwrap()
    }

    #[test]
    fn full_rate_masks_everything_eligible() {
        let mut b = batch(&[10, 20, 5], 32);
        let orig = b.input_ids.clone();
        let cfg = MaskingConfig {
            mask_rate: 1.0,
            ..Default::default()
        };
        mask_for_mlm(&mut b, &cfg).unwrap();
        for (p, &id) in orig.iter().enumerate() {
            if is_maskable(id) {
                assert_eq!(b.labels[p], id as i64);
                assert_eq!(b.input_ids[p], special::MASK);
            } else {
                assert_eq!(b.labels[p], IGNORE_INDEX);
                assert_eq!(b.input_ids[p], id);
            }
        }
        b.validate().unwrap();
    }

    #[test]
    fn tiny_rate_forces_one_per_row() {
        let mut b = batch(&[10, 20, 25, 7], 32);
        let cfg = MaskingConfig {
            mask_rate: 1e-12,
            ..Default::default()
        };
        mask_for_mlm(&mut b, &cfg).unwrap();
        for r in 0..b.rows() {
            let n = b.labels[r * 32..(r + 1) * 32].iter().filter(|&&l| l != IGNORE_INDEX).count();
            assert_eq!(n, 1);
        }
    }

    #[test]
    fn deterministic_and_guarded() {
        let cfg = MaskingConfig {
            seed: 9,
            ..Default::default()
        };
        let mut a = batch(&[30, 30], 64);
        let mut b = a.clone();
        mask_for_mlm(&mut a, &cfg).unwrap();
        mask_for_mlm(&mut b, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(matches!(mask_for_mlm(&mut a, &cfg), Err(Error::Contract(_))));
        let bad = MaskingConfig {
            mask_rate: 0.0,
            ..Default::default()
        };
        assert!(matches!(mask_for_mlm(&mut batch(&[3], 8), &bad), Err(Error::Config(_))));
    }
}
