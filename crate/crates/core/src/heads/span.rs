pub const MAX_ANSWER_LEN: usize = 30;

/// Best `(start, end)` by `start_logits[s] + end_logits[e]` over
/// `s <= e <= s + max_answer_len`. Ties go to the smallest `s`, then the
/// smallest `e`. Empty input yields `(0, 0)`.
pub fn predict_span(start_logits: &[f64], end_logits: &[f64], max_answer_len: usize) -> (usize, usize) {
    let n = start_logits.len().min(end_logits.len());
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..n {
        for e in s..n.min(s.saturating_add(max_answer_len).saturating_add(1)) {
            let score = start_logits[s] + end_logits[e];
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}

/// Token-overlap F1 between two inclusive token ranges.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if hi < lo {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let p = overlap / (pred.1 - pred.0 + 1) as f64;
    let r = overlap / (gold.1 - gold.0 + 1) as f64;
    2.0 * p * r / (p + r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(predict_span(&[0.3], &[-1.0], 30), (0, 0));
        assert_eq!(predict_span(&[0.0, 5.0, 0.0], &[0.0, 0.0, 5.0], 30), (1, 2));
        assert_eq!(predict_span(&[5.0, 0.0], &[5.0, 0.0], 30), (0, 0));
        assert_eq!(predict_span(&[1.0, 1.0], &[1.0, 1.0], 30), (0, 0));
        assert_eq!(predict_span(&[9.0, 0.0, 0.0], &[0.0, 0.0, 9.0], 1), (0, 0));
    }

    #[test]
    fn f1() {
        assert_eq!(span_f1((2, 4), (2, 4)), 1.0);
        assert_eq!(span_f1((0, 1), (3, 4)), 0.0);
        assert!((span_f1((0, 3), (2, 3)) - 2.0 / 3.0).abs() < 1e-15);
    }
}
