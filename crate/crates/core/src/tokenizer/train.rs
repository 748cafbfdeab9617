//! WordPiece vocabulary training by likelihood-score merging.
//!
//! Words are split into characters (`##`-prefixed after the first), then the
//! pair with the highest `count(ab) / (count(a)·count(b))` is merged until the
//! vocabulary reaches the target size. Ties go to the lexicographically
//! smallest pair, so training is deterministic for a given corpus.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::normalize::pre_tokenize;
use super::{special, NormalizerConfig, Vocab, CONTINUATION};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    pub alphabet_size: usize,
    /// Merged tokens in the order they were added.
    pub merges: Vec<String>,
}

pub fn train_wordpiece<I, S>(corpus: I, target_size: usize, norm: NormalizerConfig) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    train_wordpiece_with_report(corpus, target_size, norm).map(|(v, _)| v)
}

pub fn train_wordpiece_with_report<I, S>(
    corpus: I,
    target_size: usize,
    norm: NormalizerConfig,
) -> Result<(Vocab, TrainingReport)>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for doc in corpus {
        let text = norm.normalize(doc.as_ref());
        for w in pre_tokenize(&text) {
            *word_counts.entry(w.text.to_string()).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::input("cannot train a vocabulary on an empty corpus"));
    }

    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| {
            let symbols = w
                .chars()
                .enumerate()
                .map(|(i, ch)| if i == 0 { ch.to_string() } else { format!("{CONTINUATION}{ch}") })
                .collect();
            (symbols, c)
        })
        .collect();

    let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let minimum = alphabet.len() + special::COUNT;
    if target_size < minimum {
        return Err(Error::config(format!(
            "target vocabulary size {target_size} is below alphabet size {} plus {} special tokens",
            alphabet.len(),
            special::COUNT
        )));
    }

    let mut tokens: Vec<String> = special::TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().cloned());
    let mut present: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut merges = Vec::new();

    while tokens.len() < target_size {
        let Some((a, b)) = best_pair(&words) else { break };
        let merged = format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(&b));
        for (symbols, _) in words.iter_mut() {
            apply_merge(symbols, &a, &b, &merged);
        }
        if present.insert(merged.clone()) {
            tokens.push(merged.clone());
            merges.push(merged);
        }
    }

    let vocab = Vocab::from_tokens(tokens, norm)?;
    Ok((
        vocab,
        TrainingReport {
            alphabet_size: alphabet.len(),
            merges,
        },
    ))
}

fn best_pair(words: &[(Vec<String>, u64)]) -> Option<(String, String)> {
    let mut unit: HashMap<&str, u64> = HashMap::new();
    let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
    for (symbols, count) in words {
        for s in symbols {
            *unit.entry(s.as_str()).or_insert(0) += count;
        }
        for w in symbols.windows(2) {
            *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += count;
        }
    }
    let mut best: Option<((&str, &str), u64, u128)> = None;
    for (&pair, &n) in &pairs {
        let denom = unit[pair.0] as u128 * unit[pair.1] as u128;
        let better = match &best {
            None => true,
            Some((bp, bn, bd)) => {
                // Exact comparison of n/denom against bn/bd.
                match (n as u128 * bd).cmp(&(*bn as u128 * denom)) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => pair < *bp,
                }
            }
        };
        if better {
            best = Some((pair, n, denom));
        }
    }
    best.map(|((a, b), _, _)| (a.to_string(), b.to_string()))
}

fn apply_merge(symbols: &mut Vec<String>, a: &str, b: &str, merged: &str) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_symbol_corpus_has_no_merges() {
        let v = train_wordpiece(["a a a"], 6, NormalizerConfig::default()).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(5), Some("a"));
    }

    #[test]
    fn repeated_pair_is_merged() {
        let corpus = vec!["ab"; 100];
        let (v, report) = train_wordpiece_with_report(corpus, 8, NormalizerConfig::default()).unwrap();
        assert_eq!(report.alphabet_size, 2);
        assert_eq!(report.merges, vec!["ab".to_string()]);
        assert_eq!(v.tokens()[5..], ["##b", "a", "ab"]);
        assert_eq!(v.tokenize("ab"), vec![7]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train_wordpiece(Vec::<String>::new(), 10, NormalizerConfig::default()),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            train_wordpiece(["   "], 10, NormalizerConfig::default()),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            train_wordpiece(["abc"], 7, NormalizerConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stops_when_merges_run_out() {
        let v = train_wordpiece(["ab"], 100, NormalizerConfig::default()).unwrap();
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn score_prefers_rare_units_over_raw_frequency() {
        // "xy" is rarer than "ab", but x and y never occur apart:
        // 3/(3·3) beats 10/(20·10).
        let mut corpus = vec!["xy"; 3];
        corpus.extend(vec!["ab"; 10]);
        corpus.extend(["a", "b"].repeat(10));
        let (_, report) = train_wordpiece_with_report(corpus, 5 + 5 + 1, NormalizerConfig::default()).unwrap();
        assert_eq!(report.merges, vec!["xy".to_string()]);
    }
}
