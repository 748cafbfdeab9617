use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::IGNORE_INDEX;
use crate::tokenizer::{special, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// One label per token; −100 on specials and word continuations.
    Tokens(Vec<i64>),
    /// Inclusive token indices.
    Span { start: usize, end: usize },
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    /// Starts with `[CLS]`.
    pub ids: Vec<u32>,
    pub target: Target,
}

impl LabeledExample {
    pub fn validate(&self, num_labels: Option<usize>) -> Result<()> {
        if self.ids.first() != Some(&special::CLS) {
            return Err(Error::input("example must start with [CLS]"));
        }
        let n = self.ids.len();
        match &self.target {
            Target::Class(c) => {
                if num_labels.is_some_and(|k| *c >= k) {
                    return Err(Error::input(format!("class {c} out of range")));
                }
            }
            Target::Tokens(labels) => {
                if labels.len() != n {
                    return Err(Error::Dimension {
                        op: "token_labels",
                        left: vec![n],
                        right: vec![labels.len()],
                    });
                }
                if let Some(&bad) = labels
                    .iter()
                    .find(|&&l| l != IGNORE_INDEX && (l < 0 || num_labels.is_some_and(|k| l as usize >= k)))
                {
                    return Err(Error::input(format!("token label {bad} out of range")));
                }
            }
            Target::Span { start, end } => {
                if start > end || *end >= n {
                    return Err(Error::input(format!("span ({start}, {end}) invalid for length {n}")));
                }
            }
            Target::None => {}
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text: String,
    label: Option<usize>,
    labels: Option<Vec<i64>>,
    question: Option<String>,
    answer_start_char: Option<usize>,
    answer_text: Option<String>,
}

/// `[CLS] tokens [SEP]`
pub fn encode_text(vocab: &Vocab, text: &str) -> Vec<u32> {
    let mut ids = vec![special::CLS];
    ids.extend(vocab.tokenize(text));
    ids.push(special::SEP);
    ids
}

/// Per-word labels onto tokens: the first token of each word carries the
/// word's label, continuations and specials get −100.
pub fn align_word_labels(vocab: &Vocab, text: &str, word_labels: &[i64]) -> Result<LabeledExample> {
    let (_, spans) = vocab.tokenize_with_offsets(text);
    let words = spans.last().map_or(0, |s| s.word + 1);
    if words != word_labels.len() {
        return Err(Error::input(format!("{} labels for {words} words", word_labels.len())));
    }
    let mut ids = vec![special::CLS];
    let mut labels = vec![IGNORE_INDEX];
    let mut prev_word = None;
    for s in &spans {
        ids.push(s.id);
        labels.push(if prev_word == Some(s.word) {
            IGNORE_INDEX
        } else {
            word_labels[s.word]
        });
        prev_word = Some(s.word);
    }
    ids.push(special::SEP);
    labels.push(IGNORE_INDEX);
    Ok(LabeledExample {
        ids,
        target: Target::Tokens(labels),
    })
}

/// Builds `[CLS] question [SEP] context [SEP]` (question optional) and maps
/// the answer's character offsets in `context` to token indices.
pub fn align_answer(
    vocab: &Vocab,
    question: Option<&str>,
    context: &str,
    answer_start_char: usize,
    answer_text: &str,
) -> Result<LabeledExample> {
    let answer = answer_text.trim();
    let prefix: String = context.chars().take(answer_start_char).collect();
    let rest: String = context.chars().skip(answer_start_char).collect();
    if answer.is_empty() || !rest.trim_start().starts_with(answer) {
        return Err(Error::input(format!(
            "answer {answer_text:?} not found at character {answer_start_char}"
        )));
    }
    let through = vocab.normalize(&format!("{prefix}{answer}")).chars().count();
    let ans_len = vocab.normalize(answer).chars().count();
    let (ns, ne) = (through - ans_len.min(through), through);

    let mut ids = vec![special::CLS];
    if let Some(q) = question {
        ids.extend(vocab.tokenize(q));
        ids.push(special::SEP);
    }
    let offset = ids.len();
    let (_, spans) = vocab.tokenize_with_offsets(context);
    let first = spans.iter().position(|s| s.end > ns && s.start < ne);
    let last = spans.iter().rposition(|s| s.start < ne && s.end > ns);
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::input(format!("answer {answer_text:?} covers no tokens")));
    };
    ids.extend(spans.iter().map(|s| s.id));
    ids.push(special::SEP);
    Ok(LabeledExample {
        ids,
        target: Target::Span {
            start: offset + first,
            end: offset + last,
        },
    })
}

pub fn parse_record(vocab: &Vocab, line: &str) -> Result<LabeledExample> {
    let r: Record = serde_json::from_str(line).map_err(|e| Error::input(format!("bad record: {e}")))?;
    match (r.label, r.labels, r.answer_start_char, r.answer_text) {
        (Some(c), None, None, None) => Ok(LabeledExample {
            ids: encode_text(vocab, &r.text),
            target: Target::Class(c),
        }),
        (None, Some(l), None, None) => align_word_labels(vocab, &r.text, &l),
        (None, None, Some(s), Some(a)) => align_answer(vocab, r.question.as_deref(), &r.text, s, &a),
        (None, None, None, None) => Ok(LabeledExample {
            ids: encode_text(vocab, &r.text),
            target: Target::None,
        }),
        _ => Err(Error::input(
            "record must carry exactly one of label, labels or answer_start_char + answer_text",
        )),
    }
}

/// Reads line-delimited JSON records, skipping blank lines.
pub fn load_examples(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_record(vocab, &line).map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}
