//! WordPiece tokenization: vocabulary training, linear-time matching,
//! detokenization and the vocabulary file format (one token per line,
//! line number = id).

mod matcher;
mod normalize;
mod train;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use matcher::{greedy_reference, FastMatcher};
pub use normalize::{pre_tokenize, NormalizerConfig, UnicodeForm, Word};
pub use train::{train_wordpiece, train_wordpiece_with_report, TrainingReport};

use crate::error::{Error, Result};

/// Reserved ids at the head of every vocabulary.
pub mod special {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const CLS: u32 = 2;
    pub const SEP: u32 = 3;
    pub const MASK: u32 = 4;
    pub const COUNT: usize = 5;
    pub const TOKENS: [&str; COUNT] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
}

pub const CONTINUATION: &str = "##";

/// One emitted token with char offsets into the normalized text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSpan {
    pub id: u32,
    pub word: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    matcher: FastMatcher,
    normalizer: NormalizerConfig,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.normalizer == other.normalizer
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>, normalizer: NormalizerConfig) -> Result<Self> {
        if tokens.len() < special::COUNT || tokens[..special::COUNT] != special::TOKENS {
            return Err(Error::input(format!(
                "vocabulary must start with {:?}",
                special::TOKENS
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t == CONTINUATION || t.chars().any(char::is_whitespace) {
                return Err(Error::input(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::input(format!("duplicate token {t:?} at id {i}")));
            }
        }
        let matcher = FastMatcher::build(
            tokens
                .iter()
                .enumerate()
                .skip(special::COUNT)
                .map(|(i, t)| (i as u32, t.as_str())),
        );
        Ok(Self {
            tokens,
            index,
            matcher,
            normalizer,
        })
    }

    pub fn load(path: impl AsRef<Path>, normalizer: NormalizerConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_text(&text, normalizer)
    }

    pub fn from_file_text(text: &str, normalizer: NormalizerConfig) -> Result<Self> {
        let tokens = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens, normalizer)
    }

    pub fn to_file_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_text()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn checksum(&self) -> String {
        Sha256::digest(self.to_file_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn normalizer(&self) -> &NormalizerConfig {
        &self.normalizer
    }

    pub fn normalize(&self, text: &str) -> String {
        self.normalizer.normalize(text)
    }

    /// Fast match of one pre-tokenized word; `None` means the word maps to
    /// `[UNK]`.
    pub fn match_word(&self, word: &str) -> Option<Vec<u32>> {
        self.matcher.match_word(word)
    }

    /// Quadratic greedy longest-match-first reference for one word.
    pub fn greedy_word(&self, word: &str) -> Option<Vec<u32>> {
        greedy_reference(word, |s| self.id(s).filter(|&id| id as usize >= special::COUNT))
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let norm = self.normalize(text);
        let mut out = Vec::new();
        for w in pre_tokenize(&norm) {
            match self.match_word(w.text) {
                Some(ids) => out.extend(ids),
                None => out.push(special::UNK),
            }
        }
        out
    }

    /// Tokenizes with the greedy reference instead of the trie.
    pub fn tokenize_reference(&self, text: &str) -> Vec<u32> {
        let norm = self.normalize(text);
        let mut out = Vec::new();
        for w in pre_tokenize(&norm) {
            match self.greedy_word(w.text) {
                Some(ids) => out.extend(ids),
                None => out.push(special::UNK),
            }
        }
        out
    }

    /// Returns the normalized text and each token's char span within it.
    pub fn tokenize_with_offsets(&self, text: &str) -> (String, Vec<TokenSpan>) {
        let norm = self.normalize(text);
        let mut spans = Vec::new();
        for (wi, w) in pre_tokenize(&norm).into_iter().enumerate() {
            match self.match_word(w.text) {
                Some(ids) => {
                    let mut pos = w.start;
                    for id in ids {
                        let tok = &self.tokens[id as usize];
                        let n = tok.strip_prefix(CONTINUATION).unwrap_or(tok).chars().count();
                        spans.push(TokenSpan {
                            id,
                            word: wi,
                            start: pos,
                            end: pos + n,
                        });
                        pos += n;
                    }
                }
                None => spans.push(TokenSpan {
                    id: special::UNK,
                    word: wi,
                    start: w.start,
                    end: w.end,
                }),
            }
        }
        (norm, spans)
    }

    /// Joins tokens back into text: continuations attach to the previous
    /// token, heads are space-separated, special tokens are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::input(format!("token id {id} out of range for vocab size {}", self.len())))?;
            if (id as usize) < special::COUNT {
                continue;
            }
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }
}
