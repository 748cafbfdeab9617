use std::fmt;
use std::str::FromStr;

use unicode_normalization::UnicodeNormalization;

use crate::error::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UnicodeForm {
    None,
    #[default]
    Nfc,
    Nfd,
    Nfkc,
    Nfkd,
}

impl fmt::Display for UnicodeForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnicodeForm::None => "none",
            UnicodeForm::Nfc => "nfc",
            UnicodeForm::Nfd => "nfd",
            UnicodeForm::Nfkc => "nfkc",
            UnicodeForm::Nfkd => "nfkd",
        })
    }
}

impl FromStr for UnicodeForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(UnicodeForm::None),
            "nfc" => Ok(UnicodeForm::Nfc),
            "nfd" => Ok(UnicodeForm::Nfd),
            "nfkc" => Ok(UnicodeForm::Nfkc),
            "nfkd" => Ok(UnicodeForm::Nfkd),
            other => Err(Error::config(format!("unknown unicode form {other:?}"))),
        }
    }
}

/// Text clean-up applied before pre-tokenization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormalizerConfig {
    pub unicode_form: UnicodeForm,
    pub lowercase: bool,
    pub collapse_whitespace: bool,
    pub strip_control: bool,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        Self {
            unicode_form: UnicodeForm::Nfc,
            lowercase: false,
            collapse_whitespace: true,
            strip_control: true,
        }
    }
}

impl NormalizerConfig {
    /// Control stripping, lowercasing, Unicode normalization, then
    /// whitespace collapsing. Idempotent.
    pub fn normalize(&self, text: &str) -> String {
        let mut s: String = if self.strip_control {
            text.chars().filter(|c| !c.is_control() || c.is_whitespace()).collect()
        } else {
            text.to_string()
        };
        if self.lowercase {
            s = s.to_lowercase();
        }
        s = match self.unicode_form {
            UnicodeForm::None => s,
            UnicodeForm::Nfc => s.nfc().collect(),
            UnicodeForm::Nfd => s.nfd().collect(),
            UnicodeForm::Nfkc => s.nfkc().collect(),
            UnicodeForm::Nfkd => s.nfkd().collect(),
        };
        if self.collapse_whitespace {
            let mut out = String::with_capacity(s.len());
            for w in s.split_whitespace() {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(w);
            }
            s = out;
        }
        s
    }
}

pub(crate) fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c,
            '\u{00A1}'..='\u{00BF}'
            | '\u{05BE}' | '\u{05C0}' | '\u{05C3}' | '\u{05C6}' | '\u{05F3}' | '\u{05F4}'
            | '\u{2010}'..='\u{2027}'
            | '\u{2030}'..='\u{205E}'
            | '\u{3000}'..='\u{303F}'
            | '\u{FF01}'..='\u{FF0F}')
}

/// A pre-tokenized word with char offsets into the normalized text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace and isolates each punctuation character.
pub fn pre_tokenize<'a>(text: &'a str) -> Vec<Word<'a>> {
    let mut words = Vec::new();
    let mut cur: Option<(usize, usize)> = None; // (byte start, char start)
    let mut char_idx = 0;
    let flush = |cur: &mut Option<(usize, usize)>, words: &mut Vec<Word<'a>>, byte_end: usize, char_end: usize| {
        if let Some((b, c)) = cur.take() {
            words.push(Word {
                text: &text[b..byte_end],
                start: c,
                end: char_end,
            });
        }
    };
    for (b, ch) in text.char_indices() {
        if ch.is_whitespace() {
            flush(&mut cur, &mut words, b, char_idx);
        } else if is_punctuation(ch) {
            flush(&mut cur, &mut words, b, char_idx);
            words.push(Word {
                text: &text[b..b + ch.len_utf8()],
                start: char_idx,
                end: char_idx + 1,
            });
        } else if cur.is_none() {
            cur = Some((b, char_idx));
        }
        char_idx += 1;
    }
    flush(&mut cur, &mut words, text.len(), char_idx);
    words
}
