use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DocId {
    pub source: String,
    pub ordinal: u64,
}

/// One tokenized document, without special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: DocId,
    pub ids: Vec<u32>,
}

impl Document {
    pub fn new(source: impl Into<String>, ordinal: u64, ids: Vec<u32>) -> Self {
        Self {
            id: DocId {
                source: source.into(),
                ordinal,
            },
            ids,
        }
    }
}

struct OpenFile {
    path: PathBuf,
    reader: BufReader<File>,
    offset: u64,
    ordinal: u64,
}

/// Streams documents out of UTF-8 text files. Documents are separated by
/// blank lines; documents that tokenize to nothing are skipped. Memory use
/// is bounded by the largest single document.
pub struct Ingest<'v> {
    vocab: &'v Vocab,
    pending: std::vec::IntoIter<PathBuf>,
    current: Option<OpenFile>,
    line: Vec<u8>,
    paragraph: String,
    failed: bool,
}

pub fn ingest<'v, P: AsRef<Path>>(paths: &[P], vocab: &'v Vocab) -> Ingest<'v> {
    Ingest {
        vocab,
        pending: paths
            .iter()
            .map(|p| p.as_ref().to_path_buf())
            .collect::<Vec<_>>()
            .into_iter(),
        current: None,
        line: Vec::new(),
        paragraph: String::new(),
        failed: false,
    }
}

impl Ingest<'_> {
    fn emit(&mut self) -> Option<Document> {
        let file = self.current.as_mut()?;
        if self.paragraph.is_empty() {
            return None;
        }
        let ids = self.vocab.tokenize(&self.paragraph);
        self.paragraph.clear();
        if ids.is_empty() {
            return None;
        }
        let doc = Document::new(file.path.display().to_string(), file.ordinal, ids);
        file.ordinal += 1;
        Some(doc)
    }

    fn next_inner(&mut self) -> Result<Option<Document>> {
        loop {
            if self.current.is_none() {
                let Some(path) = self.pending.next() else { return Ok(None) };
                let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
                self.current = Some(OpenFile {
                    path,
                    reader: BufReader::new(f),
                    offset: 0,
                    ordinal: 0,
                });
            }
            let file = self.current.as_mut().expect("open file");
            self.line.clear();
            let n = file
                .reader
                .read_until(b'\n', &mut self.line)
                .map_err(|e| Error::io(&file.path, e))?;
            if n == 0 {
                let doc = self.emit();
                self.current = None;
                if doc.is_some() {
                    return Ok(doc);
                }
                continue;
            }
            let text = std::str::from_utf8(&self.line).map_err(|e| Error::Decode {
                path: file.path.clone(),
                offset: file.offset + e.valid_up_to() as u64,
            })?;
            file.offset += n as u64;
            if text.trim().is_empty() {
                if let Some(doc) = self.emit() {
                    return Ok(Some(doc));
                }
            } else {
                self.paragraph.push_str(text);
            }
        }
    }
}

impl Iterator for Ingest<'_> {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.next_inner() {
            Ok(doc) => doc.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_wordpiece, NormalizerConfig};
    use std::io::Write;

    fn vocab() -> Vocab {
        train_wordpiece(["hello world foo bar"], 64, NormalizerConfig::default()).unwrap()
    }

    #[test]
    fn paragraphs_become_documents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "hello world\nfoo\n\n  \nbar bar\n").unwrap();
        let e = dir.path().join("empty.txt");
        std::fs::write(&e, "").unwrap();
        let v = vocab();
        let docs: Vec<Document> = ingest(&[&p], &v).collect::<Result<_>>().unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].ids, v.tokenize("hello world foo"));
        assert_eq!(docs[1].id.ordinal, 1);
        assert_eq!(ingest(&[&e], &v).count(), 0);
    }

    #[test]
    fn missing_file_names_path() {
        let v = vocab();
        let err = ingest(&["/nonexistent/corpus.txt"], &v).next().unwrap().unwrap_err();
        assert!(err.to_string().contains("/nonexistent/corpus.txt"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn invalid_utf8_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        let mut f = File::create(&p).unwrap();
        f.write_all(b"hello\nwor\xffld\n").unwrap();
        let v = vocab();
        let err = ingest(&[&p], &v).find_map(|r| r.err()).unwrap();
        match err {
            Error::Decode { offset, .. } => assert_eq!(offset, 9),
            other => panic!("unexpected {other}"),
        }
    }
}
