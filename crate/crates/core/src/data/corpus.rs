use std::path::{Path, PathBuf};

use rand::Rng;

use super::{cached_documents, ingest, open_cache, Document};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::Vocab;

/// A re-iterable document source; each call starts a fresh pass.
pub trait Corpus {
    fn documents(&self) -> Box<dyn Iterator<Item = Result<Document>> + '_>;
}

impl Corpus for [Document] {
    fn documents(&self) -> Box<dyn Iterator<Item = Result<Document>> + '_> {
        Box::new(self.iter().cloned().map(Ok))
    }
}

impl Corpus for Vec<Document> {
    fn documents(&self) -> Box<dyn Iterator<Item = Result<Document>> + '_> {
        self.as_slice().documents()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedFile {
    pub path: PathBuf,
    pub weight: f64,
}

impl WeightedFile {
    /// Parses `path` or `path:weight`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Some((p, w)) = spec.rsplit_once(':') {
            if let Ok(weight) = w.trim().parse::<f64>() {
                if !(weight > 0.0 && weight.is_finite()) {
                    return Err(Error::config(format!("weight for {p} must be positive, got {w}")));
                }
                return Ok(Self {
                    path: PathBuf::from(p.trim()),
                    weight,
                });
            }
        }
        Ok(Self {
            path: PathBuf::from(spec),
            weight: 1.0,
        })
    }
}

/// Text files interleaved document by document: the next document comes
/// from a source drawn with probability proportional to its weight among
/// sources not yet exhausted. The draw sequence depends only on `seed`, so
/// every pass yields the same order.
pub struct FileCorpus {
    files: Vec<WeightedFile>,
    vocab: Vocab,
    seed: u64,
    cache_dir: Option<PathBuf>,
}

impl FileCorpus {
    /// With `cache_dir`, each file is tokenized once into a cache that is
    /// rebuilt whenever the vocabulary changes.
    pub fn new(files: Vec<WeightedFile>, vocab: Vocab, seed: u64, cache_dir: Option<PathBuf>) -> Result<Self> {
        if files.is_empty() {
            return Err(Error::config("no corpus files given"));
        }
        for f in &files {
            if !f.path.is_file() {
                return Err(Error::io(
                    &f.path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "corpus file not found"),
                ));
            }
        }
        if let Some(dir) = &cache_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for f in &files {
                cached_documents(&cache_path(dir, &f.path), &[&f.path], &vocab)?;
            }
        }
        Ok(Self {
            files,
            vocab,
            seed,
            cache_dir,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn source(&self, f: &WeightedFile) -> Box<dyn Iterator<Item = Result<Document>> + '_> {
        match &self.cache_dir {
            Some(dir) => match open_cache(&cache_path(dir, &f.path), &self.vocab) {
                Ok(Some(r)) => Box::new(r),
                Ok(None) => Box::new(std::iter::once(Err(Error::Format {
                    offset: 12,
                    msg: format!("token cache for {} is stale", f.path.display()),
                }))),
                Err(e) => Box::new(std::iter::once(Err(e))),
            },
            None => Box::new(ingest(&[&f.path], &self.vocab)),
        }
    }
}

fn cache_path(dir: &Path, file: &Path) -> PathBuf {
    let key = rng::derive_seed(0, &file.display().to_string(), &[]);
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dir.join(format!("{stem}-{key:016x}.tok"))
}

impl Corpus for FileCorpus {
    fn documents(&self) -> Box<dyn Iterator<Item = Result<Document>> + '_> {
        if self.files.len() == 1 {
            return self.source(&self.files[0]);
        }
        let sources: Vec<_> = self.files.iter().map(|f| (self.source(f), f.weight)).collect();
        Box::new(Mixture {
            sources,
            rng: rng::stream(self.seed, rng::MIXTURE, &[]),
        })
    }
}

type Source<'a> = (Box<dyn Iterator<Item = Result<Document>> + 'a>, f64);

struct Mixture<'a> {
    sources: Vec<Source<'a>>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Iterator for Mixture<'_> {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.sources.is_empty() {
            let total: f64 = self.sources.iter().map(|s| s.1).sum();
            let mut x = self.rng.random::<f64>() * total;
            let mut pick = self.sources.len() - 1;
            for (i, s) in self.sources.iter().enumerate() {
                if x < s.1 {
                    pick = i;
                    break;
                }
                x -= s.1;
            }
            match self.sources[pick].0.next() {
                Some(d) => return Some(d),
                None => {
                    drop(self.sources.remove(pick));
                }
            }
        }
        None
    }
}
