//! Run configuration: flat `key = value` lines grouped under `[section]`
//! headers. `#` starts a comment line.
//!
//! ```text
//! [run]
//! seed = 42
//! out_dir = runs/toy
//! dtype = f32
//!
//! [tokenizer]
//! vocab = vocab.txt
//!
//! [data]
//! files = en.txt:0.6, he.txt:0.4
//!
//! [phase.1]
//! window = 1024
//! steps = 1000
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file. [`RunConfig::to_text`] writes every value, defaults included.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{MaskingConfig, WeightedFile};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::tokenizer::{NormalizerConfig, Vocab};
use crate::trainer::{AdamWConfig, Phase, PhasePlan, ScheduleConfig};

pub type Sections = BTreeMap<String, BTreeMap<String, String>>;

pub fn parse_sections(text: &str) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            if out.contains_key(&name) {
                return Err(Error::config(format!("line {}: section [{name}] repeated", n + 1)));
            }
            out.insert(name.clone(), BTreeMap::new());
            current = Some(name);
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        let section = current
            .as_ref()
            .ok_or_else(|| Error::config(format!("line {}: key outside any section", n + 1)))?;
        let map = out.get_mut(section).expect("section exists");
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: key {} repeated in [{section}]", n + 1, k.trim())));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(Error::config(format!("dtype must be f32 or f64, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dtype: Dtype,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub vocab_path: PathBuf,
    pub normalizer: NormalizerConfig,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub optim: AdamWConfig,
    pub files: Vec<WeightedFile>,
    pub cache_dir: Option<PathBuf>,
    pub plan: PhasePlan,
}

/// Typed access to one section that tracks which keys were consumed.
struct Section<'a> {
    name: &'a str,
    map: BTreeMap<String, String>,
}

impl<'a> Section<'a> {
    fn new(all: &mut Sections, name: &'a str) -> Self {
        Self {
            name,
            map: all.remove(name).unwrap_or_default(),
        }
    }

    fn get<V: FromStr>(&mut self, key: &str, default: Option<V>) -> Result<V> {
        match self.map.remove(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::config(format!("invalid value for {}.{key}: {raw:?}", self.name))),
            None => default.ok_or_else(|| Error::config(format!("missing {}.{key}", self.name))),
        }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::config(format!("unknown key {}.{k}", self.name))),
            None => Ok(()),
        }
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = std::fs::canonicalize(if base.as_os_str().is_empty() { Path::new(".") } else { &base })
            .map_err(|e| Error::io(&base, e))?;
        Self::from_text(&text, &base)
    }

    /// Parses `text`; the vocabulary file is read to size the model.
    pub fn from_text(text: &str, base: &Path) -> Result<Self> {
        let mut all = parse_sections(text)?;

        let mut run = Section::new(&mut all, "run");
        let seed = run.get("seed", Some(0u64))?;
        let out_dir = resolve(base, &run.get::<String>("out_dir", None)?);
        let dtype = run.get("dtype", Some(Dtype::F32))?;
        let checkpoint_every = run.get("checkpoint_every", Some(0u64))?;
        let clip_norm = run.get("clip_norm", Some(1.0f64))?;
        run.finish()?;

        let mut tok = Section::new(&mut all, "tokenizer");
        let vocab_path = resolve(base, &tok.get::<String>("vocab", None)?);
        let d = NormalizerConfig::default();
        let normalizer = NormalizerConfig {
            unicode_form: tok.get("unicode_form", Some(d.unicode_form))?,
            lowercase: tok.get("lowercase", Some(d.lowercase))?,
            collapse_whitespace: tok.get("collapse_whitespace", Some(d.collapse_whitespace))?,
            strip_control: tok.get("strip_control", Some(d.strip_control))?,
        };
        tok.finish()?;
        let vocab = Vocab::load(&vocab_path, normalizer)?;

        let model_map = all.remove("model").unwrap_or_default();
        let model = ModelConfig::from_map(&model_map, Some(vocab.len()))?;

        let mut mask = Section::new(&mut all, "masking");
        let md = MaskingConfig::default();
        let masking = MaskingConfig {
            mask_rate: mask.get("mask_rate", Some(md.mask_rate))?,
            mask_replace_prob: mask.get("mask_replace_prob", Some(md.mask_replace_prob))?,
            seed,
        };
        mask.finish()?;
        masking.validate()?;

        let mut opt = Section::new(&mut all, "optimizer");
        let od = AdamWConfig::default();
        let optim = AdamWConfig {
            beta1: opt.get("beta1", Some(od.beta1))?,
            beta2: opt.get("beta2", Some(od.beta2))?,
            eps: opt.get("eps", Some(od.eps))?,
            weight_decay: opt.get("weight_decay", Some(od.weight_decay))?,
        };
        opt.finish()?;
        optim.validate()?;

        let mut data = Section::new(&mut all, "data");
        let files = data
            .get::<String>("files", None)?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                WeightedFile::parse(s).map(|f| WeightedFile {
                    path: resolve(base, &f.path.to_string_lossy()),
                    weight: f.weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if files.is_empty() {
            return Err(Error::config("data.files lists no files"));
        }
        let cache_dir = data.raw("cache").map(|c| resolve(base, &c));
        data.finish()?;

        let mut phase_names: Vec<(usize, String)> = Vec::new();
        for name in all.keys() {
            let idx = name
                .strip_prefix("phase.")
                .and_then(|i| i.parse::<usize>().ok())
                .ok_or_else(|| Error::config(format!("unknown section [{name}]")))?;
            phase_names.push((idx, name.clone()));
        }
        phase_names.sort();
        if phase_names.is_empty() {
            return Err(Error::config("no [phase.N] sections"));
        }
        let mut phases = Vec::new();
        for (k, (idx, name)) in phase_names.iter().enumerate() {
            if *idx != k + 1 {
                return Err(Error::config(format!("phase sections must be numbered 1, 2, ...; found [{name}]")));
            }
            let mut s = Section::new(&mut all, name);
            let default_window = if k == 0 { 1024 } else { 4096 };
            let default_lr = if k == 0 { 6e-3 } else { 1e-4 };
            let total_steps = s.get::<u64>("steps", None)?;
            phases.push(Phase {
                window: s.get("window", Some(default_window))?,
                batch_size: s.get("batch_size", Some(8))?,
                schedule: ScheduleConfig {
                    warmup_steps: s.get("warmup_steps", Some(500))?,
                    max_lr: s.get("max_lr", Some(default_lr))?,
                    min_lr: s.get("min_lr", Some(0.0))?,
                    total_steps,
                },
            });
            s.finish()?;
        }
        let plan = PhasePlan { phases };
        plan.validate()?;

        Ok(Self {
            seed,
            out_dir,
            dtype,
            checkpoint_every,
            clip_norm,
            vocab_path,
            normalizer,
            model,
            masking,
            optim,
            files,
            cache_dir,
            plan,
        })
    }

    /// Every setting, defaults materialized, paths absolute.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "dtype = {}", self.dtype);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "clip_norm = {:?}", self.clip_norm);
        let n = &self.normalizer;
        let _ = writeln!(s, "\n[tokenizer]");
        let _ = writeln!(s, "vocab = {}", self.vocab_path.display());
        let _ = writeln!(s, "unicode_form = {}", n.unicode_form);
        let _ = writeln!(s, "lowercase = {}", n.lowercase);
        let _ = writeln!(s, "collapse_whitespace = {}", n.collapse_whitespace);
        let _ = writeln!(s, "strip_control = {}", n.strip_control);
        let _ = writeln!(s, "\n[model]");
        s.push_str(&self.model.to_kv());
        let _ = writeln!(s, "\n[masking]");
        let _ = writeln!(s, "mask_rate = {:?}", self.masking.mask_rate);
        let _ = writeln!(s, "mask_replace_prob = {:?}", self.masking.mask_replace_prob);
        let o = &self.optim;
        let _ = writeln!(s, "\n[optimizer]");
        let _ = writeln!(s, "beta1 = {:?}", o.beta1);
        let _ = writeln!(s, "beta2 = {:?}", o.beta2);
        let _ = writeln!(s, "eps = {:?}", o.eps);
        let _ = writeln!(s, "weight_decay = {:?}", o.weight_decay);
        let _ = writeln!(s, "\n[data]");
        let files: Vec<String> = self
            .files
            .iter()
            .map(|f| format!("{}:{:?}", f.path.display(), f.weight))
            .collect();
        let _ = writeln!(s, "files = {}", files.join(", "));
        if let Some(c) = &self.cache_dir {
            let _ = writeln!(s, "cache = {}", c.display());
        }
        for (i, p) in self.plan.phases.iter().enumerate() {
            let _ = writeln!(s, "\n[phase.{}]", i + 1);
            let _ = writeln!(s, "window = {}", p.window);
            let _ = writeln!(s, "batch_size = {}", p.batch_size);
            let _ = writeln!(s, "steps = {}", p.schedule.total_steps);
            let _ = writeln!(s, "warmup_steps = {}", p.schedule.warmup_steps);
            let _ = writeln!(s, "max_lr = {:?}", p.schedule.max_lr);
            let _ = writeln!(s, "min_lr = {:?}", p.schedule.min_lr);
        }
        s
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::load(&self.vocab_path, self.normalizer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        let v = crate::tokenizer::train_wordpiece(["hello world"], 30, NormalizerConfig::default()).unwrap();
        v.save(dir.path().join("vocab.txt")).unwrap();
        std::fs::write(dir.path().join("c.txt"), "hello world\n").unwrap();
        let text = "[run]\nseed = 7\nout_dir = out\n\n[tokenizer]\nvocab = vocab.txt\n\n[model]\ndepth = 1\nwidth = 16\nnum_heads = 2\n\n[data]\nfiles = c.txt:2\n\n[phase.1]\nwindow = 32\nsteps = 10\nwarmup_steps = 2\n"
            .to_string();
        (dir, text)
    }

    #[test]
    fn resolved_text_roundtrips() {
        let (dir, text) = setup();
        let cfg = RunConfig::from_text(&text, dir.path()).unwrap();
        assert_eq!(cfg.model.vocab_size, cfg.vocab().unwrap().len());
        assert_eq!(cfg.files[0].weight, 2.0);
        assert_eq!(cfg.plan.phases[0].schedule.max_lr, 6e-3);
        let resolved = cfg.to_text();
        let again = RunConfig::from_text(&resolved, Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), resolved);
    }

    #[test]
    fn rejects_bad_configs() {
        let (dir, text) = setup();
        let bad = text.replace("seed = 7", "seed = 7\ncolour = red");
        assert!(matches!(RunConfig::from_text(&bad, dir.path()), Err(Error::Config(_))));
        let shrink = format!("{text}\n[phase.2]\nwindow = 16\nsteps = 10\nwarmup_steps = 2\n");
        assert!(matches!(RunConfig::from_text(&shrink, dir.path()), Err(Error::Config(_))));
        let gap = text.replace("[phase.1]", "[phase.2]");
        assert!(RunConfig::from_text(&gap, dir.path()).is_err());
        assert!(parse_sections("x = 1").is_err());
    }
}
