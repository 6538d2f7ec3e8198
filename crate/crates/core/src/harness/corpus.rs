//! Parallel text files and synthetic translation tasks.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};

/// Line-aligned source and target sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelText {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl ParallelText {
    pub fn new(src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        if src.len() != tgt.len() {
            bail!(Input, "{} source lines but {} target lines", src.len(), tgt.len());
        }
        for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
            if s.trim().is_empty() || t.trim().is_empty() {
                bail!(Input, "pair {}: empty sentence", i + 1);
            }
        }
        Ok(ParallelText { src, tgt })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.src.iter().map(String::as_str).zip(self.tgt.iter().map(String::as_str))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub train: ParallelText,
    pub dev: ParallelText,
    pub test: ParallelText,
}

impl ParallelCorpus {
    pub fn split(&self, s: Split) -> &ParallelText {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut ParallelText {
        match s {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    /// Writes `{split}.src` and `{split}.tgt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for s in Split::ALL {
            let text = self.split(s);
            write_lines(&dir.join(format!("{}.src", s.name())), &text.src)?;
            write_lines(&dir.join(format!("{}.tgt", s.name())), &text.tgt)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut c = ParallelCorpus::default();
        for s in Split::ALL {
            *c.split_mut(s) = load_parallel(
                &dir.join(format!("{}.src", s.name())),
                &dir.join(format!("{}.tgt", s.name())),
            )?;
        }
        Ok(c)
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Loads two line-aligned files. Misalignment and empty lines are rejected
/// with the offending line number.
pub fn load_parallel(src_path: &Path, tgt_path: &Path) -> Result<ParallelText> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    let n = src.len().max(tgt.len());
    for i in 0..n {
        match (src.get(i), tgt.get(i)) {
            (Some(_), None) => bail!(Input, "line {}: {} has no matching target line", i + 1, src_path.display()),
            (None, Some(_)) => bail!(Input, "line {}: {} has no matching source line", i + 1, tgt_path.display()),
            (Some(s), Some(t)) => {
                if s.trim().is_empty() {
                    bail!(Input, "line {}: empty line in {}", i + 1, src_path.display());
                }
                if t.trim().is_empty() {
                    bail!(Input, "line {}: empty line in {}", i + 1, tgt_path.display());
                }
            }
            (None, None) => unreachable!(),
        }
    }
    Ok(ParallelText { src, tgt })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    MappedReverse,
    Sorted,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "mapped-reverse" => Ok(TaskKind::MappedReverse),
            "sorted" => Ok(TaskKind::Sorted),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::MappedReverse => "mapped-reverse",
            TaskKind::Sorted => "sorted",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: TaskKind,
    /// Number of distinct content words per language.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
    pub src_prefix: String,
    /// Target word prefix for `mapped-reverse`; the other kinds reuse the
    /// source words.
    pub tgt_prefix: String,
    /// Seed of the word bijection for `mapped-reverse`.
    pub map_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            kind: TaskKind::MappedReverse,
            vocab_size: 60,
            min_len: 3,
            max_len: 8,
            n_train: 5000,
            n_dev: 500,
            n_test: 500,
            seed: 1,
            src_prefix: "s".into(),
            tgt_prefix: "t".into(),
            map_seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            bail!(Config, "vocab_size must be at least 4, got {}", self.vocab_size);
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            bail!(Config, "invalid length range {}..={}", self.min_len, self.max_len);
        }
        if self.src_prefix.is_empty() || self.tgt_prefix.is_empty() {
            bail!(Config, "word prefixes must be non-empty");
        }
        if self.kind == TaskKind::MappedReverse && self.src_prefix == self.tgt_prefix {
            bail!(Config, "mapped-reverse needs distinct source and target prefixes");
        }
        Ok(())
    }

    /// Target index of each source word under the task's bijection.
    pub fn bijection(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.vocab_size).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(self.map_seed));
        perm
    }
}

/// Applies `kind` to a sentence of word indices.
pub fn transform(kind: TaskKind, words: &[usize], map: &[usize]) -> Vec<usize> {
    match kind {
        TaskKind::Copy => words.to_vec(),
        TaskKind::Reverse => words.iter().rev().copied().collect(),
        TaskKind::MappedReverse => words.iter().rev().map(|&w| map[w]).collect(),
        TaskKind::Sorted => {
            let mut v = words.to_vec();
            v.sort_unstable();
            v
        }
    }
}

fn render(prefix: &str, words: &[usize]) -> String {
    words.iter().map(|w| format!("{prefix}{w}")).collect::<Vec<_>>().join(" ")
}

/// Deterministic synthetic corpus with uniformly drawn words and lengths.
pub fn generate_synthetic_task(spec: &SyntheticSpec) -> Result<ParallelCorpus> {
    spec.validate()?;
    let map = spec.bijection();
    let tgt_prefix = if spec.kind == TaskKind::MappedReverse {
        spec.tgt_prefix.as_str()
    } else {
        spec.src_prefix.as_str()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |n: usize| {
        let mut text = ParallelText::default();
        for _ in 0..n {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
            text.src.push(render(&spec.src_prefix, &words));
            text.tgt.push(render(tgt_prefix, &transform(spec.kind, &words, &map)));
        }
        text
    };
    let train = make(spec.n_train);
    let dev = make(spec.n_dev);
    let test = make(spec.n_test);
    Ok(ParallelCorpus { train, dev, test })
}
