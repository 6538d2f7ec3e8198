//! Token tables and byte-pair-encoding subwords.
//!
//! Ids 0..4 are reserved for `<pad>`, `<s>`, `</s>` and `<unk>`. In BPE
//! mode the last subword of every word carries the `</w>` marker, which
//! makes detokenization a matter of splitting at markers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const END_OF_WORD: &str = "</w>";

pub fn is_reserved(id: u32) -> bool {
    (id as usize) < RESERVED.len()
}

/// Bijective token/id table with the reserved tokens first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens followed by `tokens` in the given order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            vocab.push(r.to_string())?;
        }
        for t in tokens {
            let t = t.into();
            if RESERVED.contains(&t.as_str()) {
                bail!(Input, "token {t:?} collides with a reserved token");
            }
            vocab.push(t)?;
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> Result<()> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            bail!(Input, "invalid token {token:?}");
        }
        if self.index.contains_key(&token) {
            bail!(Input, "duplicate token {token:?}");
        }
        self.index.insert(token.clone(), self.tokens.len() as u32);
        self.tokens.push(token);
        Ok(())
    }

    /// Reserved tokens plus every symbol seen at least `min_freq` times, in
    /// lexicographic order. Sorting keeps ids stable across corpora that use
    /// the same symbol set.
    pub fn from_counts(counts: &BTreeMap<String, usize>, min_freq: usize) -> Result<Self> {
        Self::from_tokens(
            counts
                .iter()
                .filter(|(_, &c)| c >= min_freq.max(1))
                .map(|(t, _)| t.clone()),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("token id {id} out of range for vocabulary of {}", self.len())))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            bail!(Input, "{}: vocabulary must start with {:?}", path.display(), RESERVED);
        }
        Self::from_tokens(lines[RESERVED.len()..].iter().copied())
    }
}

/// Ordered merges; a merge's rank is its position.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::new();
        for (rank, pair) in pairs.iter().enumerate() {
            if ranks.insert(pair.clone(), rank).is_some() {
                bail!(Input, "duplicate merge {pair:?}");
            }
        }
        Ok(MergeTable { merges: pairs, ranks })
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Segments one word: lowest-rank adjacent pair first until no merge
    /// applies, then marks the final subword.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            symbols = merge_pair(&symbols, left, right);
        }
        if let Some(last) = symbols.last_mut() {
            last.push_str(END_OF_WORD);
        }
        symbols
    }

    /// `left right` per line, rank = line order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.merges.iter().map(|(l, r)| format!("{l} {r}\n")).collect();
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    pairs.push((l.to_string(), r.to_string()))
                }
                _ => bail!(Input, "{}:{}: expected `left right`", path.display(), i + 1),
            }
        }
        Self::from_pairs(pairs)
    }
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

fn word_counts<S: AsRef<str>>(corpus: &[S]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Greedy BPE: repeatedly merges the most frequent adjacent symbol pair
/// inside words, ties going to the lexicographically smallest pair. Stops
/// early once no pair occurs at least twice.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<MergeTable> {
    if corpus.is_empty() {
        bail!(Input, "cannot learn BPE merges from an empty corpus");
    }
    let mut words: Vec<(Vec<String>, usize)> = word_counts(corpus)
        .into_iter()
        .map(|(w, c)| (w.chars().map(String::from).collect(), c))
        .collect();
    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += count;
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so the first
        // maximum wins ties.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &count) in &pairs {
            if best.map_or(true, |(_, c)| count > c) {
                best = Some((pair, count));
            }
        }
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (l, r) = (l.to_string(), r.to_string());
        for (symbols, _) in words.iter_mut() {
            *symbols = merge_pair(symbols, &l, &r);
        }
        merges.push((l, r));
    }
    MergeTable::from_pairs(merges)
}

/// Text <-> id conversion. Without merges every whitespace token is a
/// vocabulary entry (word-level mode).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab: Vocab,
    pub merges: Option<MergeTable>,
}

impl Tokenizer {
    pub fn word_level<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        Ok(Tokenizer {
            vocab: Vocab::from_counts(&word_counts(corpus), min_freq)?,
            merges: None,
        })
    }

    /// Vocabulary of every subword produced by applying `merges` to `corpus`.
    pub fn bpe<S: AsRef<str>>(corpus: &[S], merges: MergeTable, min_freq: usize) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for (word, c) in word_counts(corpus) {
            for sub in merges.segment(&word) {
                *counts.entry(sub).or_insert(0) += c;
            }
        }
        Ok(Tokenizer {
            vocab: Vocab::from_counts(&counts, min_freq)?,
            merges: Some(merges),
        })
    }

    /// Subword strings of a sentence, without framing.
    pub fn pieces(&self, sentence: &str) -> Vec<String> {
        let words = sentence.split_whitespace();
        match &self.merges {
            None => words.map(String::from).collect(),
            Some(m) => words.flat_map(|w| m.segment(w)).collect(),
        }
    }

    /// `[BOS, ids..., EOS]`; unknown pieces become `UNK`.
    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.pieces(sentence).iter().map(|p| self.vocab.id(p)));
        ids.push(EOS);
        ids
    }

    /// Drops `PAD`/`BOS`/`EOS`, joins subwords at end-of-word markers and
    /// separates words with single spaces. `UNK` renders as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        let mut partial = String::new();
        for &id in ids {
            let tok = self.vocab.token(id)?;
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            if self.merges.is_none() || id == UNK {
                if !partial.is_empty() {
                    words.push(std::mem::take(&mut partial));
                }
                words.push(tok.to_string());
            } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                partial.push_str(stem);
                words.push(std::mem::take(&mut partial));
            } else {
                partial.push_str(tok);
            }
        }
        if !partial.is_empty() {
            words.push(partial);
        }
        Ok(words.join(" "))
    }
}
