//! Corpus BLEU with a single reference per hypothesis.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use crate::error::{bail, Result};

/// Clipped n-gram matches over the corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NgramPrecision {
    pub n: usize,
    pub clipped: u64,
    pub total: u64,
}

impl NgramPrecision {
    /// `clipped / total`, or 0 when the hypotheses hold no n-grams.
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clipped as f64 / self.total as f64
        }
    }

    pub fn zero_denominator(&self) -> bool {
        self.total == 0
    }

    /// Raw counts as `clipped/total`.
    pub fn fraction(&self) -> String {
        format!("{}/{}", self.clipped, self.total)
    }
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_aligned<T>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<()> {
    if hyps.len() != refs.len() {
        bail!(Input, "{} hypotheses but {} references", hyps.len(), refs.len());
    }
    Ok(())
}

pub fn modified_ngram_precision<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<NgramPrecision> {
    if n < 1 {
        bail!(Input, "n-gram order must be at least 1");
    }
    check_aligned(hyps, refs)?;
    let mut clipped = 0;
    let mut total = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let rc = ngram_counts(r, n);
        for (g, c) in ngram_counts(h, n) {
            clipped += c.min(rc.get(g).copied().unwrap_or(0));
            total += c;
        }
    }
    Ok(NgramPrecision { n, clipped, total })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub precisions: Vec<NgramPrecision>,
    pub brevity_penalty: f64,
    pub bleu: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub smoothed: bool,
}

impl BleuReport {
    pub fn p(&self, n: usize) -> f64 {
        self.precisions[n - 1].value()
    }
}

/// Brevity penalty for total candidate length `c` and reference length `r`.
pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Uniformly weighted geometric mean of `p_1..p_max_n` times the brevity
/// penalty. Smoothing adds one to the clipped and total counts for `n > 1`.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize, smoothing: bool) -> Result<BleuReport> {
    check_aligned(hyps, refs)?;
    if hyps.is_empty() {
        bail!(Input, "empty corpus");
    }
    if max_n < 1 {
        bail!(Input, "n-gram order must be at least 1");
    }
    let precisions = (1..=max_n)
        .map(|n| modified_ngram_precision(hyps, refs, n))
        .collect::<Result<Vec<_>>>()?;
    let hyp_len = hyps.iter().map(Vec::len).sum();
    let ref_len = refs.iter().map(Vec::len).sum();
    let bp = brevity_penalty(hyp_len, ref_len);
    let mut log_sum = 0.0;
    let mut zero = false;
    for p in &precisions {
        let (c, t) = if smoothing && p.n > 1 {
            (p.clipped + 1, p.total + 1)
        } else {
            (p.clipped, p.total)
        };
        if c == 0 {
            zero = true;
            break;
        }
        log_sum += (c as f64 / t as f64).ln() / max_n as f64;
    }
    let bleu = if zero || bp == 0.0 { 0.0 } else { bp * log_sum.exp() };
    Ok(BleuReport {
        precisions,
        brevity_penalty: bp,
        bleu: bleu.clamp(0.0, 1.0),
        hyp_len,
        ref_len,
        smoothed: smoothing,
    })
}

/// Sentences whose source length lies in `[lo, hi)`; `hi` is `None` for the
/// last, open-ended bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    pub lo: usize,
    pub hi: Option<usize>,
    pub n_sentences: usize,
    /// `None` when the bucket is empty.
    pub report: Option<BleuReport>,
}

impl BucketReport {
    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("{}-{}", self.lo, hi - 1),
            None => format!("{}+", self.lo),
        }
    }
}

/// Groups sentences by source length at the given strictly increasing edges.
/// Sentences shorter than the first edge are left out.
pub fn length_bucket_report<T: Eq + Hash + Clone>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    src_lens: &[usize],
    edges: &[usize],
) -> Result<Vec<BucketReport>> {
    check_aligned(hyps, refs)?;
    if src_lens.len() != hyps.len() {
        bail!(Input, "{} source lengths for {} hypotheses", src_lens.len(), hyps.len());
    }
    if edges.is_empty() {
        bail!(Input, "no bucket edges");
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        bail!(Input, "bucket edges {edges:?} are not strictly increasing");
    }
    let mut out = Vec::with_capacity(edges.len());
    for (i, &lo) in edges.iter().enumerate() {
        let hi = edges.get(i + 1).copied();
        let idx: Vec<usize> = (0..hyps.len())
            .filter(|&k| src_lens[k] >= lo && hi.is_none_or(|h| src_lens[k] < h))
            .collect();
        let report = if idx.is_empty() {
            None
        } else {
            let h: Vec<Vec<T>> = idx.iter().map(|&k| hyps[k].clone()).collect();
            let r: Vec<Vec<T>> = idx.iter().map(|&k| refs[k].clone()).collect();
            Some(corpus_bleu(&h, &r, 4, false)?)
        };
        out.push(BucketReport {
            lo,
            hi,
            n_sentences: idx.len(),
            report,
        });
    }
    Ok(out)
}

/// `bucket,p1,p2,p3,p4,bp,bleu,n_sentences`, precisions as raw fractions.
pub fn bucket_csv(buckets: &[BucketReport]) -> String {
    let mut s = String::from("bucket,p1,p2,p3,p4,bp,bleu,n_sentences\n");
    for b in buckets {
        match &b.report {
            Some(r) => {
                let _ = write!(s, "{}", b.label());
                for n in 1..=4 {
                    let f = r.precisions.get(n - 1).map_or(String::new(), NgramPrecision::fraction);
                    let _ = write!(s, ",{f}");
                }
                let _ = writeln!(s, ",{:.6},{:.6},{}", r.brevity_penalty, r.bleu, b.n_sentences);
            }
            None => {
                let _ = writeln!(s, "{},,,,,,empty,0", b.label());
            }
        }
    }
    s
}

/// Whitespace tokens of each line.
pub fn split_lines<S: AsRef<str>>(lines: &[S]) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| l.as_ref().split_whitespace().map(str::to_owned).collect())
        .collect()
}
