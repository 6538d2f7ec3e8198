//! Training objectives: target likelihood through `D1`, source
//! reconstruction through `D2` (clean, word-order noised, and REINFORCE
//! with a cosine embedding reward).
//!
//! Every loss is normalised per predicted token. `D1` losses bind only
//! encoder and `dec1` parameters; `D2` losses only encoder and `dec2`, so
//! gradient maps never carry keys from the other decoder.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::model::{self, Ctx, Decoder, Model};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};
use crate::vocab::{is_reserved, BOS, EOS};

/// Aligned sentence pairs, each BOS/EOS framed.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
}

impl Batch {
    pub fn new(src: Vec<Vec<u32>>, tgt: Vec<Vec<u32>>) -> Result<Self> {
        if src.len() != tgt.len() {
            bail!(Input, "{} sources but {} targets", src.len(), tgt.len());
        }
        for seq in src.iter().chain(&tgt) {
            if seq.len() < 2 || seq[0] != BOS || seq[seq.len() - 1] != EOS {
                bail!(Input, "sequence {seq:?} is not BOS/EOS framed");
            }
        }
        Ok(Batch { src, tgt })
    }

    /// Reconstruction batch: the target is a copy of the source.
    pub fn monolingual(src: Vec<Vec<u32>>) -> Result<Self> {
        let tgt = src.clone();
        Self::new(src, tgt)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Dropout setting and mask seed for one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassMode {
    pub dropout: f32,
    pub seed: u64,
}

impl PassMode {
    pub const EVAL: PassMode = PassMode { dropout: 0.0, seed: 0 };

    fn ctx<'m>(&self, model: &'m Model) -> Ctx<'m, f32> {
        if self.dropout > 0.0 {
            Ctx::train(model, self.dropout, self.seed)
        } else {
            Ctx::eval(model)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f32,
    pub grads: BTreeMap<String, Tensor<f32>>,
    pub tokens: usize,
}

fn finish(ctx: Ctx<f32>, loss: NodeId, tokens: usize) -> Result<LossOutput> {
    let value = ctx.graph.value(loss).item();
    let grads = ctx.graph.backward(loss)?.into_params();
    Ok(LossOutput {
        loss: value,
        grads,
        tokens,
    })
}

fn non_empty(batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        bail!(Input, "empty batch");
    }
    Ok(())
}

/// Target-side likelihood through `D1`.
pub fn graph_j1<T: Scalar>(ctx: &mut Ctx<T>, batch: &Batch) -> Result<(NodeId, usize)> {
    non_empty(batch)?;
    model::teacher_forced_loss(ctx, Decoder::D1, &batch.src, &batch.tgt)
}

pub fn loss_j1(model: &Model, batch: &Batch, mode: PassMode) -> Result<LossOutput> {
    let mut ctx = mode.ctx(model);
    let (loss, n) = graph_j1(&mut ctx, batch)?;
    finish(ctx, loss, n)
}

/// Source reconstruction through `D2`.
pub fn graph_j2<T: Scalar>(ctx: &mut Ctx<T>, src: &[Vec<u32>]) -> Result<(NodeId, usize)> {
    if src.is_empty() {
        bail!(Input, "empty batch");
    }
    model::teacher_forced_loss(ctx, Decoder::D2, src, src)
}

pub fn loss_j2(model: &Model, src: &[Vec<u32>], mode: PassMode) -> Result<LossOutput> {
    let mut ctx = mode.ctx(model);
    let (loss, n) = graph_j2(&mut ctx, src)?;
    finish(ctx, loss, n)
}

/// A sentence with adjacent interior tokens swapped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoisedSentence {
    pub original: Vec<u32>,
    pub noised: Vec<u32>,
    /// Index `i` of each swap of positions `i` and `i + 1`, in order.
    pub swaps: Vec<usize>,
}

/// Performs `floor(m / 4)` sequential swaps of adjacent interior tokens,
/// where `m` excludes the BOS/EOS frame. Positions are drawn uniformly and
/// may repeat.
pub fn make_noise<R: Rng + ?Sized>(x: &[u32], rng: &mut R) -> NoisedSentence {
    let framed = x.len() >= 2 && x[0] == BOS && x[x.len() - 1] == EOS;
    let (lo, hi) = if framed { (1, x.len() - 1) } else { (0, x.len()) };
    let m = hi - lo;
    let mut noised = x.to_vec();
    let mut swaps = Vec::with_capacity(m / 4);
    for _ in 0..m / 4 {
        let i = rng.gen_range(lo..hi - 1);
        noised.swap(i, i + 1);
        swaps.push(i);
    }
    NoisedSentence {
        original: x.to_vec(),
        noised,
        swaps,
    }
}

/// Where the word-order corruption goes for the denoising objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseSide {
    /// Clean input, corrupted reference.
    #[default]
    Target,
    /// Corrupted input, clean reference.
    Input,
}

impl FromStr for NoiseSide {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(NoiseSide::Target),
            "input" => Ok(NoiseSide::Input),
            other => Err(Error::Config(format!("unknown noise side {other:?}"))),
        }
    }
}

pub fn graph_jd<T: Scalar>(
    ctx: &mut Ctx<T>,
    clean: &[Vec<u32>],
    noised: &[Vec<u32>],
    side: NoiseSide,
) -> Result<(NodeId, usize)> {
    if clean.is_empty() {
        bail!(Input, "empty batch");
    }
    if clean.len() != noised.len() {
        bail!(Input, "{} clean sentences but {} noised", clean.len(), noised.len());
    }
    if let Some(i) = clean.iter().zip(noised).position(|(a, b)| a.len() != b.len()) {
        bail!(Input, "row {i}: noised sentence length differs from the original");
    }
    match side {
        NoiseSide::Target => model::teacher_forced_loss(ctx, Decoder::D2, clean, noised),
        NoiseSide::Input => model::teacher_forced_loss(ctx, Decoder::D2, noised, clean),
    }
}

pub fn loss_jd(
    model: &Model,
    clean: &[Vec<u32>],
    noised: &[Vec<u32>],
    side: NoiseSide,
    mode: PassMode,
) -> Result<LossOutput> {
    let mut ctx = mode.ctx(model);
    let (loss, n) = graph_jd(&mut ctx, clean, noised, side)?;
    finish(ctx, loss, n)
}

/// A sequence drawn from `D2` given a source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSample {
    /// Generated ids, without BOS; ends with EOS unless the cap was hit.
    pub tokens: Vec<u32>,
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
}

impl RolloutSample {
    /// `[BOS, tokens...]`, the teacher-forcing form of the sample.
    pub fn framed(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.tokens.len() + 1);
        v.push(BOS);
        v.extend_from_slice(&self.tokens);
        v
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Ancestral,
    /// Temperature zero; ties go to the lowest id.
    Greedy,
}

/// Default rollout length: `ceil(1.5 * m)` with `m` the unframed length.
pub fn default_cap(x: &[u32]) -> usize {
    let m = x.len().saturating_sub(2);
    ((3 * m).div_ceil(2)).max(1)
}

fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = mx + row.iter().map(|&x| (x as f64 - mx).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x as f64 - lse).collect()
}

/// Draws one rollout per source sentence from `D2` in inference mode.
pub fn sample_rollouts<R: Rng + ?Sized>(
    model: &Model,
    src: &[Vec<u32>],
    rng: &mut R,
    caps: &[usize],
    sampling: Sampling,
) -> Result<Vec<RolloutSample>> {
    if caps.len() != src.len() {
        bail!(Input, "{} caps for {} sentences", caps.len(), src.len());
    }
    if caps.contains(&0) {
        bail!(Input, "rollout length cap must be at least 1");
    }
    let mut ctx: Ctx<f32> = Ctx::eval(model);
    let enc = model::encode(&mut ctx, src)?;
    let (mut state, mem) = model::init_decoder(&mut ctx, Decoder::D2, &enc)?;
    let mut out: Vec<RolloutSample> = (0..src.len())
        .map(|_| RolloutSample {
            tokens: Vec::new(),
            step_log_probs: Vec::new(),
            log_prob: 0.0,
        })
        .collect();
    let mut prev = vec![BOS as usize; src.len()];
    let mut done = vec![false; src.len()];
    while done.iter().any(|d| !d) {
        let step = model::decoder_step(&mut ctx, &state, &prev, &enc, &mem)?;
        let logits = ctx.graph.value(step.logits).clone();
        for b in 0..src.len() {
            if done[b] {
                continue;
            }
            let lp = log_softmax_row(logits.row(b));
            let tok = match sampling {
                Sampling::Greedy => argmax(&lp),
                Sampling::Ancestral => {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = lp.len() - 1;
                    for (j, &l) in lp.iter().enumerate() {
                        acc += l.exp();
                        if u < acc {
                            pick = j;
                            break;
                        }
                    }
                    pick
                }
            };
            let s = &mut out[b];
            s.tokens.push(tok as u32);
            s.step_log_probs.push(lp[tok]);
            s.log_prob += lp[tok];
            prev[b] = tok;
            if tok as u32 == EOS || s.tokens.len() >= caps[b] {
                done[b] = true;
            }
        }
        state = step.state;
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Single-sentence form of [`sample_rollouts`].
pub fn sample_rollout<R: Rng + ?Sized>(
    model: &Model,
    x: &[u32],
    rng: &mut R,
    cap: usize,
    sampling: Sampling,
) -> Result<RolloutSample> {
    Ok(sample_rollouts(model, &[x.to_vec()], rng, &[cap], sampling)?.remove(0))
}

/// Mean of the embedding rows of the non-reserved tokens.
fn pooled(ids: &[u32], embeddings: &Tensor<f32>) -> Result<Option<Vec<f64>>> {
    let (rows, cols) = embeddings.dims2();
    let mut acc = vec![0.0f64; cols];
    let mut n = 0usize;
    for &id in ids.iter().filter(|&&id| !is_reserved(id)) {
        if id as usize >= rows {
            bail!(Input, "token {id} outside embedding table of {rows} rows");
        }
        for (a, &e) in acc.iter_mut().zip(embeddings.row(id as usize)) {
            *a += e as f64;
        }
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(acc.into_iter().map(|a| a / n as f64).collect()))
}

/// Cosine between mean-pooled embeddings of the two sentences; 0 when either
/// pooled vector is zero or empty.
pub fn reward_cosine(sample: &[u32], reference: &[u32], embeddings: &Tensor<f32>) -> Result<f32> {
    let (Some(a), Some(b)) = (pooled(sample, embeddings)?, pooled(reference, embeddings)?) else {
        return Ok(0.0);
    };
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0) as f32)
}

/// Per-row advantages `R_i - b_i`. With the baseline on, `b_i` is the mean
/// reward of the other rows of the batch (zero for a single row).
pub fn advantages(rewards: &[f32], baseline: bool) -> Vec<f64> {
    let n = rewards.len();
    let total: f64 = rewards.iter().map(|&r| r as f64).sum();
    rewards
        .iter()
        .map(|&r| {
            let b = if baseline && n > 1 {
                (total - r as f64) / (n - 1) as f64
            } else {
                0.0
            };
            r as f64 - b
        })
        .collect()
}

/// REINFORCE surrogate `-(1/B) sum_i A_i sum_t log pi(a_{i,t})`.
///
/// `steps[t]` holds the `[B, V]` logits node of step `t` and each row's
/// action, or `None` once that row has stopped. Its gradient is the score
/// function estimator; advantages are constants.
pub fn reinforce_surrogate<T: Scalar>(
    graph: &mut Graph<T>,
    steps: &[(NodeId, Vec<Option<usize>>)],
    advantages: &[f64],
) -> Result<NodeId> {
    let b = advantages.len();
    if b == 0 {
        bail!(Input, "empty batch");
    }
    let mut terms = Vec::with_capacity(steps.len());
    for (logits, actions) in steps {
        if actions.len() != b {
            bail!(Input, "{} actions for {} advantages", actions.len(), b);
        }
        let targets: Vec<usize> = actions.iter().map(|a| a.unwrap_or(0)).collect();
        let weights: Vec<T> = actions
            .iter()
            .zip(advantages)
            .map(|(a, &adv)| if a.is_some() { T::from_f64(adv / b as f64) } else { T::zero() })
            .collect();
        terms.push(graph.cross_entropy(*logits, &targets, &weights)?);
    }
    if terms.is_empty() {
        bail!(Input, "no sampled steps");
    }
    graph.add_n(&terms)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlSettings {
    pub baseline: bool,
    /// Rollout cap as a multiple of the unframed source length.
    pub cap_factor: f32,
}

impl Default for RlSettings {
    fn default() -> Self {
        RlSettings {
            baseline: true,
            cap_factor: 1.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RlOutput {
    pub loss: LossOutput,
    pub samples: Vec<RolloutSample>,
    pub rewards: Vec<f32>,
}

impl RlOutput {
    pub fn mean_reward(&self) -> f32 {
        self.rewards.iter().sum::<f32>() / self.rewards.len().max(1) as f32
    }
}

/// Policy-gradient objective for `D2` with the cosine reward. Rollouts are
/// drawn without dropout and the surrogate is evaluated the same way, so
/// the log-probabilities match the sampling distribution. The reward uses
/// the encoder embedding table as a constant.
pub fn loss_jrl<R: Rng + ?Sized>(model: &Model, src: &[Vec<u32>], rng: &mut R, settings: RlSettings) -> Result<RlOutput> {
    if src.is_empty() {
        bail!(Input, "empty batch");
    }
    let caps: Vec<usize> = src
        .iter()
        .map(|x| {
            let m = x.len().saturating_sub(2) as f32;
            ((settings.cap_factor * m).ceil() as usize).max(1)
        })
        .collect();
    let samples = sample_rollouts(model, src, rng, &caps, Sampling::Ancestral)?;
    let embeddings = model.params.get("enc/embed")?;
    let rewards = samples
        .iter()
        .zip(src)
        .map(|(s, x)| reward_cosine(&s.tokens, x, embeddings))
        .collect::<Result<Vec<f32>>>()?;
    let adv = advantages(&rewards, settings.baseline);

    let mut ctx: Ctx<f32> = Ctx::eval(model);
    let enc = model::encode(&mut ctx, src)?;
    let framed: Vec<Vec<u32>> = samples.iter().map(RolloutSample::framed).collect();
    // Teacher forcing over [BOS, x'...] yields one step per sampled token.
    let mut padded = framed.clone();
    for p in padded.iter_mut() {
        p.push(EOS);
    }
    let outs = model::teacher_forced(&mut ctx, Decoder::D2, &enc, &padded)?;
    let steps: Vec<(NodeId, Vec<Option<usize>>)> = outs
        .iter()
        .enumerate()
        .map(|(t, o)| {
            let actions = samples.iter().map(|s| s.tokens.get(t).map(|&a| a as usize)).collect();
            (o.logits, actions)
        })
        .collect();
    let loss = reinforce_surrogate(&mut ctx.graph, &steps, &adv)?;
    let tokens = samples.iter().map(|s| s.tokens.len()).sum();
    let out = finish(ctx, loss, tokens)?;
    Ok(RlOutput {
        loss: out,
        samples,
        rewards,
    })
}
