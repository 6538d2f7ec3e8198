use std::collections::HashMap;

use super::{Decoder, Model, ScoreVariant};
use crate::error::{bail, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};
use crate::vocab::PAD;

/// A graph under construction together with the model whose parameters it
/// binds. Parameters become trainable leaves the first time they are used,
/// so a pass only produces gradients for the tensors it actually touched.
pub struct Ctx<'m, T: Scalar = f32> {
    pub graph: Graph<T>,
    model: &'m Model,
    bound: HashMap<String, NodeId>,
    dropout: f32,
    train: bool,
}

impl<'m, T: Scalar> Ctx<'m, T> {
    /// Inference mode: dropout disabled.
    pub fn eval(model: &'m Model) -> Self {
        Ctx {
            graph: Graph::new(),
            model,
            bound: HashMap::new(),
            dropout: 0.0,
            train: false,
        }
    }

    /// Training mode with the given dropout rate; `seed` fixes the masks.
    pub fn train(model: &'m Model, dropout: f32, seed: u64) -> Self {
        Ctx {
            graph: Graph::with_seed(seed),
            model,
            bound: HashMap::new(),
            dropout,
            train: true,
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.model.params.get(name)?.cast::<T>();
        let id = self.graph.param(name, value)?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.graph.constant(Tensor::zeros(&[rows, cols]))
    }

    /// `[rows, 1]` column of ones and zeros.
    fn mask_column(&mut self, keep: &[bool]) -> NodeId {
        let data = keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
        self.graph
            .constant(Tensor::new(vec![keep.len(), 1], data).expect("column shape"))
    }

    fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        self.graph.dropout(x, self.dropout, self.train)
    }

    fn linear(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let w = self.param(w)?;
        let b = self.param(b)?;
        let xw = self.graph.matmul(x, w)?;
        self.graph.add(xw, b)
    }
}

/// One LSTM step. Gate order: input, forget, candidate, output.
fn lstm_cell<T: Scalar>(ctx: &mut Ctx<T>, prefix: &str, x: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
    let u = ctx.graph.shape(h).1;
    let xh = ctx.graph.concat(&[x, h])?;
    let z = ctx.linear(xh, &format!("{prefix}/w"), &format!("{prefix}/b"))?;
    let g = &mut ctx.graph;
    let i = g.slice_cols(z, 0, u)?;
    let i = g.sigmoid(i)?;
    let f = g.slice_cols(z, u, 2 * u)?;
    let f = g.sigmoid(f)?;
    let cand = g.slice_cols(z, 2 * u, 3 * u)?;
    let cand = g.tanh(cand)?;
    let o = g.slice_cols(z, 3 * u, 4 * u)?;
    let o = g.sigmoid(o)?;
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let c_new = g.add(fc, ig)?;
    let tc = g.tanh(c_new)?;
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Runs one LSTM direction over `inputs`. `keep[s][b]` false holds row `b`'s
/// state fixed at position `s`, so padded positions never disturb it. The
/// returned `(h, c)` pairs are in position order regardless of direction.
pub fn lstm_run<T: Scalar>(
    ctx: &mut Ctx<T>,
    prefix: &str,
    inputs: &[NodeId],
    keep: &[Vec<bool>],
    reverse: bool,
) -> Result<Vec<(NodeId, NodeId)>> {
    let Some(&first) = inputs.first() else {
        return Ok(Vec::new());
    };
    let rows = ctx.graph.shape(first).0;
    let units = ctx.model().config.units;
    let mut h = ctx.zeros(rows, units);
    let mut c = ctx.zeros(rows, units);
    let mut out = vec![(h, c); inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for s in order {
        let (h_new, c_new) = lstm_cell(ctx, prefix, inputs[s], h, c)?;
        if keep[s].iter().all(|&k| k) {
            h = h_new;
            c = c_new;
        } else {
            let m = ctx.mask_column(&keep[s]);
            h = blend(ctx, m, h_new, h)?;
            c = blend(ctx, m, c_new, c)?;
        }
        out[s] = (h, c);
    }
    Ok(out)
}

/// `old + m * (new - old)` with `m` a 0/1 column.
fn blend<T: Scalar>(ctx: &mut Ctx<T>, m: NodeId, new: NodeId, old: NodeId) -> Result<NodeId> {
    let d = ctx.graph.sub(new, old)?;
    let d = ctx.graph.mul(d, m)?;
    ctx.graph.add(old, d)
}

/// Encoder output for a batch of BOS/EOS framed source sentences.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    /// `[B, 2U]` per source position: forward and backward top-layer
    /// hidden states concatenated.
    pub states: Vec<NodeId>,
    /// `keep[b][s]`: position `s` of row `b` is a real token.
    pub keep: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    /// Per layer, forward and backward hidden states before concatenation.
    pub layers: Vec<(Vec<NodeId>, Vec<NodeId>)>,
    /// Top-layer backward state after reading the whole sentence, `[B, U]`.
    pub summary: NodeId,
}

impl EncoderStates {
    pub fn rows(&self) -> usize {
        self.keep.len()
    }

    /// Row-gathered copy, e.g. to tile a single sentence across a beam.
    pub fn select_rows<T: Scalar>(&self, ctx: &mut Ctx<T>, rows: &[usize]) -> Result<EncoderStates> {
        let states = self
            .states
            .iter()
            .map(|&s| ctx.graph.gather(s, rows))
            .collect::<Result<Vec<_>>>()?;
        let summary = ctx.graph.gather(self.summary, rows)?;
        Ok(EncoderStates {
            states,
            keep: rows.iter().map(|&r| self.keep[r].clone()).collect(),
            lengths: rows.iter().map(|&r| self.lengths[r]).collect(),
            layers: Vec::new(),
            summary,
        })
    }

    fn keep_flat(&self) -> Vec<bool> {
        self.keep.iter().flatten().copied().collect()
    }
}

fn check_ids(batch: &[Vec<u32>], vocab: usize, what: &str) -> Result<()> {
    for (b, seq) in batch.iter().enumerate() {
        if let Some(&bad) = seq.iter().find(|&&id| id as usize >= vocab) {
            bail!(Input, "{what} row {b}: token id {bad} out of range for vocabulary of {vocab}");
        }
    }
    Ok(())
}

/// Position-major token ids, padded with `PAD`.
fn column(batch: &[Vec<u32>], t: usize) -> Vec<usize> {
    batch
        .iter()
        .map(|s| s.get(t).copied().unwrap_or(PAD) as usize)
        .collect()
}

/// Shared bidirectional encoder.
pub fn encode<T: Scalar>(ctx: &mut Ctx<T>, src: &[Vec<u32>]) -> Result<EncoderStates> {
    if src.is_empty() {
        bail!(Input, "empty source batch");
    }
    if let Some(short) = src.iter().position(|s| s.len() < 2) {
        bail!(Input, "source row {short} is shorter than its BOS/EOS frame");
    }
    let cfg = ctx.model().config.clone();
    check_ids(src, cfg.src_vocab, "source")?;
    let m = src.iter().map(Vec::len).max().unwrap_or(0);
    let lengths: Vec<usize> = src.iter().map(Vec::len).collect();
    let keep_by_pos: Vec<Vec<bool>> = (0..m).map(|s| lengths.iter().map(|&l| s < l).collect()).collect();

    let table = ctx.param("enc/embed")?;
    let mut inputs = Vec::with_capacity(m);
    for s in 0..m {
        let e = ctx.graph.gather(table, &column(src, s))?;
        inputs.push(ctx.dropout(e)?);
    }
    let mut layers = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        if layer > 0 {
            for x in inputs.iter_mut() {
                *x = ctx.dropout(*x)?;
            }
        }
        let fwd = lstm_run(ctx, &format!("enc/fwd{layer}"), &inputs, &keep_by_pos, false)?;
        let bwd = lstm_run(ctx, &format!("enc/bwd{layer}"), &inputs, &keep_by_pos, true)?;
        let fh: Vec<NodeId> = fwd.iter().map(|p| p.0).collect();
        let bh: Vec<NodeId> = bwd.iter().map(|p| p.0).collect();
        inputs = fh
            .iter()
            .zip(&bh)
            .map(|(&f, &b)| ctx.graph.concat(&[f, b]))
            .collect::<Result<_>>()?;
        layers.push((fh, bh));
    }
    let summary = layers.last().expect("at least one layer").1[0];
    Ok(EncoderStates {
        states: inputs,
        keep: (0..src.len()).map(|b| (0..m).map(|s| s < lengths[b]).collect()).collect(),
        lengths,
        layers,
        summary,
    })
}

/// Per-layer `(hidden, cell)` plus the previous attention vector used for
/// input feeding.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<(NodeId, NodeId)>,
    pub feed: NodeId,
}

impl DecoderState {
    pub fn select_rows<T: Scalar>(&self, ctx: &mut Ctx<T>, rows: &[usize]) -> Result<DecoderState> {
        let layers = self
            .layers
            .iter()
            .map(|&(h, c)| Ok((ctx.graph.gather(h, rows)?, ctx.graph.gather(c, rows)?)))
            .collect::<Result<Vec<_>>>()?;
        let feed = ctx.graph.gather(self.feed, rows)?;
        Ok(DecoderState { layers, feed })
    }
}

/// Decoder-specific projections of the encoder states, computed once per
/// source batch.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    pub which: Decoder,
    keys: Vec<NodeId>,
}

impl DecoderMemory {
    pub fn select_rows<T: Scalar>(&self, ctx: &mut Ctx<T>, rows: &[usize]) -> Result<DecoderMemory> {
        let keys = self
            .keys
            .iter()
            .map(|&k| ctx.graph.gather(k, rows))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderMemory { which: self.which, keys })
    }
}

/// Initial decoder state: an affine map of the encoder summary through
/// `tanh`, split into per-layer `(cell, hidden)` pairs.
pub fn init_decoder<T: Scalar>(
    ctx: &mut Ctx<T>,
    which: Decoder,
    enc: &EncoderStates,
) -> Result<(DecoderState, DecoderMemory)> {
    let p = which.prefix();
    let cfg = ctx.model().config.clone();
    let u = cfg.units;
    let init = ctx.linear(enc.summary, &format!("{p}/init/w"), &format!("{p}/init/b"))?;
    let init = ctx.graph.tanh(init)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let c = ctx.graph.slice_cols(init, 2 * l * u, 2 * l * u + u)?;
        let h = ctx.graph.slice_cols(init, 2 * l * u + u, 2 * (l + 1) * u)?;
        layers.push((h, c));
    }
    let feed = ctx.zeros(enc.rows(), u);
    let keys = if cfg.score == ScoreVariant::Additive {
        let w1 = ctx.param(&format!("{p}/attn/w1"))?;
        enc.states
            .iter()
            .map(|&h| ctx.graph.matmul(h, w1))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok((DecoderState { layers, feed }, DecoderMemory { which, keys }))
}

/// Attention over encoder states for one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, m]`, rows sum to one, zero on padding.
    pub weights: NodeId,
    /// `[B, 2U]`
    pub context: NodeId,
    /// `[B, U]`
    pub vector: NodeId,
}

pub fn attention<T: Scalar>(
    ctx: &mut Ctx<T>,
    enc: &EncoderStates,
    mem: &DecoderMemory,
    query: NodeId,
) -> Result<AttentionOutput> {
    let p = mem.which.prefix();
    let score = ctx.model().config.score;
    let mut scores = Vec::with_capacity(enc.states.len());
    match score {
        ScoreVariant::Additive => {
            let w2 = ctx.param(&format!("{p}/attn/w2"))?;
            let v = ctx.param(&format!("{p}/attn/v"))?;
            let q = ctx.graph.matmul(query, w2)?;
            for &k in &mem.keys {
                let hidden = ctx.graph.add(k, q)?;
                let hidden = ctx.graph.tanh(hidden)?;
                scores.push(ctx.graph.matmul(hidden, v)?);
            }
        }
        ScoreVariant::Concat => {
            let w = ctx.param(&format!("{p}/attn/w"))?;
            for &h in &enc.states {
                let hq = ctx.graph.concat(&[h, query])?;
                scores.push(ctx.graph.matmul(hq, w)?);
            }
        }
        ScoreVariant::Bilinear => {
            let w = ctx.param(&format!("{p}/attn/w"))?;
            let q = ctx.graph.matmul(query, w)?;
            for &h in &enc.states {
                let hq = ctx.graph.mul(h, q)?;
                scores.push(ctx.graph.sum_cols(hq)?);
            }
        }
    }
    let scores = ctx.graph.concat(&scores)?;
    let weights = ctx.graph.masked_softmax(scores, enc.keep_flat())?;
    let mut terms = Vec::with_capacity(enc.states.len());
    for (s, &h) in enc.states.iter().enumerate() {
        let a = ctx.graph.slice_cols(weights, s, s + 1)?;
        terms.push(ctx.graph.mul(h, a)?);
    }
    let context = ctx.graph.add_n(&terms)?;
    let cq = ctx.graph.concat(&[context, query])?;
    let vector = ctx.linear(cq, &format!("{p}/attn/wa"), &format!("{p}/attn/ba"))?;
    let vector = ctx.graph.tanh(vector)?;
    Ok(AttentionOutput {
        weights,
        context,
        vector,
    })
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    pub attention: AttentionOutput,
    /// `[B, V]` pre-softmax scores over the decoder's output vocabulary.
    pub logits: NodeId,
}

impl StepOutput {
    /// `softmax(logits)`, the predictive distribution.
    pub fn distribution<T: Scalar>(&self, ctx: &mut Ctx<T>) -> Result<NodeId> {
        ctx.graph.softmax(self.logits)
    }
}

/// One decoder step given the previous token of every row.
pub fn decoder_step<T: Scalar>(
    ctx: &mut Ctx<T>,
    state: &DecoderState,
    prev: &[usize],
    enc: &EncoderStates,
    mem: &DecoderMemory,
) -> Result<StepOutput> {
    let which = mem.which;
    let p = which.prefix();
    let cfg = ctx.model().config.clone();
    let vocab = cfg.vocab_of(which);
    if let Some(&bad) = prev.iter().find(|&&t| t >= vocab) {
        bail!(Config, "token {bad} is outside the {vocab}-entry vocabulary of {which:?}");
    }
    let table = ctx.param(&format!("{p}/embed"))?;
    let emb = ctx.graph.gather(table, prev)?;
    let mut x = ctx.dropout(emb)?;
    if cfg.input_feeding {
        x = ctx.graph.concat(&[x, state.feed])?;
    }
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, &(h, c)) in state.layers.iter().enumerate() {
        if l > 0 {
            x = ctx.dropout(x)?;
        }
        let (h, c) = lstm_cell(ctx, &format!("{p}/lstm{l}"), x, h, c)?;
        layers.push((h, c));
        x = h;
    }
    let attention = attention(ctx, enc, mem, x)?;
    let pre = ctx.dropout(attention.vector)?;
    let logits = ctx.linear(pre, &format!("{p}/out/w"), &format!("{p}/out/b"))?;
    Ok(StepOutput {
        state: DecoderState {
            layers,
            feed: attention.vector,
        },
        attention,
        logits,
    })
}

/// Teacher-forced pass: step `t` consumes `tgt[.][t]` and its logits
/// predict `tgt[.][t + 1]`.
pub fn teacher_forced<T: Scalar>(
    ctx: &mut Ctx<T>,
    which: Decoder,
    enc: &EncoderStates,
    tgt: &[Vec<u32>],
) -> Result<Vec<StepOutput>> {
    if tgt.len() != enc.rows() {
        bail!(Input, "{} targets for {} sources", tgt.len(), enc.rows());
    }
    check_ids(tgt, ctx.model().config.vocab_of(which), "target")?;
    let steps = tgt.iter().map(Vec::len).max().unwrap_or(0).saturating_sub(1);
    let (mut state, mem) = init_decoder(ctx, which, enc)?;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let step = decoder_step(ctx, &state, &column(tgt, t), enc, &mem)?;
        state = step.state.clone();
        out.push(step);
    }
    Ok(out)
}

/// Per-token mean negative log-likelihood of `tgt` given `src` through
/// `which`. Returns the loss node and the number of predicted tokens.
pub fn teacher_forced_loss<T: Scalar>(
    ctx: &mut Ctx<T>,
    which: Decoder,
    src: &[Vec<u32>],
    tgt: &[Vec<u32>],
) -> Result<(NodeId, usize)> {
    let enc = encode(ctx, src)?;
    let steps = teacher_forced(ctx, which, &enc, tgt)?;
    let n_tok: usize = tgt.iter().map(|s| s.len().saturating_sub(1)).sum();
    if n_tok == 0 {
        bail!(Input, "no target tokens to predict");
    }
    let w = T::from_f64(1.0 / n_tok as f64);
    let mut terms = Vec::with_capacity(steps.len());
    for (t, step) in steps.iter().enumerate() {
        let targets = column(tgt, t + 1);
        let weights: Vec<T> = tgt
            .iter()
            .map(|s| if t + 1 < s.len() { w } else { T::zero() })
            .collect();
        terms.push(ctx.graph.cross_entropy(step.logits, &targets, &weights)?);
    }
    Ok((ctx.graph.add_n(&terms)?, n_tok))
}
