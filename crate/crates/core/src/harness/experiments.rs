//! Experiment protocols built on the training loop: the ablation grid, the
//! auxiliary-weight sweep, the encoder swap and length-bucketed scoring.

use std::fmt::Write as _;

use crate::decode::{self, BeamConfig};
use crate::error::{bail, Result};
use crate::eval::{self, BleuReport, BucketReport};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{ExperimentConfig, VocabSettings};
use crate::harness::corpus::{generate_synthetic_task, ParallelCorpus, ParallelText};
use crate::model::{init_parameters, Decoder, Model, Partition};
use crate::objectives::Batch;
use crate::scheduler::{self, MixingSchedule, PhaseGate, TrainConfig, TrainLog};
use crate::vocab::{learn_bpe, Tokenizer};

/// A corpus turned into ids with vocabularies learned on its training split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub src_tok: Tokenizer,
    pub tgt_tok: Tokenizer,
    pub train: Batch,
    pub dev: Batch,
    pub test: ParallelText,
}

fn tokenizer(lines: &[String], vocab: &VocabSettings) -> Result<Tokenizer> {
    if vocab.bpe_merges == 0 {
        Tokenizer::word_level(lines, vocab.min_freq)
    } else {
        Tokenizer::bpe(lines, learn_bpe(lines, vocab.bpe_merges)?, vocab.min_freq)
    }
}

pub fn encode_text(text: &ParallelText, src: &Tokenizer, tgt: &Tokenizer) -> Result<Batch> {
    Batch::new(
        text.src.iter().map(|s| src.encode(s)).collect(),
        text.tgt.iter().map(|s| tgt.encode(s)).collect(),
    )
}

pub fn prepare(corpus: &ParallelCorpus, vocab: &VocabSettings) -> Result<PreparedData> {
    let src_tok = tokenizer(&corpus.train.src, vocab)?;
    let tgt_tok = tokenizer(&corpus.train.tgt, vocab)?;
    Ok(PreparedData {
        train: encode_text(&corpus.train, &src_tok, &tgt_tok)?,
        dev: encode_text(&corpus.dev, &src_tok, &tgt_tok)?,
        test: corpus.test.clone(),
        src_tok,
        tgt_tok,
    })
}

/// Fresh model for `data`, trained with `train`.
pub fn train_model(cfg: &ExperimentConfig, train: &TrainConfig, data: &PreparedData) -> Result<(Checkpoint, TrainLog)> {
    let model_cfg = cfg.model.with_vocab(data.src_tok.vocab.len(), data.tgt_tok.vocab.len());
    let mut model = Model::new(model_cfg, cfg.model_seed)?;
    let log = scheduler::train(&mut model, &data.train, &data.dev, train)?;
    Ok((Checkpoint::new(model, data.src_tok.clone(), data.tgt_tok.clone())?, log))
}

/// Translates raw source sentences with `D1`. A beam of 1 decodes greedily
/// in batches.
pub fn translate(ckpt: &Checkpoint, sentences: &[String], beam: BeamConfig) -> Result<Vec<String>> {
    decode_with(ckpt, Decoder::D1, sentences, beam)
}

/// Decodes with either decoder; `D2` output is rendered with the source
/// vocabulary.
pub fn decode_with(ckpt: &Checkpoint, which: Decoder, sentences: &[String], beam: BeamConfig) -> Result<Vec<String>> {
    let srcs: Vec<Vec<u32>> = sentences.iter().map(|s| ckpt.src.encode(s)).collect();
    let ids: Vec<Vec<u32>> = if beam.beam_size == 1 && !beam.length_norm {
        let mut out = Vec::with_capacity(srcs.len());
        for part in srcs.chunks(128) {
            let lens: Vec<usize> = part
                .iter()
                .map(|s| beam.max_len.unwrap_or_else(|| decode::default_max_len(s)))
                .collect();
            out.extend(decode::greedy_decode_batch(&ckpt.model, which, part, &lens)?);
        }
        out
    } else {
        srcs.iter()
            .map(|s| {
                let best = decode::beam_search(&ckpt.model, which, s, beam)?;
                Ok(best.into_iter().next().map(|h| h.tokens).unwrap_or_default())
            })
            .collect::<Result<_>>()?
    };
    let out_tok = match which {
        Decoder::D1 => &ckpt.tgt,
        Decoder::D2 => &ckpt.src,
    };
    ids.iter().map(|h| out_tok.decode(h)).collect()
}

/// Corpus BLEU over whitespace tokens.
pub fn score(hyps: &[String], refs: &[String]) -> Result<BleuReport> {
    eval::corpus_bleu(&eval::split_lines(hyps), &eval::split_lines(refs), 4, false)
}

pub fn test_report(ckpt: &Checkpoint, test: &ParallelText, beam: usize) -> Result<BleuReport> {
    let hyps = translate(
        ckpt,
        &test.src,
        BeamConfig {
            beam_size: beam,
            ..BeamConfig::default()
        },
    )?;
    score(&hyps, &test.tgt)
}

/// Per-bucket BLEU by source length in words.
pub fn length_report(ckpt: &Checkpoint, test: &ParallelText, edges: &[usize], beam: usize) -> Result<Vec<BucketReport>> {
    let hyps = translate(
        ckpt,
        &test.src,
        BeamConfig {
            beam_size: beam,
            ..BeamConfig::default()
        },
    )?;
    let lens: Vec<usize> = test.src.iter().map(|s| s.split_whitespace().count()).collect();
    eval::length_bucket_report(&eval::split_lines(&hyps), &eval::split_lines(&test.tgt), &lens, edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    AutoEncoder,
    Denoising,
    Reinforce,
    AllConverge,
    BiDan,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::AutoEncoder,
        Variant::Denoising,
        Variant::Reinforce,
        Variant::AllConverge,
        Variant::BiDan,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::AutoEncoder => "Baseline+AD",
            Variant::Denoising => "Baseline+AD(Denoising)",
            Variant::Reinforce => "Baseline+AD(RL)",
            Variant::AllConverge => "BiDAN(all-converge)",
            Variant::BiDan => "BiDAN",
        }
    }

    /// `base` with this variant's objectives and phase gate. The full model
    /// keeps the mixing ratio of `base`.
    pub fn configure(self, base: &TrainConfig) -> Result<TrainConfig> {
        let full = base.schedule.unwrap_or_default();
        let (schedule, gate) = match self {
            Variant::Baseline => (None, PhaseGate::Immediate),
            Variant::AutoEncoder => (Some(MixingSchedule::new(1, 0, 0)?), PhaseGate::Gated),
            Variant::Denoising => (Some(MixingSchedule::new(full.autoencode, full.denoise, 0)?), PhaseGate::Gated),
            Variant::Reinforce => (Some(MixingSchedule::new(full.autoencode, 0, full.reinforce)?), PhaseGate::Gated),
            Variant::AllConverge => (Some(full), PhaseGate::AllConverge),
            Variant::BiDan => (Some(full), PhaseGate::Gated),
        };
        Ok(TrainConfig {
            schedule,
            gate,
            ..base.clone()
        })
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub dev_bleu: f64,
    pub test_bleu: f64,
    pub steps: u64,
    pub frozen_at: Option<u64>,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

fn dev_text(data: &PreparedData, corpus: &ParallelCorpus) -> ParallelText {
    debug_assert_eq!(data.dev.len(), corpus.dev.len());
    corpus.dev.clone()
}

/// Trains each requested variant from the same initialisation and data.
pub fn run_ablation_variants(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let corpus = generate_synthetic_task(&cfg.data)?;
    let data = prepare(&corpus, &cfg.vocab)?;
    let dev = dev_text(&data, &corpus);
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let train = v.configure(&cfg.train)?;
        let (ckpt, log) = train_model(cfg, &train, &data)?;
        rows.push(AblationRow {
            variant: v,
            dev_bleu: test_report(&ckpt, &dev, cfg.protocol.eval_beam)?.bleu,
            test_bleu: test_report(&ckpt, &data.test, cfg.protocol.eval_beam)?.bleu,
            steps: log.steps(),
            frozen_at: log.frozen_at,
            checkpoint: ckpt,
            log,
        });
    }
    Ok(rows)
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    run_ablation_variants(cfg, &Variant::ALL)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,dev_bleu,test_bleu,steps,frozen_at\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{},{}",
            r.variant.label(),
            r.dev_bleu,
            r.test_bleu,
            r.steps,
            r.frozen_at.map_or(String::new(), |f| f.to_string())
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub autoencode: u32,
    pub dev_bleu: f64,
    pub test_bleu: f64,
}

/// One full training per autoencoding weight, with the denoising and
/// reinforcement weights held at the configured values.
pub fn lambda_sweep(cfg: &ExperimentConfig, values: &[u32]) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let mut values = values.to_vec();
    values.sort_unstable();
    values.dedup();
    let corpus = generate_synthetic_task(&cfg.data)?;
    let data = prepare(&corpus, &cfg.vocab)?;
    let dev = dev_text(&data, &corpus);
    let base = cfg.train.schedule.unwrap_or_default();
    let mut out = Vec::with_capacity(values.len());
    for a in values {
        let schedule = MixingSchedule::new(a, base.denoise, base.reinforce)?;
        let mut train = TrainConfig {
            schedule: Some(schedule),
            ..cfg.train.clone()
        };
        if let Some(steps) = cfg.protocol.sweep_steps {
            train.max_steps = steps;
            train.joint_max_steps = train.joint_max_steps.min(steps);
        }
        let (ckpt, _) = train_model(cfg, &train, &data)?;
        out.push(SweepPoint {
            autoencode: a,
            dev_bleu: test_report(&ckpt, &dev, cfg.protocol.eval_beam)?.bleu,
            test_bleu: test_report(&ckpt, &data.test, cfg.protocol.eval_beam)?.bleu,
        });
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("lambda_a,dev_bleu,test_bleu\n");
    for p in points {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.autoencode, p.dev_bleu, p.test_bleu);
    }
    s
}

/// Where the replacement encoder comes from.
#[derive(Clone, Copy, Debug)]
pub enum EncoderSource<'a> {
    Donor(&'a Checkpoint),
    /// Fresh initialisation from a seed.
    Random(u64),
}

/// `target` with its encoder parameters replaced; both decoders are kept.
/// Encoder shapes and source vocabularies must agree.
pub fn swap_encoder(target: &Checkpoint, source: EncoderSource) -> Result<Checkpoint> {
    let donor_params = match source {
        EncoderSource::Donor(d) => {
            if d.src.vocab != target.src.vocab {
                bail!(Config, "donor and target source vocabularies differ");
            }
            d.model.params.clone()
        }
        EncoderSource::Random(seed) => init_parameters(&target.model.config, seed)?,
    };
    let mut mismatches = Vec::new();
    let target_enc: Vec<(&str, &[usize])> = target
        .model
        .params
        .partition(Partition::Encoder)
        .map(|(n, t)| (n, t.shape()))
        .collect();
    let donor_enc: Vec<(&str, &[usize])> = donor_params.partition(Partition::Encoder).map(|(n, t)| (n, t.shape())).collect();
    for (name, shape) in &target_enc {
        match donor_enc.iter().find(|(n, _)| n == name) {
            None => mismatches.push(format!("{name}: missing in donor")),
            Some((_, s)) if s != shape => mismatches.push(format!("{name}: target {shape:?}, donor {s:?}")),
            _ => {}
        }
    }
    for (name, _) in &donor_enc {
        if !target_enc.iter().any(|(n, _)| n == name) {
            mismatches.push(format!("{name}: missing in target"));
        }
    }
    if !mismatches.is_empty() {
        bail!(Config, "encoder shapes differ: {}", mismatches.join("; "));
    }
    let mut params = target.model.params.clone();
    for (name, t) in donor_params.partition(Partition::Encoder) {
        *params.get_mut(name).expect("checked above") = t.clone();
    }
    Checkpoint::new(Model::from_params(params)?, target.src.clone(), target.tgt.clone())
}

#[derive(Clone, Debug)]
pub struct SwapRow {
    pub encoder: &'static str,
    pub report: BleuReport,
}

/// Encoder-swap protocol on two tasks that share the source language but
/// translate into disjoint target vocabularies. The target model is trained
/// on the configured task (or supplied); donors are trained on the second
/// task with and without the auxiliary objectives, from the same
/// initialisation. Every hybrid is scored on the first task's test set.
pub fn encoder_swap_experiment(cfg: &ExperimentConfig, target: Option<&Checkpoint>) -> Result<Vec<SwapRow>> {
    cfg.validate()?;
    let corpus = generate_synthetic_task(&cfg.data)?;
    let data = prepare(&corpus, &cfg.vocab)?;
    let mut donor_spec = cfg.data.clone();
    donor_spec.tgt_prefix = cfg.protocol.swap_tgt_prefix.clone();
    donor_spec.map_seed = cfg.protocol.swap_map_seed;
    donor_spec.seed = cfg.data.seed.wrapping_add(1);
    let donor_data = prepare(&generate_synthetic_task(&donor_spec)?, &cfg.vocab)?;
    if donor_data.src_tok.vocab != data.src_tok.vocab {
        bail!(Config, "the two tasks do not share a source vocabulary");
    }

    let mut train = cfg.train.clone();
    if let Some(steps) = cfg.protocol.swap_steps {
        train.max_steps = steps;
        train.joint_max_steps = train.joint_max_steps.min(steps);
    }
    let owned;
    let target = match target {
        Some(t) => t,
        None => {
            owned = train_model(cfg, &Variant::BiDan.configure(&train)?, &data)?.0;
            &owned
        }
    };
    let (bidan_donor, _) = train_model(cfg, &Variant::BiDan.configure(&train)?, &donor_data)?;
    let (plain_donor, _) = train_model(cfg, &Variant::Baseline.configure(&train)?, &donor_data)?;

    let beam = cfg.protocol.eval_beam;
    let rows = vec![
        ("original", target.clone()),
        ("bidan-donor", swap_encoder(target, EncoderSource::Donor(&bidan_donor))?),
        ("baseline-donor", swap_encoder(target, EncoderSource::Donor(&plain_donor))?),
        ("random", swap_encoder(target, EncoderSource::Random(cfg.protocol.random_encoder_seed))?),
    ];
    rows.into_iter()
        .map(|(encoder, ckpt)| {
            Ok(SwapRow {
                encoder,
                report: test_report(&ckpt, &data.test, beam)?,
            })
        })
        .collect()
}

pub fn swap_csv(rows: &[SwapRow]) -> String {
    let mut s = String::from("encoder,p1,p2,p3,p4,bp,bleu\n");
    for r in rows {
        let _ = write!(s, "{}", r.encoder);
        for p in &r.report.precisions {
            let _ = write!(s, ",{}", p.fraction());
        }
        let _ = writeln!(s, ",{:.6},{:.6}", r.report.brevity_penalty, r.report.bleu);
    }
    s
}
