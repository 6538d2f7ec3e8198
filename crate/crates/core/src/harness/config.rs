//! Experiment configuration and its `section.key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; a typo is an error rather than a silently ignored setting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::decode::BeamConfig;
use crate::error::{bail, Error, Result};
use crate::harness::corpus::SyntheticSpec;
use crate::model::{ModelConfig, ScoreVariant};
use crate::objectives::NoiseSide;
use crate::scheduler::{LrSchedule, MixingSchedule, PhaseGate, TrainConfig};

/// Network shape; vocabulary sizes come from the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelShape {
    pub layers: usize,
    pub units: usize,
    pub embed: usize,
    pub score: ScoreVariant,
    pub input_feeding: bool,
}

impl ModelShape {
    pub fn with_vocab(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            units: self.units,
            embed: self.embed,
            src_vocab,
            tgt_vocab,
            score: self.score,
            input_feeding: self.input_feeding,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocabSettings {
    /// Zero selects word-level vocabularies.
    pub bpe_merges: usize,
    pub min_freq: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSettings {
    /// Auxiliary-decoder weights tried by the sweep.
    pub sweep_values: Vec<u32>,
    /// Step budget for each sweep run; `None` uses `train.max_steps`.
    pub sweep_steps: Option<u64>,
    /// Target word prefix of the donor task in the encoder swap.
    pub swap_tgt_prefix: String,
    pub swap_map_seed: u64,
    pub swap_steps: Option<u64>,
    pub random_encoder_seed: u64,
    /// Beam width for scoring test sets; 1 is greedy.
    pub eval_beam: usize,
    pub bucket_edges: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub vocab: VocabSettings,
    pub model: ModelShape,
    /// Parameter initialisation seed.
    pub model_seed: u64,
    pub train: TrainConfig,
    pub decode: BeamConfig,
    pub protocol: ProtocolSettings,
}

impl ExperimentConfig {
    /// Desk-scale profile: 60 content words per language (64 ids with the
    /// reserved tokens), 2 layers of 64 units, 32-dim embeddings, 5000
    /// training pairs.
    pub fn desk() -> Self {
        ExperimentConfig {
            data: SyntheticSpec::default(),
            vocab: VocabSettings {
                bpe_merges: 0,
                min_freq: 1,
            },
            model: ModelShape {
                layers: 2,
                units: 64,
                embed: 32,
                score: ScoreVariant::Additive,
                input_feeding: true,
            },
            model_seed: 1,
            train: TrainConfig {
                batch_size: 32,
                max_steps: 3000,
                joint_max_steps: 3000,
                eval_every: 250,
                lr: LrSchedule {
                    lr0: 4.0,
                    halve_start: 2000,
                    halve_every: 250,
                },
                clip_norm: Some(1.0),
                ..TrainConfig::default()
            },
            decode: BeamConfig::default(),
            protocol: ProtocolSettings {
                sweep_values: (0..=6).collect(),
                sweep_steps: None,
                swap_tgt_prefix: "u".into(),
                swap_map_seed: 11,
                swap_steps: None,
                random_encoder_seed: 99,
                eval_beam: 1,
                bucket_edges: vec![1, 4, 6, 8],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.with_vocab(1, 1).validate()?;
        self.train.validate()?;
        if self.decode.beam_size == 0 || self.protocol.eval_beam == 0 {
            bail!(Config, "beam sizes must be at least 1");
        }
        if self.vocab.min_freq == 0 {
            bail!(Config, "vocab.min_freq must be at least 1");
        }
        if self.protocol.bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "experiment.bucket_edges must be strictly increasing");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the settings in `text` on top of the desk profile.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(Config, "line {}: expected `section.key = value`", i + 1);
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_kind(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        let p = &mut self.protocol;
        match key {
            "data.kind" => d.kind = value.parse()?,
            "data.vocab_size" => d.vocab_size = num(key, value)?,
            "data.min_len" => d.min_len = num(key, value)?,
            "data.max_len" => d.max_len = num(key, value)?,
            "data.n_train" => d.n_train = num(key, value)?,
            "data.n_dev" => d.n_dev = num(key, value)?,
            "data.n_test" => d.n_test = num(key, value)?,
            "data.seed" => d.seed = num(key, value)?,
            "data.map_seed" => d.map_seed = num(key, value)?,
            "data.src_prefix" => d.src_prefix = value.to_string(),
            "data.tgt_prefix" => d.tgt_prefix = value.to_string(),
            "vocab.bpe_merges" => self.vocab.bpe_merges = num(key, value)?,
            "vocab.min_freq" => self.vocab.min_freq = num(key, value)?,
            "model.layers" => self.model.layers = num(key, value)?,
            "model.units" => self.model.units = num(key, value)?,
            "model.embed" => self.model.embed = num(key, value)?,
            "model.score" => self.model.score = value.parse()?,
            "model.input_feeding" => self.model.input_feeding = flag(key, value)?,
            "model.seed" => self.model_seed = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.max_steps" => t.max_steps = num(key, value)?,
            "train.joint_max_steps" => t.joint_max_steps = num(key, value)?,
            "train.eval_every" => t.eval_every = num(key, value)?,
            "train.lr0" => t.lr.lr0 = num(key, value)?,
            "train.halve_start" => t.lr.halve_start = num(key, value)?,
            "train.halve_every" => t.lr.halve_every = num(key, value)?,
            "train.clip_norm" => {
                let c: f32 = num(key, value)?;
                t.clip_norm = (c > 0.0).then_some(c);
            }
            "train.dropout" => t.dropout = num(key, value)?,
            "train.lambda_a" | "train.lambda_d" | "train.lambda_r" => {
                let v: u32 = num(key, value)?;
                let mut s = t.schedule.unwrap_or(MixingSchedule {
                    autoencode: 0,
                    denoise: 0,
                    reinforce: 0,
                });
                match key {
                    "train.lambda_a" => s.autoencode = v,
                    "train.lambda_d" => s.denoise = v,
                    _ => s.reinforce = v,
                }
                t.schedule = (s.period() > 0).then_some(s);
            }
            "train.aux_mode" => t.aux_mode = value.parse()?,
            "train.gate" => t.gate = value.parse()?,
            "train.window" => t.monitor.window = num(key, value)?,
            "train.enter_threshold" => t.monitor.enter_threshold = num(key, value)?,
            "train.stop_threshold" => t.monitor.stop_threshold = num(key, value)?,
            "train.noise_side" => t.noise_side = value.parse()?,
            "train.rl_baseline" => t.rl.baseline = flag(key, value)?,
            "train.rollout_cap" => t.rl.cap_factor = num(key, value)?,
            "train.dev_bleu" => t.dev_bleu = flag(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "decode.beam" => self.decode.beam_size = num(key, value)?,
            "decode.length_norm" => self.decode.length_norm = flag(key, value)?,
            "decode.max_len" => {
                let m: usize = num(key, value)?;
                self.decode.max_len = (m > 0).then_some(m);
            }
            "experiment.sweep_values" => p.sweep_values = list(key, value)?,
            "experiment.sweep_steps" => p.sweep_steps = opt_steps(key, value)?,
            "experiment.swap_tgt_prefix" => p.swap_tgt_prefix = value.to_string(),
            "experiment.swap_map_seed" => p.swap_map_seed = num(key, value)?,
            "experiment.swap_steps" => p.swap_steps = opt_steps(key, value)?,
            "experiment.random_encoder_seed" => p.random_encoder_seed = num(key, value)?,
            "experiment.eval_beam" => p.eval_beam = num(key, value)?,
            "experiment.bucket_edges" => p.bucket_edges = list(key, value)?,
            _ => bail!(Config, "unknown key {key:?}"),
        }
        Ok(())
    }

    /// Every key with its current value, in a form `parse` reads back.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let t = &self.train;
        let p = &self.protocol;
        let s = t.schedule.unwrap_or(MixingSchedule {
            autoencode: 0,
            denoise: 0,
            reinforce: 0,
        });
        let join = |v: &[String]| v.join(",");
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("data.kind", d.kind.to_string());
        kv("data.vocab_size", d.vocab_size.to_string());
        kv("data.min_len", d.min_len.to_string());
        kv("data.max_len", d.max_len.to_string());
        kv("data.n_train", d.n_train.to_string());
        kv("data.n_dev", d.n_dev.to_string());
        kv("data.n_test", d.n_test.to_string());
        kv("data.seed", d.seed.to_string());
        kv("data.map_seed", d.map_seed.to_string());
        kv("data.src_prefix", d.src_prefix.clone());
        kv("data.tgt_prefix", d.tgt_prefix.clone());
        kv("vocab.bpe_merges", self.vocab.bpe_merges.to_string());
        kv("vocab.min_freq", self.vocab.min_freq.to_string());
        kv("model.layers", self.model.layers.to_string());
        kv("model.units", self.model.units.to_string());
        kv("model.embed", self.model.embed.to_string());
        kv("model.score", self.model.score.to_string());
        kv("model.input_feeding", self.model.input_feeding.to_string());
        kv("model.seed", self.model_seed.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.max_steps", t.max_steps.to_string());
        kv("train.joint_max_steps", t.joint_max_steps.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.lr0", t.lr.lr0.to_string());
        kv("train.halve_start", t.lr.halve_start.to_string());
        kv("train.halve_every", t.lr.halve_every.to_string());
        kv("train.clip_norm", t.clip_norm.unwrap_or(0.0).to_string());
        kv("train.dropout", t.dropout.to_string());
        kv("train.lambda_a", s.autoencode.to_string());
        kv("train.lambda_d", s.denoise.to_string());
        kv("train.lambda_r", s.reinforce.to_string());
        kv("train.aux_mode", format!("{:?}", t.aux_mode).to_lowercase());
        kv(
            "train.gate",
            match t.gate {
                PhaseGate::Gated => "gated",
                PhaseGate::AllConverge => "all-converge",
                PhaseGate::Immediate => "immediate",
            }
            .into(),
        );
        kv("train.window", t.monitor.window.to_string());
        kv("train.enter_threshold", t.monitor.enter_threshold.to_string());
        kv("train.stop_threshold", t.monitor.stop_threshold.to_string());
        kv(
            "train.noise_side",
            match t.noise_side {
                NoiseSide::Target => "target",
                NoiseSide::Input => "input",
            }
            .into(),
        );
        kv("train.rl_baseline", t.rl.baseline.to_string());
        kv("train.rollout_cap", t.rl.cap_factor.to_string());
        kv("train.dev_bleu", t.dev_bleu.to_string());
        kv("train.seed", t.seed.to_string());
        kv("decode.beam", self.decode.beam_size.to_string());
        kv("decode.length_norm", self.decode.length_norm.to_string());
        kv("decode.max_len", self.decode.max_len.unwrap_or(0).to_string());
        kv("experiment.sweep_values", join(&p.sweep_values.iter().map(u32::to_string).collect::<Vec<_>>()));
        kv("experiment.sweep_steps", p.sweep_steps.unwrap_or(0).to_string());
        kv("experiment.swap_tgt_prefix", p.swap_tgt_prefix.clone());
        kv("experiment.swap_map_seed", p.swap_map_seed.to_string());
        kv("experiment.swap_steps", p.swap_steps.unwrap_or(0).to_string());
        kv("experiment.random_encoder_seed", p.random_encoder_seed.to_string());
        kv("experiment.eval_beam", p.eval_beam.to_string());
        kv("experiment.bucket_edges", join(&p.bucket_edges.iter().map(usize::to_string).collect::<Vec<_>>()));
        o
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Input(m) => m.clone(),
        other => other.to_string(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn opt_steps(key: &str, value: &str) -> Result<Option<u64>> {
    let v: u64 = num(key, value)?;
    Ok((v > 0).then_some(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile_validates() {
        let c = ExperimentConfig::desk();
        c.validate().unwrap();
        let m = c.model.with_vocab(64, 64);
        assert_eq!((m.layers, m.units, m.embed), (2, 64, 32));
        assert_eq!((c.data.n_train, c.data.n_dev, c.data.n_test), (5000, 500, 500));
        assert_eq!(c.data.vocab_size + 4, 64);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::desk();
        c.set("train.lambda_r", "0").unwrap();
        c.set("model.score", "bilinear").unwrap();
        c.set("train.gate", "all-converge").unwrap();
        c.set("experiment.sweep_values", "0, 2,4").unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_error_with_line() {
        let e = ExperimentConfig::parse("# comment\n\ntrain.batch_size = 8\ntrain.bach_size = 8\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("line 4") && m.contains("bach_size")), "{e}");
        assert!(ExperimentConfig::parse("train.batch_size 8").is_err());
        assert!(ExperimentConfig::parse("train.batch_size = eight").is_err());
        assert!(ExperimentConfig::parse("train.batch_size = 0").is_err());
    }

    #[test]
    fn zero_ratios_disable_auxiliary_objectives() {
        let c = ExperimentConfig::parse("train.lambda_a = 0\ntrain.lambda_d = 0\ntrain.lambda_r = 0\n").unwrap();
        assert_eq!(c.train.schedule, None);
        let c = ExperimentConfig::parse("train.lambda_a = 1\ntrain.lambda_d = 0\ntrain.lambda_r = 0\n").unwrap();
        assert_eq!(c.train.schedule, Some(MixingSchedule::new(1, 0, 0).unwrap()));
        assert_eq!(c.train.aux_mode, crate::scheduler::AuxMode::Additional);
    }
}
