//! The bi-decoder network.
//!
//! Parameters are partitioned three ways: the shared encoder (source
//! embeddings and the bidirectional LSTM stack), decoder `D1` (target
//! language) and decoder `D2` (source reconstruction). Each decoder owns its
//! embeddings, LSTM stack, initial-state projection, attention and output
//! layer; nothing is shared between the two decoders.

mod network;

pub use network::{
    attention, decoder_step, encode, init_decoder, lstm_run, teacher_forced, teacher_forced_loss, AttentionOutput,
    Ctx, DecoderMemory, DecoderState, EncoderStates, StepOutput,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

/// Content-based scoring function between an encoder state and the decoder
/// state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScoreVariant {
    /// `W [h_s; h_t]`
    Concat,
    /// `h_s^T W h_t`
    Bilinear,
    /// `v^T tanh(W1 h_s + W2 h_t)`
    #[default]
    Additive,
}

impl FromStr for ScoreVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(ScoreVariant::Concat),
            "bilinear" => Ok(ScoreVariant::Bilinear),
            "additive" => Ok(ScoreVariant::Additive),
            other => Err(Error::Config(format!("unknown attention score {other:?}"))),
        }
    }
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreVariant::Concat => "concat",
            ScoreVariant::Bilinear => "bilinear",
            ScoreVariant::Additive => "additive",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub units: usize,
    pub embed: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub score: ScoreVariant,
    pub input_feeding: bool,
}

impl ModelConfig {
    /// Four layers of 1024 units, 1024-wide embeddings.
    pub fn full_scale(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            layers: 4,
            units: 1024,
            embed: 1024,
            src_vocab,
            tgt_vocab,
            score: ScoreVariant::Additive,
            input_feeding: true,
        }
    }

    /// Two layers of 64 units, 32-wide embeddings.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            layers: 2,
            units: 64,
            embed: 32,
            ..Self::full_scale(src_vocab, tgt_vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("units", self.units),
            ("embed", self.embed),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
        ] {
            if v == 0 {
                bail!(Config, "model.{name} must be at least 1");
            }
        }
        Ok(())
    }

    /// Output vocabulary of a decoder.
    pub fn vocab_of(&self, which: Decoder) -> usize {
        match which {
            Decoder::D1 => self.tgt_vocab,
            Decoder::D2 => self.src_vocab,
        }
    }

    /// Every parameter name with its shape, in sorted name order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (l, u, e) = (self.layers, self.units, self.embed);
        let mut out = vec![("enc/embed".to_string(), vec![self.src_vocab, e])];
        for dir in ["fwd", "bwd"] {
            for layer in 0..l {
                let input = if layer == 0 { e } else { 2 * u };
                out.push((format!("enc/{dir}{layer}/w"), vec![input + u, 4 * u]));
                out.push((format!("enc/{dir}{layer}/b"), vec![4 * u]));
            }
        }
        for which in [Decoder::D1, Decoder::D2] {
            let p = which.prefix();
            let vocab = self.vocab_of(which);
            out.push((format!("{p}/embed"), vec![vocab, e]));
            out.push((format!("{p}/init/w"), vec![u, 2 * l * u]));
            out.push((format!("{p}/init/b"), vec![2 * l * u]));
            for layer in 0..l {
                let input = if layer == 0 {
                    e + if self.input_feeding { u } else { 0 }
                } else {
                    u
                };
                out.push((format!("{p}/lstm{layer}/w"), vec![input + u, 4 * u]));
                out.push((format!("{p}/lstm{layer}/b"), vec![4 * u]));
            }
            match self.score {
                ScoreVariant::Additive => {
                    out.push((format!("{p}/attn/w1"), vec![2 * u, u]));
                    out.push((format!("{p}/attn/w2"), vec![u, u]));
                    out.push((format!("{p}/attn/v"), vec![u, 1]));
                }
                ScoreVariant::Concat => out.push((format!("{p}/attn/w"), vec![3 * u, 1])),
                ScoreVariant::Bilinear => out.push((format!("{p}/attn/w"), vec![u, 2 * u])),
            }
            out.push((format!("{p}/attn/wa"), vec![3 * u, u]));
            out.push((format!("{p}/attn/ba"), vec![u]));
            out.push((format!("{p}/out/w"), vec![u, vocab]));
            out.push((format!("{p}/out/b"), vec![vocab]));
        }
        out.sort();
        out
    }
}

/// Which decoder a computation runs through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decoder {
    /// Target-language decoder.
    D1,
    /// Source-reconstruction decoder.
    D2,
}

impl Decoder {
    pub fn prefix(self) -> &'static str {
        match self {
            Decoder::D1 => "dec1",
            Decoder::D2 => "dec2",
        }
    }

    pub fn partition(self) -> Partition {
        match self {
            Decoder::D1 => Partition::Decoder1,
            Decoder::D2 => Partition::Decoder2,
        }
    }
}

impl FromStr for Decoder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d1" | "D1" => Ok(Decoder::D1),
            "d2" | "D2" => Ok(Decoder::D2),
            other => Err(Error::Config(format!("unknown decoder {other:?}, expected d1 or d2"))),
        }
    }
}

/// Ownership group of a parameter tensor. Ordered encoder first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Encoder,
    Decoder1,
    Decoder2,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Encoder, Partition::Decoder1, Partition::Decoder2];

    pub fn label(self) -> &'static str {
        match self {
            Partition::Encoder => "enc",
            Partition::Decoder1 => "dec1",
            Partition::Decoder2 => "dec2",
        }
    }

    pub fn of(name: &str) -> Result<Partition> {
        match name.split('/').next() {
            Some("enc") => Ok(Partition::Encoder),
            Some("dec1") => Ok(Partition::Decoder1),
            Some("dec2") => Ok(Partition::Decoder2),
            _ => Err(Error::Input(format!("parameter {name:?} has no partition label"))),
        }
    }
}

/// Named parameter store. Every name starts with its partition label.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParameters {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelParameters {
    pub fn insert(&mut self, name: String, tensor: Tensor<f32>) -> Result<()> {
        Partition::of(&name)?;
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Tensors ordered by `(partition, name)`.
    pub fn iter_partitioned(&self) -> Vec<(Partition, &str, &Tensor<f32>)> {
        let mut out: Vec<_> = self
            .tensors
            .iter()
            .map(|(k, v)| (Partition::of(k).expect("validated on insert"), k.as_str(), v))
            .collect();
        out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        out
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.iter().filter(move |(k, _)| Partition::of(k).ok() == Some(p))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Uniform `[-0.1, 0.1]` initialisation in sorted name order, with LSTM
/// forget-gate biases set to 1.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = config.units;
    let mut params = ModelParameters::default();
    for (name, shape) in config.param_shapes() {
        let numel = shape.iter().product();
        let mut data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        let is_lstm_bias = name.ends_with("/b") && (name.contains("/fwd") || name.contains("/bwd") || name.contains("/lstm"));
        if is_lstm_bias {
            // Gate order: input, forget, candidate, output.
            data[u..2 * u].fill(1.0);
        }
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_parameters(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Rebuilds the configuration from parameter names and shapes.
    pub fn from_params(params: ModelParameters) -> Result<Self> {
        let embed = params.get("enc/embed")?;
        let (src_vocab, e) = embed.dims2();
        let layers = (0..).take_while(|l| params.contains(&format!("enc/fwd{l}/w"))).count();
        let u = params.get("enc/fwd0/b")?.numel() / 4;
        let tgt_vocab = params.get("dec1/embed")?.rows();
        let score = if params.contains("dec1/attn/w1") {
            ScoreVariant::Additive
        } else if params.get("dec1/attn/w")?.cols() == 1 {
            ScoreVariant::Concat
        } else {
            ScoreVariant::Bilinear
        };
        let input_feeding = params.get("dec1/lstm0/w")?.rows() == e + 2 * u;
        let config = ModelConfig {
            layers,
            units: u,
            embed: e,
            src_vocab,
            tgt_vocab,
            score,
            input_feeding,
        };
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            let have = params.get(&name)?;
            if have.shape() != shape.as_slice() {
                bail!(Config, "parameter {name:?} has shape {:?}, expected {:?}", have.shape(), shape);
            }
        }
        if params.len() != config.param_shapes().len() {
            bail!(Config, "unexpected extra parameters in store");
        }
        Ok(Model { config, params })
    }
}
