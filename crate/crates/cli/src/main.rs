use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bidecoder::decode::BeamConfig;
use bidecoder::error::{Error, Result};
use bidecoder::eval;
use bidecoder::harness::checkpoint::Checkpoint;
use bidecoder::harness::config::ExperimentConfig;
use bidecoder::harness::corpus::{generate_synthetic_task, load_parallel, read_lines, write_atomic, write_lines, ParallelCorpus};
use bidecoder::harness::experiments::{self, EncoderSource, Variant};
use bidecoder::model::Decoder;
use bidecoder::vocab::learn_bpe;

#[derive(Parser, Debug)]
#[command(name = "bidecoder", version, about = "Bi-decoder neural machine translation toolkit")]
struct Cli {
    /// Experiment config file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data, initialisation and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    D1,
    D2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Baseline,
    Ad,
    Denoising,
    Rl,
    AllConverge,
    Bidan,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Ad => Variant::AutoEncoder,
            VariantArg::Denoising => Variant::Denoising,
            VariantArg::Rl => Variant::Reinforce,
            VariantArg::AllConverge => Variant::AllConverge,
            VariantArg::Bidan => Variant::BiDan,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured synthetic corpus into a directory.
    MakeData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn BPE merges from a text file.
    LearnBpe {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Corpus directory with {train,dev,test}.{src,tgt}; defaults to the
        /// configured synthetic task.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Objectives and phase gate; without it the config is used as is.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Translate one sentence per line.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        length_norm: bool,
        #[arg(long)]
        max_len: Option<usize>,
        /// `d2` reconstructs the source.
        #[arg(long, value_enum, default_value = "d1")]
        decoder: Which,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_n: usize,
        /// Add-one smoothing for orders above 1.
        #[arg(long)]
        smooth: bool,
    },
    /// Replace a checkpoint's encoder, or run the full swap protocol when no
    /// donor is given.
    SwapEncoder {
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, conflicts_with = "random_seed")]
        donor: Option<PathBuf>,
        #[arg(long)]
        random_seed: Option<u64>,
        /// Hybrid checkpoint path (single swap).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Protocol report path; defaults to stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train every ablation variant and report dev/test BLEU.
    Ablate {
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',')]
        variants: Vec<VariantArg>,
    },
    /// Train once per autoencoding weight.
    SweepLambda {
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Comma-separated weights; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        values: Vec<u32>,
    },
    /// BLEU by source length bucket.
    ReportLengths {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Bucket lower edges; defaults to the configured edges.
        #[arg(long, value_delimiter = ',')]
        edges: Vec<usize>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    for kv in &cli.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config(format!("override `{kv}` is not KEY=VALUE")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.model_seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::MakeData { out } => {
            std::fs::create_dir_all(&out)?;
            generate_synthetic_task(&cfg.data)?.save(&out)
        }
        Command::LearnBpe { input, merges, output } => {
            let table = learn_bpe(&read_lines(&input)?, merges)?;
            let lines: Vec<String> = table.pairs().iter().map(|(l, r)| format!("{l} {r}")).collect();
            write_lines(&output, &lines)
        }
        Command::Train { data, out, log, variant } => {
            let corpus = match &data {
                Some(dir) => ParallelCorpus::load(dir)?,
                None => generate_synthetic_task(&cfg.data)?,
            };
            let prepared = experiments::prepare(&corpus, &cfg.vocab)?;
            let train = match variant {
                Some(v) => Variant::from(v).configure(&cfg.train)?,
                None => cfg.train.clone(),
            };
            let (ckpt, train_log) = experiments::train_model(&cfg, &train, &prepared)?;
            ckpt.save(&out)?;
            if let Some(p) = log {
                write_atomic(&p, train_log.to_csv().as_bytes())?;
            }
            let report = experiments::test_report(&ckpt, &corpus.test, cfg.protocol.eval_beam)?;
            eprintln!("steps {} frozen_at {:?} test BLEU {:.4}", train_log.steps(), train_log.frozen_at, report.bleu);
            Ok(())
        }
        Command::Translate {
            ckpt,
            input,
            output,
            beam,
            length_norm,
            max_len,
            decoder,
        } => {
            let model = Checkpoint::load(&ckpt)?;
            let sentences = read_lines(&input)?;
            let beam = BeamConfig {
                beam_size: beam.unwrap_or(cfg.decode.beam_size),
                max_len: max_len.or(cfg.decode.max_len),
                length_norm: length_norm || cfg.decode.length_norm,
            };
            let which = match decoder {
                Which::D1 => Decoder::D1,
                Which::D2 => Decoder::D2,
            };
            let hyps = experiments::decode_with(&model, which, &sentences, beam)?;
            match output {
                Some(p) => write_lines(&p, &hyps),
                None => emit(None, &hyps.iter().map(|h| format!("{h}\n")).collect::<String>()),
            }
        }
        Command::Evaluate {
            hyp,
            reference,
            max_n,
            smooth,
        } => {
            let hyps = read_lines(&hyp)?;
            let refs = read_lines(&reference)?;
            let report = eval::corpus_bleu(&eval::split_lines(&hyps), &eval::split_lines(&refs), max_n, smooth)?;
            let mut out = String::new();
            for p in &report.precisions {
                out.push_str(&format!("p{} = {:.6} ({})\n", p.n, p.value(), p.fraction()));
            }
            out.push_str(&format!("BP = {:.6}\n", report.brevity_penalty));
            out.push_str(&format!("BLEU = {:.6}\n", report.bleu));
            emit(None, &out)
        }
        Command::SwapEncoder {
            target,
            donor,
            random_seed,
            out,
            csv,
        } => {
            if donor.is_some() || random_seed.is_some() {
                let (Some(target), Some(out)) = (target, out) else {
                    return Err(Error::Config("a single swap needs --target and --out".into()));
                };
                let target = Checkpoint::load(&target)?;
                let hybrid = match (donor, random_seed) {
                    (Some(d), _) => experiments::swap_encoder(&target, EncoderSource::Donor(&Checkpoint::load(&d)?))?,
                    (None, Some(s)) => experiments::swap_encoder(&target, EncoderSource::Random(s))?,
                    (None, None) => unreachable!(),
                };
                hybrid.save(&out)
            } else {
                let target = target.map(|p| Checkpoint::load(&p)).transpose()?;
                let rows = experiments::encoder_swap_experiment(&cfg, target.as_ref())?;
                emit(csv.as_deref(), &experiments::swap_csv(&rows))
            }
        }
        Command::Ablate { csv, variants } => {
            let rows = if variants.is_empty() {
                experiments::run_ablation(&cfg)?
            } else {
                let vs: Vec<Variant> = variants.into_iter().map(Variant::from).collect();
                experiments::run_ablation_variants(&cfg, &vs)?
            };
            emit(csv.as_deref(), &experiments::ablation_csv(&rows))
        }
        Command::SweepLambda { csv, values } => {
            let values = if values.is_empty() { cfg.protocol.sweep_values.clone() } else { values };
            let points = experiments::lambda_sweep(&cfg, &values)?;
            emit(csv.as_deref(), &experiments::sweep_csv(&points))
        }
        Command::ReportLengths {
            ckpt,
            src,
            reference,
            edges,
            beam,
            csv,
        } => {
            let model = Checkpoint::load(&ckpt)?;
            let test = load_parallel(&src, &reference)?;
            let edges = if edges.is_empty() { cfg.protocol.bucket_edges.clone() } else { edges };
            let buckets = experiments::length_report(&model, &test, &edges, beam.unwrap_or(cfg.protocol.eval_beam))?;
            emit(csv.as_deref(), &eval::bucket_csv(&buckets))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
