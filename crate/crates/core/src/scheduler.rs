//! Multi-objective training loop.
//!
//! In the joint phase every batch gets a `D1` likelihood update followed by
//! one auxiliary update chosen by rotating a batch counter through the
//! mixing ratio. Once the dev loss plateaus the `D2` parameters are frozen
//! and training continues on `D1` alone until it converges.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode;
use crate::error::{bail, Error, Result};
use crate::eval;
use crate::model::{Ctx, Decoder, Model, ModelParameters, Partition};
use crate::objectives::{self, Batch, NoiseSide, PassMode, RlSettings};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    J1,
    J2,
    JD,
    JRL,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::J1 => "J1",
            Objective::J2 => "J2",
            Objective::JD => "JD",
            Objective::JRL => "JRL",
        })
    }
}

/// Consecutive batch counts given to autoencoding, denoising and
/// reinforcement in one rotation cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixingSchedule {
    pub autoencode: u32,
    pub denoise: u32,
    pub reinforce: u32,
}

impl MixingSchedule {
    pub fn new(autoencode: u32, denoise: u32, reinforce: u32) -> Result<Self> {
        let s = MixingSchedule {
            autoencode,
            denoise,
            reinforce,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.period() == 0 {
            bail!(Config, "mixing ratios are all zero");
        }
        Ok(())
    }

    pub fn period(&self) -> u64 {
        self.autoencode as u64 + self.denoise as u64 + self.reinforce as u64
    }
}

impl Default for MixingSchedule {
    fn default() -> Self {
        MixingSchedule {
            autoencode: 5,
            denoise: 2,
            reinforce: 2,
        }
    }
}

impl fmt::Display for MixingSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.autoencode, self.denoise, self.reinforce)
    }
}

/// Auxiliary objective for batch counter `c`.
pub fn select_objective(c: u64, schedule: &MixingSchedule) -> Result<Objective> {
    schedule.validate()?;
    let r = c % schedule.period();
    Ok(if r < schedule.autoencode as u64 {
        Objective::J2
    } else if r >= schedule.autoencode as u64 + schedule.denoise as u64 {
        Objective::JRL
    } else {
        Objective::JD
    })
}

/// Global gradient norm before and the scale applied after clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub scale: f64,
}

/// `p <- p - lr * scale * g`, with `scale` shrinking the global norm of the
/// applied gradients to `clip_norm`. Gradients of frozen partitions are
/// ignored. A non-finite gradient leaves every parameter untouched.
pub fn sgd_step(
    params: &mut ModelParameters,
    grads: &BTreeMap<String, Tensor<f32>>,
    lr: f32,
    clip_norm: Option<f32>,
    frozen: &[Partition],
) -> Result<StepStats> {
    let mut active = Vec::with_capacity(grads.len());
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else {
            bail!(Input, "gradient for unknown parameter {name}");
        };
        if p.shape() != g.shape() {
            bail!(Shape, "gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape());
        }
        if !g.is_finite() {
            bail!(Numeric, "non-finite gradient for {name}");
        }
        if !frozen.contains(&Partition::of(name)?) {
            active.push((name, g));
        }
    }
    let norm = active.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    let scale = match clip_norm {
        Some(c) if norm > c as f64 => c as f64 / norm,
        _ => 1.0,
    };
    let step = (lr as f64 * scale) as f32;
    for (name, g) in active {
        let p = params.get_mut(name).expect("checked above");
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= step * gv;
        }
    }
    Ok(StepStats { grad_norm: norm, scale })
}

/// Step-decay learning rate: constant until `halve_start`, then halved once
/// on entry and again every `halve_every` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f32,
    pub halve_start: u64,
    pub halve_every: u64,
}

impl LrSchedule {
    pub const FULL_SCALE_TOTAL_STEPS: u64 = 680_000;

    pub fn full_scale() -> Self {
        LrSchedule {
            lr0: 1.0,
            halve_start: 340_000,
            halve_every: 34_000,
        }
    }

    pub fn at(&self, step: u64) -> f32 {
        if step < self.halve_start {
            return self.lr0;
        }
        let halvings = 1 + (step - self.halve_start) / self.halve_every.max(1);
        self.lr0 * 0.5f32.powi(halvings.min(i32::MAX as u64) as i32)
    }
}

pub fn lr_schedule(step: u64, schedule: &LrSchedule) -> f32 {
    schedule.at(step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Joint,
    Frozen,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Joint => "joint",
            Phase::Frozen => "frozen",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    EnterPhase2,
    Stop,
}

/// Plateau detector on the dev loss.
///
/// The improvement over the last `window` evaluations is
/// `(best_before - best) / best_before`, where `best_before` is the lowest
/// loss up to and including the first of those evaluations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceMonitor {
    pub window: usize,
    pub enter_threshold: f64,
    pub stop_threshold: f64,
}

impl Default for ConvergenceMonitor {
    fn default() -> Self {
        ConvergenceMonitor {
            window: 3,
            enter_threshold: 0.01,
            stop_threshold: 0.001,
        }
    }
}

impl ConvergenceMonitor {
    pub fn improvement(&self, history: &[f64]) -> Option<f64> {
        let k = self.window.max(1);
        if history.len() < k {
            return None;
        }
        let before = history[..=history.len() - k].iter().copied().fold(f64::INFINITY, f64::min);
        let best = history.iter().copied().fold(f64::INFINITY, f64::min);
        Some((before - best) / before.abs().max(f64::MIN_POSITIVE))
    }

    pub fn decide(&self, history: &[f64], phase: Phase) -> Decision {
        let Some(imp) = self.improvement(history) else {
            return Decision::Continue;
        };
        match phase {
            Phase::Joint if imp < self.enter_threshold => Decision::EnterPhase2,
            Phase::Frozen if imp < self.stop_threshold => Decision::Stop,
            _ => Decision::Continue,
        }
    }
}

pub fn convergence_monitor(history: &[f64], phase: Phase, monitor: &ConvergenceMonitor) -> Decision {
    monitor.decide(history, phase)
}

/// How the auxiliary update relates to the `D1` update in the joint phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AuxMode {
    /// Every batch gets a `D1` update and then an auxiliary update.
    #[default]
    Additional,
    /// Batches alternate between a `D1` update and an auxiliary update.
    Exclusive,
}

impl FromStr for AuxMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additional" => Ok(AuxMode::Additional),
            "exclusive" => Ok(AuxMode::Exclusive),
            other => Err(Error::Config(format!("unknown aux mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PhaseGate {
    /// Freeze `D2` once the dev loss plateaus loosely, then train `D1` alone.
    #[default]
    Gated,
    /// Never freeze; everything trains jointly until the tight plateau.
    AllConverge,
    /// Start frozen: `D1` only from the first step.
    Immediate,
}

impl FromStr for PhaseGate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(PhaseGate::Gated),
            "all-converge" => Ok(PhaseGate::AllConverge),
            "immediate" => Ok(PhaseGate::Immediate),
            other => Err(Error::Config(format!("unknown phase gate {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Hard cap on total steps.
    pub max_steps: u64,
    /// Hard cap on joint-phase steps.
    pub joint_max_steps: u64,
    pub eval_every: u64,
    pub lr: LrSchedule,
    pub clip_norm: Option<f32>,
    pub dropout: f32,
    /// `None` disables auxiliary objectives.
    pub schedule: Option<MixingSchedule>,
    pub aux_mode: AuxMode,
    pub gate: PhaseGate,
    pub monitor: ConvergenceMonitor,
    pub noise_side: NoiseSide,
    pub rl: RlSettings,
    /// Greedy dev BLEU at every evaluation.
    pub dev_bleu: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_steps: 3000,
            joint_max_steps: 3000,
            eval_every: 200,
            lr: LrSchedule {
                lr0: 1.0,
                halve_start: 1500,
                halve_every: 300,
            },
            clip_norm: Some(5.0),
            dropout: 0.2,
            schedule: Some(MixingSchedule::default()),
            aux_mode: AuxMode::Additional,
            gate: PhaseGate::Gated,
            monitor: ConvergenceMonitor::default(),
            noise_side: NoiseSide::Target,
            rl: RlSettings::default(),
            dev_bleu: false,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if self.eval_every == 0 {
            bail!(Config, "eval_every must be positive");
        }
        if self.lr.halve_every == 0 {
            bail!(Config, "halve_every must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must lie in [0, 1)");
        }
        if self.monitor.window == 0 {
            bail!(Config, "convergence window must be positive");
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub phase: Phase,
    /// Objectives applied on this step, in order.
    pub objectives: Vec<Objective>,
    pub j1_loss: Option<f32>,
    pub aux_loss: Option<f32>,
    pub lr: f32,
    pub dev_loss: Option<f64>,
    pub dev_bleu: Option<f64>,
}

impl LogRecord {
    pub const CSV_HEADER: &'static str = "step,phase,objective,j1_loss,aux_loss,lr,dev_loss,dev_bleu";

    pub fn csv_line(&self) -> String {
        let objs: Vec<String> = self.objectives.iter().map(ToString::to_string).collect();
        let opt32 = |v: Option<f32>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let opt64 = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{},{},{},{},{:.6},{},{}",
            self.step,
            self.phase,
            objs.join("+"),
            opt32(self.j1_loss),
            opt32(self.aux_loss),
            self.lr,
            opt64(self.dev_loss),
            opt64(self.dev_bleu)
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Step at which `D2` was frozen.
    pub frozen_at: Option<u64>,
    pub skipped_updates: u64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LogRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn dev_history(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.dev_loss).collect()
    }

    pub fn steps(&self) -> u64 {
        self.records.last().map_or(0, |r| r.step)
    }
}

/// Per-token `D1` loss on `data` without dropout.
pub fn dev_loss(model: &Model, data: &Batch, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (s, t) in data.src.chunks(chunk.max(1)).zip(data.tgt.chunks(chunk.max(1))) {
        let mut ctx: Ctx<f32> = Ctx::eval(model);
        let (loss, n) = objectives::graph_j1(&mut ctx, &Batch::new(s.to_vec(), t.to_vec())?)?;
        total += ctx.graph.value(loss).item() as f64 * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        bail!(Input, "empty dev set");
    }
    Ok(total / tokens as f64)
}

/// Greedy `D1` outputs for every source, with the frame and EOS removed.
pub fn greedy_translate(model: &Model, srcs: &[Vec<u32>], chunk: usize) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(srcs.len());
    for part in srcs.chunks(chunk.max(1)) {
        let lens: Vec<usize> = part.iter().map(|s| decode::default_max_len(s)).collect();
        for h in decode::greedy_decode_batch(model, Decoder::D1, part, &lens)? {
            out.push(decode::strip_eos(&h).to_vec());
        }
    }
    Ok(out)
}

/// Strips BOS/EOS framing.
pub fn unframe(seq: &[u32]) -> Vec<u32> {
    seq.iter().copied().filter(|&t| t != BOS && t != EOS).collect()
}

/// Greedy corpus BLEU of `D1` on `data` over token ids.
pub fn id_bleu(model: &Model, data: &Batch) -> Result<f64> {
    let hyps = greedy_translate(model, &data.src, 128)?;
    let refs: Vec<Vec<u32>> = data.tgt.iter().map(|t| unframe(t)).collect();
    Ok(eval::corpus_bleu(&hyps, &refs, 4, false)?.bleu)
}

/// Called after every step with the record just logged and the live model.
pub trait TrainObserver {
    fn after_step(&mut self, record: &LogRecord, model: &Model) -> Result<()>;
}

impl<F: FnMut(&LogRecord, &Model) -> Result<()>> TrainObserver for F {
    fn after_step(&mut self, record: &LogRecord, model: &Model) -> Result<()> {
        self(record, model)
    }
}

struct BatchStream {
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn next(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn check_loss(value: f32, step: u64, obj: Objective) -> Result<()> {
    if !value.is_finite() {
        bail!(Numeric, "non-finite {obj} loss {value} at step {step}");
    }
    Ok(())
}

pub fn train(model: &mut Model, train_data: &Batch, dev: &Batch, cfg: &TrainConfig) -> Result<TrainLog> {
    train_observed(model, train_data, dev, cfg, &mut |_: &LogRecord, _: &Model| Ok(()))
}

/// The training loop with a per-step observer.
pub fn train_observed(
    model: &mut Model,
    train_data: &Batch,
    dev: &Batch,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_data.is_empty() {
        bail!(Input, "empty training set");
    }
    if dev.is_empty() {
        bail!(Input, "empty dev set");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stream = BatchStream {
        order: (0..train_data.len()).collect(),
        pos: train_data.len(),
    };
    let mut phase = if cfg.gate == PhaseGate::Immediate || cfg.schedule.is_none() {
        Phase::Frozen
    } else {
        Phase::Joint
    };
    let mut log = TrainLog::default();
    let mut history: Vec<f64> = Vec::new();
    // Index into `history` of the last evaluation before the freeze.
    let mut frozen_from = 0usize;
    let mut c: u64 = 0;
    let mut step: u64 = 0;

    while step < cfg.max_steps {
        let lr = cfg.lr.at(step);
        let idx = stream.next(cfg.batch_size, &mut rng);
        let batch = Batch {
            src: idx.iter().map(|&i| train_data.src[i].clone()).collect(),
            tgt: idx.iter().map(|&i| train_data.tgt[i].clone()).collect(),
        };
        let frozen: &[Partition] = if phase == Phase::Frozen { &[Partition::Decoder2] } else { &[] };

        let (run_j1, run_aux) = match (phase, cfg.aux_mode) {
            (Phase::Frozen, _) => (true, false),
            (Phase::Joint, AuxMode::Additional) => (true, true),
            (Phase::Joint, AuxMode::Exclusive) => (step % 2 == 0, step % 2 == 1),
        };
        let mut record = LogRecord {
            step: step + 1,
            phase,
            objectives: Vec::new(),
            j1_loss: None,
            aux_loss: None,
            lr,
            dev_loss: None,
            dev_bleu: None,
        };

        if run_j1 {
            let mode = PassMode {
                dropout: cfg.dropout,
                seed: rng.gen(),
            };
            let out = objectives::loss_j1(model, &batch, mode)?;
            check_loss(out.loss, step + 1, Objective::J1)?;
            apply(model, &out.grads, lr, cfg.clip_norm, frozen, &mut log, step + 1, Objective::J1)?;
            record.objectives.push(Objective::J1);
            record.j1_loss = Some(out.loss);
        }
        if run_aux {
            let schedule = cfg.schedule.as_ref().expect("joint phase has a schedule");
            let obj = select_objective(c, schedule)?;
            let grads = match obj {
                Objective::J2 => {
                    let mode = PassMode {
                        dropout: cfg.dropout,
                        seed: rng.gen(),
                    };
                    let out = objectives::loss_j2(model, &batch.src, mode)?;
                    record.aux_loss = Some(out.loss);
                    out.grads
                }
                Objective::JD => {
                    let noised: Vec<Vec<u32>> = batch
                        .src
                        .iter()
                        .map(|x| objectives::make_noise(x, &mut rng).noised)
                        .collect();
                    let mode = PassMode {
                        dropout: cfg.dropout,
                        seed: rng.gen(),
                    };
                    let out = objectives::loss_jd(model, &batch.src, &noised, cfg.noise_side, mode)?;
                    record.aux_loss = Some(out.loss);
                    out.grads
                }
                Objective::JRL => {
                    let out = objectives::loss_jrl(model, &batch.src, &mut rng, cfg.rl)?;
                    record.aux_loss = Some(out.loss.loss);
                    out.loss.grads
                }
                Objective::J1 => unreachable!("select_objective never yields J1"),
            };
            check_loss(record.aux_loss.unwrap_or(0.0), step + 1, obj)?;
            apply(model, &grads, lr, cfg.clip_norm, frozen, &mut log, step + 1, obj)?;
            record.objectives.push(obj);
            c += 1;
        }
        step += 1;

        let mut stop = false;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let dl = dev_loss(model, dev, 128)?;
            record.dev_loss = Some(dl);
            if cfg.dev_bleu {
                record.dev_bleu = Some(id_bleu(model, dev)?);
            }
            history.push(dl);
            match phase {
                Phase::Joint => {
                    let decision = match cfg.gate {
                        PhaseGate::AllConverge => {
                            // The loose plateau is not a stopping point here.
                            let d = cfg.monitor.decide(&history, Phase::Frozen);
                            if d == Decision::Stop {
                                Decision::Stop
                            } else {
                                Decision::Continue
                            }
                        }
                        _ => cfg.monitor.decide(&history, Phase::Joint),
                    };
                    match decision {
                        Decision::Stop => stop = true,
                        Decision::EnterPhase2 => {
                            phase = Phase::Frozen;
                            frozen_from = history.len() - 1;
                            log.frozen_at = Some(step);
                        }
                        Decision::Continue => {}
                    }
                }
                Phase::Frozen => {
                    if cfg.monitor.decide(&history[frozen_from..], Phase::Frozen) == Decision::Stop {
                        stop = true;
                    }
                }
            }
        }
        if phase == Phase::Joint && cfg.gate == PhaseGate::Gated && step >= cfg.joint_max_steps {
            if record.dev_loss.is_none() {
                let dl = dev_loss(model, dev, 128)?;
                record.dev_loss = Some(dl);
                history.push(dl);
            }
            phase = Phase::Frozen;
            frozen_from = history.len() - 1;
            log.frozen_at = Some(step);
        }
        observer.after_step(&record, model)?;
        log.records.push(record);
        if stop {
            break;
        }
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn apply(
    model: &mut Model,
    grads: &BTreeMap<String, Tensor<f32>>,
    lr: f32,
    clip: Option<f32>,
    frozen: &[Partition],
    log: &mut TrainLog,
    step: u64,
    obj: Objective,
) -> Result<()> {
    match sgd_step(&mut model.params, grads, lr, clip, frozen) {
        Ok(_) => Ok(()),
        Err(Error::Numeric(msg)) => {
            log::warn!("step {step}: skipped {obj} update: {msg}");
            log.skipped_updates += 1;
            Ok(())
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ScoreVariant};

    #[test]
    fn default_ratio_rotation() {
        let s = MixingSchedule::new(5, 2, 2).unwrap();
        let seq: Vec<Objective> = (0..10).map(|c| select_objective(c, &s).unwrap()).collect();
        use Objective::*;
        assert_eq!(seq, vec![J2, J2, J2, J2, J2, JD, JD, JRL, JRL, J2]);
    }

    #[test]
    fn degenerate_ratios() {
        let s = MixingSchedule::new(1, 0, 0).unwrap();
        assert!((0..20).all(|c| select_objective(c, &s).unwrap() == Objective::J2));
        let s = MixingSchedule::new(0, 1, 1).unwrap();
        for c in 0..20 {
            let want = if c % 2 == 0 { Objective::JD } else { Objective::JRL };
            assert_eq!(select_objective(c, &s).unwrap(), want);
        }
        assert!(MixingSchedule::new(0, 0, 0).is_err());
        let zero = MixingSchedule {
            autoencode: 0,
            denoise: 0,
            reinforce: 0,
        };
        assert!(matches!(select_objective(0, &zero), Err(Error::Config(_))));
    }

    fn scalar_params(v: f32) -> ModelParameters {
        let mut p = ModelParameters::default();
        p.insert("enc/x".into(), Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    fn grads(v: &[f32]) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("enc/x".to_string(), Tensor::new(vec![v.len()], v.to_vec()).unwrap())])
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar_params(1.0);
        sgd_step(&mut p, &grads(&[0.5]), 0.0, None, &[]).unwrap();
        assert_eq!(p.get("enc/x").unwrap().item(), 1.0);
        sgd_step(&mut p, &grads(&[0.5]), 1.0, None, &[]).unwrap();
        assert_eq!(p.get("enc/x").unwrap().item(), 0.5);
    }

    #[test]
    fn clipping_halves_norm_ten() {
        let mut p = ModelParameters::default();
        p.insert("enc/x".into(), Tensor::zeros(&[2])).unwrap();
        let g = grads(&[6.0, 8.0]);
        let stats = sgd_step(&mut p, &g, 1.0, Some(5.0), &[]).unwrap();
        assert!((stats.grad_norm - 10.0).abs() < 1e-12);
        assert_eq!(stats.scale, 0.5);
        assert_eq!(p.get("enc/x").unwrap().data(), &[-3.0, -4.0]);
    }

    #[test]
    fn non_finite_gradient_leaves_params() {
        let mut p = ModelParameters::default();
        p.insert("enc/a".into(), Tensor::full(&[1], 1.0)).unwrap();
        p.insert("enc/x".into(), Tensor::full(&[1], 1.0)).unwrap();
        let mut g = grads(&[f32::NAN]);
        g.insert("enc/a".into(), Tensor::full(&[1], 1.0));
        assert!(matches!(sgd_step(&mut p, &g, 1.0, None, &[]), Err(Error::Numeric(_))));
        assert_eq!(p.get("enc/a").unwrap().item(), 1.0);
        assert!(sgd_step(&mut p, &BTreeMap::from([("enc/zz".to_string(), Tensor::full(&[1], 1.0))]), 1.0, None, &[]).is_err());
    }

    #[test]
    fn frozen_partition_untouched() {
        let mut p = ModelParameters::default();
        p.insert("dec2/x".into(), Tensor::full(&[1], 1.0)).unwrap();
        let g = BTreeMap::from([("dec2/x".to_string(), Tensor::full(&[1], 1.0))]);
        sgd_step(&mut p, &g, 1.0, None, &[Partition::Decoder2]).unwrap();
        assert_eq!(p.get("dec2/x").unwrap().item(), 1.0);
    }

    #[test]
    fn lr_examples() {
        let full = LrSchedule::full_scale();
        assert_eq!((full.lr0, full.halve_start, full.halve_every), (1.0, 340_000, 34_000));
        assert_eq!(LrSchedule::FULL_SCALE_TOTAL_STEPS, 680_000);
        assert_eq!(full.at(0), 1.0);
        assert_eq!(full.at(339_999), 1.0);
        let s = LrSchedule {
            lr0: 1.0,
            halve_start: 100,
            halve_every: 50,
        };
        assert_eq!(lr_schedule(200, &s), 0.125);
        assert_eq!(s.at(100), 0.5);
        let mut prev = f32::INFINITY;
        for step in 0..1000 {
            assert!(s.at(step) <= prev);
            prev = s.at(step);
        }
    }

    #[test]
    fn monitor_examples() {
        let m = ConvergenceMonitor::default();
        let decreasing: Vec<f64> = (0..8).map(|i| 10.0 * 0.95f64.powi(i)).collect();
        assert_eq!(m.decide(&decreasing, Phase::Joint), Decision::Continue);
        assert_eq!(m.decide(&[4.0; 4], Phase::Joint), Decision::EnterPhase2);
        let h = [10.0, 9.95, 9.94, 9.94];
        assert!((m.improvement(&h).unwrap() - 0.01 / 9.95).abs() < 1e-12);
        assert_eq!(convergence_monitor(&h, Phase::Joint, &m), Decision::EnterPhase2);
        assert_eq!(m.decide(&h, Phase::Frozen), Decision::Continue);
        assert_eq!(m.decide(&[4.0; 4], Phase::Frozen), Decision::Stop);
        assert_eq!(m.decide(&[4.0; 2], Phase::Joint), Decision::Continue);
    }

    fn toy_data(n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for _ in 0..n {
            let len = rng.gen_range(2..5);
            let words: Vec<u32> = (0..len).map(|_| rng.gen_range(4..8)).collect();
            let mut s = vec![BOS];
            s.extend(&words);
            s.push(EOS);
            let mut t = vec![BOS];
            t.extend(words.iter().rev().map(|w| w + 1));
            t.push(EOS);
            src.push(s);
            tgt.push(t);
        }
        Batch::new(src, tgt).unwrap()
    }

    fn toy_model() -> Model {
        Model::new(
            ModelConfig {
                layers: 1,
                units: 8,
                embed: 6,
                src_vocab: 8,
                tgt_vocab: 9,
                score: ScoreVariant::Additive,
                input_feeding: true,
            },
            3,
        )
        .unwrap()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_steps: 24,
            joint_max_steps: 12,
            eval_every: 4,
            monitor: ConvergenceMonitor {
                window: 3,
                enter_threshold: 0.0,
                stop_threshold: 0.0,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn joint_phase_applies_one_j1_and_one_aux_per_batch() {
        let mut m = toy_model();
        let log = train(&mut m, &toy_data(20, 1), &toy_data(6, 2), &toy_cfg()).unwrap();
        let joint: Vec<_> = log.records.iter().filter(|r| r.phase == Phase::Joint).collect();
        assert_eq!(joint.len(), 12);
        let s = MixingSchedule::default();
        for (c, r) in joint.iter().enumerate() {
            assert_eq!(r.objectives, vec![Objective::J1, select_objective(c as u64, &s).unwrap()]);
        }
        assert_eq!(log.frozen_at, Some(12));
        assert!(log.records[12..].iter().all(|r| r.objectives == vec![Objective::J1]));
    }

    #[test]
    fn frozen_phase_keeps_d2_bit_identical() {
        let mut m = toy_model();
        let mut snapshot: Option<Vec<Vec<f32>>> = None;
        let mut checks = 0;
        let mut obs = |r: &LogRecord, model: &Model| -> Result<()> {
            let d2: Vec<Vec<f32>> = model.params.partition(Partition::Decoder2).map(|(_, t)| t.data().to_vec()).collect();
            if r.phase == Phase::Frozen {
                if let Some(prev) = &snapshot {
                    assert_eq!(prev, &d2);
                    checks += 1;
                }
            }
            snapshot = Some(d2);
            Ok(())
        };
        train_observed(&mut m, &toy_data(20, 1), &toy_data(6, 2), &toy_cfg(), &mut obs).unwrap();
        assert!(checks >= 10);
    }

    #[test]
    fn same_seed_same_log() {
        let run = || {
            let mut m = toy_model();
            train(&mut m, &toy_data(20, 1), &toy_data(6, 2), &toy_cfg()).unwrap().to_csv()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.starts_with(LogRecord::CSV_HEADER));
    }

    #[test]
    fn exclusive_mode_alternates() {
        let mut m = toy_model();
        let cfg = TrainConfig {
            aux_mode: AuxMode::Exclusive,
            max_steps: 8,
            joint_max_steps: 100,
            ..toy_cfg()
        };
        let log = train(&mut m, &toy_data(20, 1), &toy_data(6, 2), &cfg).unwrap();
        for r in &log.records {
            assert_eq!(r.objectives.len(), 1);
            assert_eq!(r.objectives[0] == Objective::J1, r.step % 2 == 1);
        }
    }

    #[test]
    fn baseline_never_touches_d2() {
        let mut m = toy_model();
        let before: Vec<f32> = m.params.partition(Partition::Decoder2).flat_map(|(_, t)| t.data().to_vec()).collect();
        let cfg = TrainConfig {
            schedule: None,
            gate: PhaseGate::Immediate,
            max_steps: 6,
            ..toy_cfg()
        };
        let log = train(&mut m, &toy_data(20, 1), &toy_data(6, 2), &cfg).unwrap();
        assert!(log.records.iter().all(|r| r.phase == Phase::Frozen));
        let after: Vec<f32> = m.params.partition(Partition::Decoder2).flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }
}
