//! Optimization loops, the continue-training protocol, and checkpoints.
//!
//! Every experiment starts from a seed model trained with the CTC objective
//! alone. Continue-training resets the learning-rate schedule, loads the seed
//! backbone, and initializes any speaker classifiers from scratch; the
//! comparison baseline is itself continue-trained with the plain objective.
//! The sequential pipeline chains two continue-training stages: enhancing at
//! a lower tap, then adaptive adversarial fine-tuning at a higher tap.
//!
//! Determinism contract: identical configs and seeds produce bit-identical
//! logs, parameters, and checkpoints, independent of thread count.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::ctc::{greedy_decode, FramePosteriors};
use crate::data::{batch_iterator, Utterance};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{
    backbone_forward, init_backbone, init_speaker_classifier, speaker_branch, BackboneConfig,
    ParamNodes, SpeakerClassifierConfig, TapPoint,
};
use crate::objectives::{assemble_objective, ObjectiveKind, ObjectiveSpec};
use crate::par;
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of total steps held at `peak_lr` before the linear decay.
    pub constant_fraction: f64,
    pub optimizer: Optimizer,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveSpec) -> TrainConfig {
        TrainConfig {
            objective,
            epochs: 15,
            batch_size: 16,
            peak_lr: 2e-3,
            constant_fraction: 0.2,
            optimizer: Optimizer::default(),
            grad_clip_norm: Some(5.0),
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.constant_fraction) {
            return Err(Error::Config("constant_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Constant-then-linear-decay schedule: `peak_lr` for the first
/// `constant_fraction` of steps, then a straight line to zero at
/// `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    debug_assert!(step < total_steps);
    let constant_steps = (cfg.constant_fraction * total_steps as f64).floor() as u64;
    if step < constant_steps {
        return cfg.peak_lr;
    }
    let decay_len = (total_steps - constant_steps).max(1);
    cfg.peak_lr * (total_steps - step) as f64 / decay_len as f64
}

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ctc: f64,
    pub spk1_ce: Option<f64>,
    pub spk2_ce: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda_adapt: Option<f64>,
    pub p1_mean: Option<f64>,
    pub p2_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub label_error_rate: f64,
    pub eval_spk1_ce: Option<f64>,
    pub eval_spk2_ce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub schema_version: u32,
    pub objective: ObjectiveSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub constant_fraction: f64,
    pub seed: u64,
    pub total_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogRecord {
    Meta(LogMeta),
    Step(StepRecord),
    Eval(EvalRecord),
    Warning { step: u64, message: String },
}

/// Append-only record of every training step and per-epoch evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub meta: LogMeta,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub warnings: Vec<(u64, String)>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |r: &LogRecord| -> Result<()> {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
            Ok(())
        };
        push(&LogRecord::Meta(self.meta.clone()))?;
        let mut warnings = self.warnings.iter().peekable();
        for step in &self.steps {
            while let Some((wstep, msg)) = warnings.peek() {
                if *wstep <= step.step {
                    push(&LogRecord::Warning {
                        step: *wstep,
                        message: msg.clone(),
                    })?;
                    warnings.next();
                } else {
                    break;
                }
            }
            push(&LogRecord::Step(step.clone()))?;
        }
        for (wstep, msg) in warnings {
            push(&LogRecord::Warning {
                step: *wstep,
                message: msg.clone(),
            })?;
        }
        for eval in &self.evals {
            push(&LogRecord::Eval(eval.clone()))?;
        }
        Ok(out)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<TrainLog> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut meta = None;
        let mut steps = Vec::new();
        let mut evals = Vec::new();
        let mut warnings = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LogRecord>(&line)? {
                LogRecord::Meta(m) => meta = Some(m),
                LogRecord::Step(s) => steps.push(s),
                LogRecord::Eval(e) => evals.push(e),
                LogRecord::Warning { step, message } => warnings.push((step, message)),
            }
        }
        Ok(TrainLog {
            meta: meta.ok_or_else(|| Error::Config("log has no meta record".into()))?,
            steps,
            evals,
            warnings,
        })
    }
}

/// Evaluation metrics on a held-out split: corpus-level label error rate
/// (total edit distance over total reference length) and, when the heads
/// exist, the speaker cross-entropies at the objective's taps.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub label_error_rate: f64,
    pub spk1_ce: Option<f64>,
    pub spk2_ce: Option<f64>,
}

struct UttEval {
    distance: usize,
    ref_len: usize,
    p1: Option<f64>,
    p2: Option<f64>,
}

/// Greedy-decodes every utterance and accumulates edit distances; speaker
/// posteriors are measured at the taps named by `spec` when present.
pub fn evaluate(
    store: &ParamStore,
    backbone: &BackboneConfig,
    classifier: &SpeakerClassifierConfig,
    spec: &ObjectiveSpec,
    eval_data: &[Utterance],
) -> Result<EvalMetrics> {
    let has_spk1 = spec.kind.uses_enhancing() && store.contains("spk1.out.weight");
    let has_spk2 = spec.kind.uses_adversarial() && store.contains("spk2.out.weight");
    let results: Vec<Result<UttEval>> = par::map_ordered(eval_data, |utt| {
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let x = g.input("features", utt.features.clone());
        let out = backbone_forward(&mut g, &mut pn, store, backbone, x)?;
        let posteriors = FramePosteriors::new(g.value(out.log_probs).clone())?;
        let hyp = greedy_decode(&posteriors);
        let distance_rate = crate::ctc::label_error_rate(&hyp, utt.content.symbols())?;
        let ref_len = utt.content.len();
        let distance = (distance_rate * ref_len as f64).round() as usize;
        let p1 = if has_spk1 {
            let tap = out.tap(TapPoint::pre_ln(spec.l1.expect("validated")));
            let b = speaker_branch(
                &mut g,
                &mut pn,
                store,
                "spk1",
                tap,
                utt.speaker,
                classifier.num_speakers,
            )?;
            Some(b.target_prob)
        } else {
            None
        };
        let p2 = if has_spk2 {
            let tap = out.tap(TapPoint::post_ln(spec.l2.expect("validated")));
            let b = speaker_branch(
                &mut g,
                &mut pn,
                store,
                "spk2",
                tap,
                utt.speaker,
                classifier.num_speakers,
            )?;
            Some(b.target_prob)
        } else {
            None
        };
        Ok(UttEval {
            distance,
            ref_len,
            p1,
            p2,
        })
    });
    let mut total_distance = 0usize;
    let mut total_len = 0usize;
    let mut p1s = Vec::new();
    let mut p2s = Vec::new();
    for r in results {
        let r = r?;
        total_distance += r.distance;
        total_len += r.ref_len;
        if let Some(p) = r.p1 {
            p1s.push(p);
        }
        if let Some(p) = r.p2 {
            p2s.push(p);
        }
    }
    let ce = |ps: &[f64]| -> Result<Option<f64>> {
        if ps.is_empty() {
            Ok(None)
        } else {
            Ok(Some(crate::objectives::speaker_ce_from_probs(ps)?))
        }
    };
    Ok(EvalMetrics {
        label_error_rate: total_distance as f64 / total_len as f64,
        spk1_ce: ce(&p1s)?,
        spk2_ce: ce(&p2s)?,
    })
}

#[derive(Clone, Debug, Default)]
pub(crate) struct OptimizerState {
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub(crate) fn apply(
        &mut self,
        optimizer: &Optimizer,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        match optimizer {
            Optimizer::Sgd => {
                for (name, grad) in grads {
                    let p = store.get_mut(name)?;
                    tensor::axpy_into(p, -lr, grad);
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (name, grad) in grads {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(grad.shape()));
                    for (mv, gv) in m.data_mut().iter_mut().zip(grad.data()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                    }
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(grad.shape()));
                    for (vv, gv) in v.data_mut().iter_mut().zip(grad.data()) {
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                    }
                    let m = &self.m[name];
                    let v = &self.v[name];
                    let p = store.get_mut(name)?;
                    for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                        let m_hat = mv / bc1;
                        let v_hat = vv / bc2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Serializes optimizer state into checkpoint tensors under `optim.`.
    fn store_into(&self, store: &mut ParamStore) {
        store.insert("optim.t", Tensor::scalar(self.t as f64));
        for (name, t) in &self.m {
            store.insert(&format!("optim.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            store.insert(&format!("optim.v.{name}"), t.clone());
        }
    }

    fn load_from(store: &ParamStore) -> OptimizerState {
        let mut state = OptimizerState::default();
        if let Ok(t) = store.get("optim.t") {
            state.t = t.scalar_value() as u64;
        }
        for (name, t) in store.iter() {
            if let Some(p) = name.strip_prefix("optim.m.") {
                state.m.insert(p.to_string(), t.clone());
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                state.v.insert(p.to_string(), t.clone());
            }
        }
        state
    }
}

/// Scales all gradients by `c/‖g‖₂` when the global norm exceeds `c`;
/// directions are preserved exactly.
fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm_sq: f64 = grads.values().map(|t| t.l2_norm_sq()).sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for t in grads.values_mut() {
            *t = tensor::scale(t, factor);
        }
    }
    norm
}

fn shuffle_seed_for_epoch(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Output of one training run.
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: TrainLog,
}

fn ensure_classifiers(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    backbone: &BackboneConfig,
    classifier: &SpeakerClassifierConfig,
) {
    if cfg.objective.kind.uses_enhancing() && !store.contains("spk1.out.weight") {
        init_speaker_classifier(store, "spk1", backbone.model_dim, classifier, cfg.seed, 1);
    }
    if cfg.objective.kind.uses_adversarial() && !store.contains("spk2.out.weight") {
        init_speaker_classifier(store, "spk2", backbone.model_dim, classifier, cfg.seed, 2);
    }
}

/// Trains `init` under the configured objective. One optimizer step per
/// batch; per-epoch evaluation and checkpoints; a non-finite loss aborts with
/// the step number and the offending component; an infeasible batch is
/// skipped with a logged warning.
///
/// When `init` carries optimizer state and progress tensors (a mid-run
/// checkpoint), training resumes after the recorded epoch and reproduces the
/// uninterrupted run bit for bit.
pub fn train(
    cfg: &TrainConfig,
    backbone: &BackboneConfig,
    classifier: &SpeakerClassifierConfig,
    train_data: &[Utterance],
    eval_data: &[Utterance],
    init: ParamStore,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.objective.validate(backbone.num_blocks)?;
    if train_data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut store = init;
    let start_epoch = store
        .remove("meta.completed_epochs")
        .map(|t| t.scalar_value() as usize)
        .unwrap_or(0);
    let mut global_step = store
        .remove("meta.global_step")
        .map(|t| t.scalar_value() as u64)
        .unwrap_or(0);
    let mut opt_state = OptimizerState::load_from(&store);
    let optim_names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("optim."))
        .cloned()
        .collect();
    for name in optim_names {
        store.remove(&name);
    }
    ensure_classifiers(&mut store, cfg, backbone, classifier);

    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let meta = LogMeta {
        schema_version: LOG_SCHEMA_VERSION,
        objective: cfg.objective.clone(),
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        peak_lr: cfg.peak_lr,
        constant_fraction: cfg.constant_fraction,
        seed: cfg.seed,
        total_steps,
    };
    let mut log = TrainLog {
        meta,
        steps: Vec::new(),
        evals: Vec::new(),
        warnings: Vec::new(),
    };

    let mut best: Option<(f64, String)> = None;
    for epoch in (start_epoch + 1)..=cfg.epochs {
        let shuffle = shuffle_seed_for_epoch(cfg.seed, epoch);
        for batch in batch_iterator(train_data, cfg.batch_size, shuffle) {
            let step = global_step;
            global_step += 1;
            let utts = batch.utterances();
            let obj = match assemble_objective(&store, backbone, classifier, &cfg.objective, &utts)
            {
                Ok(obj) => obj,
                Err(Error::InfeasibleAlignment {
                    frames,
                    labels,
                    min_frames,
                }) => {
                    log.warnings.push((
                        step,
                        format!(
                            "skipped infeasible batch: {frames} frames for {labels} labels \
                             (needs {min_frames})"
                        ),
                    ));
                    continue;
                }
                Err(e) => return Err(e),
            };

            for (component, value) in [
                ("loss", Some(obj.loss)),
                ("ctc", Some(obj.ctc_mean)),
                ("spk1_ce", obj.spk1_mean),
                ("spk2_ce", obj.spk2_mean),
            ] {
                if let Some(v) = value {
                    if !v.is_finite() {
                        return Err(Error::NanAbort {
                            step,
                            component: component.to_string(),
                            value: v,
                        });
                    }
                }
            }

            let mut grads = obj.backward()?;
            if let Some(max_norm) = cfg.grad_clip_norm {
                clip_gradients(&mut grads, max_norm);
            }
            let lr = lr_at(step, total_steps, cfg);
            opt_state.apply(&cfg.optimizer, &mut store, &grads, lr)?;
            for (name, t) in store.iter() {
                if !t.all_finite() {
                    return Err(Error::NanAbort {
                        step,
                        component: format!("parameter {name}"),
                        value: f64::NAN,
                    });
                }
            }

            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: obj.loss,
                ctc: obj.ctc_mean,
                spk1_ce: obj.spk1_mean,
                spk2_ce: obj.spk2_mean,
                lambda1: obj.lambda1,
                lambda_adapt: obj.lambda_adapt,
                p1_mean: obj.p1_mean,
                p2_mean: obj.p2_mean,
            });
        }

        if !eval_data.is_empty() {
            let metrics = evaluate(&store, backbone, classifier, &cfg.objective, eval_data)?;
            log.evals.push(EvalRecord {
                epoch,
                step: global_step,
                label_error_rate: metrics.label_error_rate,
                eval_spk1_ce: metrics.spk1_ce,
                eval_spk2_ce: metrics.spk2_ce,
            });
            if let Some(dir) = out_dir {
                let name = format!("epoch{epoch:03}.ckpt");
                let mut snapshot = store.clone();
                opt_state.store_into(&mut snapshot);
                snapshot.insert("meta.completed_epochs", Tensor::scalar(epoch as f64));
                snapshot.insert("meta.global_step", Tensor::scalar(global_step as f64));
                save_checkpoint(&snapshot, &dir.join(&name))?;
                let better = match &best {
                    None => true,
                    Some((ler, _)) => metrics.label_error_rate < *ler,
                };
                if better {
                    best = Some((metrics.label_error_rate, name.clone()));
                    std::fs::write(
                        dir.join("best"),
                        format!("{name}\t{}\n", metrics.label_error_rate),
                    )?;
                }
            }
        } else if let Some(dir) = out_dir {
            let name = format!("epoch{epoch:03}.ckpt");
            let mut snapshot = store.clone();
            opt_state.store_into(&mut snapshot);
            snapshot.insert("meta.completed_epochs", Tensor::scalar(epoch as f64));
            snapshot.insert("meta.global_step", Tensor::scalar(global_step as f64));
            save_checkpoint(&snapshot, &dir.join(&name))?;
        }
    }

    if let Some(dir) = out_dir {
        log.save_jsonl(&dir.join("train_log.jsonl"))?;
        save_checkpoint(&store, &dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { params: store, log })
}

/// Checks that the checkpoint's backbone tensors match the current
/// architecture, returning the offending names otherwise.
pub fn check_backbone_compatible(
    seed_store: &ParamStore,
    backbone: &BackboneConfig,
) -> Result<()> {
    let reference = init_backbone(backbone, 0)?;
    let mut problems = Vec::new();
    for (name, t) in reference.iter() {
        match seed_store.iter().find(|(n, _)| *n == name) {
            None => problems.push(format!("missing {name}")),
            Some((_, s)) if s.shape() != t.shape() => problems.push(format!(
                "{name}: checkpoint shape {:?}, expected {:?}",
                s.shape(),
                t.shape()
            )),
            _ => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "incompatible backbone: {}",
            problems.join("; ")
        )));
    }
    Ok(())
}

/// Continue-training protocol: load the seed backbone, restart the learning
/// rate schedule, initialize the objective's speaker classifiers from
/// scratch, and train. Non-backbone tensors in the seed checkpoint are
/// dropped and reported in the log warnings.
pub fn continue_train(
    seed_store: &ParamStore,
    cfg: &TrainConfig,
    backbone: &BackboneConfig,
    classifier: &SpeakerClassifierConfig,
    train_data: &[Utterance],
    eval_data: &[Utterance],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    check_backbone_compatible(seed_store, backbone)?;
    let mut fresh = ParamStore::new(cfg.seed);
    let mut dropped = Vec::new();
    for (name, t) in seed_store.iter() {
        if name.starts_with("backbone.") {
            fresh.insert(name, t.clone());
        } else {
            dropped.push(name.clone());
        }
    }
    let mut outcome = train(
        cfg, backbone, classifier, train_data, eval_data, fresh, out_dir,
    )?;
    if !dropped.is_empty() {
        outcome
            .log
            .warnings
            .push((0, format!("dropped seed tensors: {}", dropped.join(", "))));
    }
    Ok(outcome)
}

/// Two-stage pipeline: speaker-enhancing continue-training at `l1`, then
/// adaptive-adversarial continue-training at `l2` from the stage-one result
/// (with a fresh learning-rate schedule; the enhancing classifier is dropped
/// between stages).
pub fn sequential_enh_then_adv(
    seed_store: &ParamStore,
    l1: usize,
    l2: usize,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    backbone: &BackboneConfig,
    classifier: &SpeakerClassifierConfig,
    train_data: &[Utterance],
    eval_data: &[Utterance],
    out_dir: Option<&Path>,
) -> Result<(TrainOutcome, TrainLog)> {
    if l1 >= l2 {
        return Err(Error::Config(format!(
            "sequential pipeline requires l1 < l2, got l1={l1}, l2={l2}"
        )));
    }
    let mut cfg1 = stage1.clone();
    cfg1.objective = ObjectiveSpec::new(ObjectiveKind::SpkEnh).with_l1(l1);
    cfg1.objective.beta_focal = stage1.objective.beta_focal;
    let mut cfg2 = stage2.clone();
    cfg2.objective = ObjectiveSpec::new(ObjectiveKind::SpkAdvAdaptive).with_l2(l2);
    cfg2.objective.beta_adapt = stage2.objective.beta_adapt;

    let stage1_dir = out_dir.map(|d| d.join("stage1"));
    let stage2_dir = out_dir.map(|d| d.join("stage2"));
    let first = continue_train(
        seed_store,
        &cfg1,
        backbone,
        classifier,
        train_data,
        eval_data,
        stage1_dir.as_deref(),
    )?;
    let second = continue_train(
        &first.params,
        &cfg2,
        backbone,
        classifier,
        train_data,
        eval_data,
        stage2_dir.as_deref(),
    )?;
    Ok((second, first.log))
}

/// Convenience wrappers so callers can use paths rather than stores.
pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    save_checkpoint(store, path)
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    load_checkpoint(path)
}

pub fn best_checkpoint_path(run_dir: &Path) -> Result<PathBuf> {
    let pointer = run_dir.join("best");
    let content = std::fs::read_to_string(&pointer)?;
    let name = content
        .split_whitespace()
        .next()
        .ok_or_else(|| Error::Checkpoint("empty best pointer".into()))?;
    Ok(run_dir.join(name))
}
