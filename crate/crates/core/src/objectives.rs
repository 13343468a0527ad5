//! Objective assembly for speaker-based multi-task training.
//!
//! The composite losses combine the CTC sequence loss with auxiliary speaker
//! cross-entropies attached to intermediate taps:
//!
//! - enhancing: `L = L_ctc + λ₁·L_spk1`, with the focal weight
//!   `λ₁ = (1 − P̄₁)^β_focal` computed from the batch-mean target posterior
//!   and treated as a constant (no gradient flows through it);
//! - standard adversarial: `L = L_ctc + λ₂·L_spk2` with a sign-flipping
//!   reversal below the discriminator, so the single λ₂ scales the
//!   discriminator update and the reversed backbone update simultaneously;
//! - adaptive adversarial: `L = L_ctc + L_spk2` with the reversal scaled by
//!   `λ_adapt = P̄₂^β_adapt`. The discriminator loss is unscaled so the
//!   discriminator always trains at full speed, while the reverse pressure on
//!   the backbone grows only as the discriminator becomes confident;
//! - joint: enhancing at a lower tap plus adaptive adversarial at a higher
//!   tap in one objective.
//!
//! Each batch is assembled as one scalar loss per utterance whose single
//! backward pass yields every update, including the competing ones; batch
//! gradients are the utterance-order mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ctc::ctc_node;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ReversalScale};
use crate::model::{
    backbone_forward, speaker_branch, BackboneConfig, ParamNodes, SpeakerBranch,
    SpeakerClassifierConfig, TapPoint,
};
use crate::par;
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    BaselineCtc,
    SpkEnh,
    SpkAdvStandard,
    SpkAdvAdaptive,
    SpkEnhAdvJoint,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::BaselineCtc => "baseline-ctc",
            ObjectiveKind::SpkEnh => "spk-enh",
            ObjectiveKind::SpkAdvStandard => "spk-adv-standard",
            ObjectiveKind::SpkAdvAdaptive => "spk-adv-adaptive",
            ObjectiveKind::SpkEnhAdvJoint => "spk-enh-adv-joint",
        }
    }

    pub fn uses_enhancing(&self) -> bool {
        matches!(self, ObjectiveKind::SpkEnh | ObjectiveKind::SpkEnhAdvJoint)
    }

    pub fn uses_adversarial(&self) -> bool {
        matches!(
            self,
            ObjectiveKind::SpkAdvStandard
                | ObjectiveKind::SpkAdvAdaptive
                | ObjectiveKind::SpkEnhAdvJoint
        )
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ObjectiveKind> {
        match s {
            "baseline-ctc" => Ok(ObjectiveKind::BaselineCtc),
            "spk-enh" => Ok(ObjectiveKind::SpkEnh),
            "spk-adv-standard" => Ok(ObjectiveKind::SpkAdvStandard),
            "spk-adv-adaptive" => Ok(ObjectiveKind::SpkAdvAdaptive),
            "spk-enh-adv-joint" => Ok(ObjectiveKind::SpkEnhAdvJoint),
            other => Err(Error::Config(format!(
                "unknown objective `{other}` (expected baseline-ctc, spk-enh, \
                 spk-adv-standard, spk-adv-adaptive, or spk-enh-adv-joint)"
            ))),
        }
    }
}

/// Which objective to assemble and where its branches attach.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Enhancing tap block (pre-LN output), required by enhancing kinds.
    pub l1: Option<usize>,
    /// Adversarial tap block (post-LN output), required by adversarial kinds.
    pub l2: Option<usize>,
    pub beta_focal: f64,
    pub beta_adapt: f64,
    /// Fixed scale of the standard adversarial loss term.
    pub lambda2: f64,
    /// Compute λ₁ per utterance instead of from the batch-mean posterior.
    pub per_utterance_focal: bool,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> ObjectiveSpec {
        ObjectiveSpec {
            kind,
            l1: None,
            l2: None,
            beta_focal: 1.0,
            beta_adapt: 1.0,
            lambda2: 1.0,
            per_utterance_focal: false,
        }
    }

    pub fn with_l1(mut self, l1: usize) -> ObjectiveSpec {
        self.l1 = Some(l1);
        self
    }

    pub fn with_l2(mut self, l2: usize) -> ObjectiveSpec {
        self.l2 = Some(l2);
        self
    }

    pub fn with_lambda2(mut self, lambda2: f64) -> ObjectiveSpec {
        self.lambda2 = lambda2;
        self
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if self.kind.uses_enhancing() {
            let l1 = self.l1.ok_or_else(|| {
                Error::Config(format!("objective {} requires l1", self.kind.as_str()))
            })?;
            if l1 < 1 || l1 > num_blocks {
                return Err(Error::Config(format!(
                    "l1={l1} outside [1, {num_blocks}]"
                )));
            }
        }
        if self.kind.uses_adversarial() {
            let l2 = self.l2.ok_or_else(|| {
                Error::Config(format!("objective {} requires l2", self.kind.as_str()))
            })?;
            if l2 < 1 || l2 > num_blocks {
                return Err(Error::Config(format!(
                    "l2={l2} outside [1, {num_blocks}]"
                )));
            }
        }
        if let (Some(l1), Some(l2)) = (self.l1, self.l2) {
            if self.kind.uses_enhancing() && self.kind.uses_adversarial() && l1 >= l2 {
                return Err(Error::Config(format!(
                    "enhancing tap must sit below the adversarial tap: l1={l1} >= l2={l2}"
                )));
            }
        }
        if self.beta_focal < 0.0 {
            return Err(Error::Config("beta_focal must be non-negative".into()));
        }
        if self.beta_adapt <= 0.0 {
            return Err(Error::Config("beta_adapt must be positive".into()));
        }
        if matches!(self.kind, ObjectiveKind::SpkAdvStandard) && self.lambda2 <= 0.0 {
            return Err(Error::Config("lambda2 must be positive".into()));
        }
        Ok(())
    }
}

/// Batch of speaker posteriors with the probability each row assigns to its
/// target speaker.
#[derive(Clone, Debug)]
pub struct SpeakerPosterior {
    pub probs: Tensor,
    pub target_prob: Vec<f64>,
}

impl SpeakerPosterior {
    pub fn new(probs: Tensor, targets: &[usize]) -> Result<SpeakerPosterior> {
        if probs.rows() != targets.len() {
            return Err(Error::Config(format!(
                "{} posterior rows for {} targets",
                probs.rows(),
                targets.len()
            )));
        }
        let mut target_prob = Vec::with_capacity(targets.len());
        for (i, &t) in targets.iter().enumerate() {
            let row = probs.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidTensor(format!(
                    "posterior row {i} sums to {sum}"
                )));
            }
            if t >= row.len() {
                return Err(Error::Config(format!(
                    "target {t} outside posterior of width {}",
                    row.len()
                )));
            }
            target_prob.push(row[t]);
        }
        Ok(SpeakerPosterior { probs, target_prob })
    }
}

/// Floor applied to posteriors before logs, keeping early-training
/// cross-entropies finite.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

/// Batch mean of −log P(target speaker). A target posterior of exactly zero
/// signals numerical collapse and is reported rather than clamped away.
pub fn speaker_ce(posterior: &SpeakerPosterior) -> Result<f64> {
    speaker_ce_from_probs(&posterior.target_prob)
}

pub fn speaker_ce_from_probs(target_prob: &[f64]) -> Result<f64> {
    if target_prob.is_empty() {
        return Err(Error::Config("empty posterior batch".into()));
    }
    let mut sum = 0.0;
    for (i, &p) in target_prob.iter().enumerate() {
        if p <= 0.0 || !p.is_finite() {
            return Err(Error::NumericalCollapse(format!(
                "target posterior {p} for utterance {i}"
            )));
        }
        sum += -(p.max(POSTERIOR_FLOOR)).ln();
    }
    Ok(sum / target_prob.len() as f64)
}

/// Focal weight `λ₁ = (1 − P₁)^β_focal`. The weight is a detached constant:
/// no gradient flows through it. With `β_focal = 0` it degenerates to 1
/// (unweighted multi-task learning).
pub fn focal_scale(target_prob_mean: f64, beta_focal: f64) -> f64 {
    (1.0 - target_prob_mean).powf(beta_focal)
}

/// Adaptive reversal strength `λ_adapt = P̄₂^β_adapt`, recomputed every step
/// from the current batch-mean target posterior of the discriminator.
pub fn lambda_adapt(batch_mean_p2: f64, beta_adapt: f64) -> f64 {
    batch_mean_p2.powf(beta_adapt)
}

/// Standard gradient reversal: identity forward, `g ↦ −λ₂·g` backward.
pub fn grl_standard(g: &mut Graph, z: NodeId, lambda2: f64) -> Result<(NodeId, ReversalScale)> {
    if lambda2 <= 0.0 {
        return Err(Error::Config(format!(
            "standard reversal scale must be positive, got {lambda2}"
        )));
    }
    Ok(g.gradient_reversal(z, lambda2))
}

/// Adaptive gradient reversal with a known batch-mean posterior: identity
/// forward, `g ↦ −(P̄₂^β_adapt)·g` backward.
pub fn grl_adaptive(
    g: &mut Graph,
    z: NodeId,
    batch_mean_p2: f64,
    beta_adapt: f64,
) -> Result<(NodeId, ReversalScale)> {
    if beta_adapt <= 0.0 {
        return Err(Error::Config(format!(
            "beta_adapt must be positive, got {beta_adapt}"
        )));
    }
    if !(0.0..=1.0).contains(&batch_mean_p2) {
        return Err(Error::Config(format!(
            "batch-mean posterior {batch_mean_p2} outside [0, 1]"
        )));
    }
    Ok(g.gradient_reversal(z, lambda_adapt(batch_mean_p2, beta_adapt)))
}

/// One utterance's assembled loss graph.
pub struct UtteranceLoss {
    pub graph: Graph,
    pub total: NodeId,
    pub ctc: f64,
    pub spk1_ce: Option<f64>,
    pub spk2_ce: Option<f64>,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
}

/// A batch objective: per-utterance scalar loss graphs plus the detached
/// batch-level scales computed from the current forward pass.
pub struct BatchObjective {
    pub utterances: Vec<UtteranceLoss>,
    /// Batch loss: utterance-order mean of the per-utterance totals.
    pub loss: f64,
    pub ctc_mean: f64,
    pub spk1_mean: Option<f64>,
    pub spk2_mean: Option<f64>,
    pub p1_mean: Option<f64>,
    pub p2_mean: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda_adapt: Option<f64>,
}

struct BuiltUtterance {
    graph: Graph,
    ctc: NodeId,
    spk1: Option<SpeakerBranch>,
    spk2: Option<SpeakerBranch>,
    reversal: Option<ReversalScale>,
}

fn build_utterance(
    store: &ParamStore,
    backbone: &BackboneConfig,
    classifier: &SpeakerClassifierConfig,
    spec: &ObjectiveSpec,
    utt: &Utterance,
) -> Result<BuiltUtterance> {
    let mut g = Graph::new();
    let mut pn = ParamNodes::new();
    let features = g.input("features", utt.features.clone());
    let out = backbone_forward(&mut g, &mut pn, store, backbone, features)?;
    let ctc = ctc_node(&mut g, out.log_probs, &utt.content)?;

    let spk1 = if spec.kind.uses_enhancing() {
        let tap = out.tap(TapPoint::pre_ln(spec.l1.expect("validated")));
        Some(speaker_branch(
            &mut g,
            &mut pn,
            store,
            "spk1",
            tap,
            utt.speaker,
            classifier.num_speakers,
        )?)
    } else {
        None
    };

    let (spk2, reversal) = if spec.kind.uses_adversarial() {
        let tap = out.tap(TapPoint::post_ln(spec.l2.expect("validated")));
        // The standard objective reverses with scale 1 and puts λ₂ on the
        // loss term, so the discriminator and the reversed backbone both see
        // λ₂. The adaptive objective starts at 0 and is set to λ_adapt once
        // the batch-mean posterior is known.
        let initial = match spec.kind {
            ObjectiveKind::SpkAdvStandard => 1.0,
            _ => 0.0,
        };
        let (rz, handle) = g.gradient_reversal(tap, initial);
        let branch = speaker_branch(
            &mut g,
            &mut pn,
            store,
            "spk2",
            rz,
            utt.speaker,
            classifier.num_speakers,
        )?;
        (Some(branch), Some(handle))
    } else {
        (None, None)
    };

    if let Some(node) = g.finite_violation() {
        return Err(Error::NumericalCollapse(format!(
            "non-finite forward value at `{node}` for utterance {}",
            utt.id
        )));
    }

    Ok(BuiltUtterance {
        graph: g,
        ctc,
        spk1,
        spk2,
        reversal,
    })
}

/// Builds the objective for one batch: forward passes per utterance, batch
/// scales from the detached posteriors, and one scalar total per utterance.
pub fn assemble_objective(
    store: &ParamStore,
    backbone: &BackboneConfig,
    classifier: &SpeakerClassifierConfig,
    spec: &ObjectiveSpec,
    batch: &[Utterance],
) -> Result<BatchObjective> {
    spec.validate(backbone.num_blocks)?;
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }

    let built: Vec<Result<BuiltUtterance>> = par::map_ordered(batch, |utt| {
        build_utterance(store, backbone, classifier, spec, utt)
    });
    let mut built: Vec<BuiltUtterance> = built.into_iter().collect::<Result<_>>()?;

    let n = built.len() as f64;
    let p1_mean = built[0].spk1.as_ref().map(|_| {
        built
            .iter()
            .map(|b| b.spk1.as_ref().expect("uniform batch").target_prob)
            .sum::<f64>()
            / n
    });
    let p2_mean = built[0].spk2.as_ref().map(|_| {
        built
            .iter()
            .map(|b| b.spk2.as_ref().expect("uniform batch").target_prob)
            .sum::<f64>()
            / n
    });

    let lambda1 = if spec.kind.uses_enhancing() && !spec.per_utterance_focal {
        Some(focal_scale(p1_mean.expect("enhancing"), spec.beta_focal))
    } else {
        None
    };
    let lam_adapt = if matches!(
        spec.kind,
        ObjectiveKind::SpkAdvAdaptive | ObjectiveKind::SpkEnhAdvJoint
    ) {
        let lam = lambda_adapt(p2_mean.expect("adversarial"), spec.beta_adapt);
        for b in &built {
            b.reversal.as_ref().expect("adversarial").set(lam);
        }
        Some(lam)
    } else {
        None
    };

    let utterances: Vec<UtteranceLoss> = built
        .iter_mut()
        .map(|b| -> Result<UtteranceLoss> {
            let g = &mut b.graph;
            let mut total = b.ctc;
            if let Some(spk1) = &b.spk1 {
                let lam1 = match lambda1 {
                    Some(l) => l,
                    None => focal_scale(spk1.target_prob, spec.beta_focal),
                };
                total = g.add_scaled(total, spk1.ce, lam1)?;
            }
            if let Some(spk2) = &b.spk2 {
                let scale = match spec.kind {
                    ObjectiveKind::SpkAdvStandard => spec.lambda2,
                    _ => 1.0,
                };
                total = g.add_scaled(total, spk2.ce, scale)?;
            }
            Ok(UtteranceLoss {
                total,
                ctc: b.graph.scalar(b.ctc),
                spk1_ce: b.spk1.as_ref().map(|s| b.graph.scalar(s.ce)),
                spk2_ce: b.spk2.as_ref().map(|s| b.graph.scalar(s.ce)),
                p1: b.spk1.as_ref().map(|s| s.target_prob),
                p2: b.spk2.as_ref().map(|s| s.target_prob),
                graph: std::mem::take(&mut b.graph),
            })
        })
        .collect::<Result<_>>()?;

    let mean_of = |f: fn(&UtteranceLoss) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = utterances.iter().filter_map(f).collect();
        if vals.len() == utterances.len() {
            Some(vals.iter().sum::<f64>() / n)
        } else {
            None
        }
    };

    let loss = utterances
        .iter()
        .map(|u| u.graph.scalar(u.total))
        .sum::<f64>()
        / n;
    let ctc_mean = utterances.iter().map(|u| u.ctc).sum::<f64>() / n;
    let spk1_mean = mean_of(|u| u.spk1_ce);
    let spk2_mean = mean_of(|u| u.spk2_ce);

    Ok(BatchObjective {
        utterances,
        loss,
        ctc_mean,
        spk1_mean,
        spk2_mean,
        p1_mean,
        p2_mean,
        lambda1,
        lambda_adapt: lam_adapt,
    })
}

impl BatchObjective {
    /// Single backward pass per utterance; gradients are averaged in
    /// utterance order, so the result is bit-identical across thread counts.
    pub fn backward(&self) -> Result<BTreeMap<String, Tensor>> {
        let per_utt: Vec<Result<BTreeMap<String, Tensor>>> =
            par::map_ordered(&self.utterances, |u| {
                let grads = u.graph.backward(u.total)?;
                Ok(u.graph.param_gradients(&grads))
            });
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let scale = 1.0 / self.utterances.len() as f64;
        for maps in per_utt {
            for (name, grad) in maps? {
                match acc.get_mut(&name) {
                    Some(t) => tensor::add_into(t, &grad),
                    None => {
                        acc.insert(name, grad);
                    }
                }
            }
        }
        for t in acc.values_mut() {
            *t = tensor::scale(t, scale);
        }
        Ok(acc)
    }
}
