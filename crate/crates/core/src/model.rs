//! The tappable block-stack recognizer and the speaker classifier head.
//!
//! The backbone is a stack of residual feed-forward blocks with post-block
//! layer normalization; both the pre-LN and post-LN output of every block are
//! addressable as tap points for auxiliary branches. The final block output
//! feeds a linear layer and a per-frame log-softmax over the content alphabet
//! plus blank.
//!
//! The speaker classifier is an MLP-attention pooling over frames followed by
//! a linear softmax over speakers. The enhancing branch, the adversarial
//! discriminator, and the probing classifiers all share this architecture.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{component_rng, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Number of blocks B (at least 2, so lower and higher taps exist).
    pub num_blocks: usize,
    /// Model width d.
    pub model_dim: usize,
    /// Hidden width of the per-block feed-forward.
    pub ff_dim: usize,
    /// Input feature dimension F.
    pub input_dim: usize,
    /// Content alphabet size V; frame posteriors cover V+1 classes.
    pub vocab: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_blocks: 8,
            model_dim: 64,
            ff_dim: 128,
            input_dim: 16,
            vocab: 10,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 2 {
            return Err(Error::Config(format!(
                "num_blocks must be at least 2, got {}",
                self.num_blocks
            )));
        }
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("input_dim", self.input_dim),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerClassifierConfig {
    /// Hidden units of the attention MLP.
    pub attn_hidden: usize,
    /// Number of speakers S.
    pub num_speakers: usize,
}

impl Default for SpeakerClassifierConfig {
    fn default() -> Self {
        SpeakerClassifierConfig {
            attn_hidden: 64,
            num_speakers: 20,
        }
    }
}

/// An addressable intermediate activation: block output before or after that
/// block's layer normalization. Pre-LN taps are reserved for the enhancing
/// branch; adversarial and probing branches read post-LN outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapPoint {
    /// 1-based block index.
    pub block: usize,
    pub pre_layer_norm: bool,
}

impl TapPoint {
    pub fn post_ln(block: usize) -> TapPoint {
        TapPoint {
            block,
            pre_layer_norm: false,
        }
    }

    pub fn pre_ln(block: usize) -> TapPoint {
        TapPoint {
            block,
            pre_layer_norm: true,
        }
    }
}

/// Initializes backbone parameters (`backbone.*`) deterministically.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new(seed);
    let mut rng = component_rng(seed, 0);
    store.init_linear("backbone.input", cfg.input_dim, cfg.model_dim, &mut rng);
    for k in 1..=cfg.num_blocks {
        store.init_linear(
            &format!("backbone.block{k}.ff1"),
            cfg.model_dim,
            cfg.ff_dim,
            &mut rng,
        );
        store.init_linear(
            &format!("backbone.block{k}.ff2"),
            cfg.ff_dim,
            cfg.model_dim,
            &mut rng,
        );
        store.init_layer_norm(&format!("backbone.block{k}.ln"), cfg.model_dim);
    }
    store.init_linear("backbone.out", cfg.model_dim, cfg.vocab + 1, &mut rng);
    Ok(store)
}

/// Adds a from-scratch speaker classifier under `prefix` (`spk1`, `spk2`, or
/// a probe name). `stream` decorrelates the draw from other components.
pub fn init_speaker_classifier(
    store: &mut ParamStore,
    prefix: &str,
    model_dim: usize,
    cfg: &SpeakerClassifierConfig,
    seed: u64,
    stream: u64,
) {
    let mut rng = component_rng(seed, stream);
    store.init_linear(
        &format!("{prefix}.attn.hidden"),
        model_dim,
        cfg.attn_hidden,
        &mut rng,
    );
    store.init_linear(&format!("{prefix}.attn.score"), cfg.attn_hidden, 1, &mut rng);
    store.init_linear(&format!("{prefix}.out"), model_dim, cfg.num_speakers, &mut rng);
}

/// One graph node per parameter name, created lazily so every utterance graph
/// references each parameter exactly once.
#[derive(Default)]
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn new() -> ParamNodes {
        ParamNodes {
            nodes: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.nodes.get(name) {
            return Ok(id);
        }
        let id = g.param(name, store.get(name)?.clone());
        self.nodes.insert(name.to_string(), id);
        Ok(id)
    }
}

/// Tap nodes and frame posteriors from one backbone forward pass.
pub struct BackboneOut {
    /// Block outputs before layer normalization, index 0 = block 1.
    pub pre_ln: Vec<NodeId>,
    /// Block outputs after layer normalization, index 0 = block 1.
    pub post_ln: Vec<NodeId>,
    /// Per-frame log-probabilities over V+1 classes.
    pub log_probs: NodeId,
}

impl BackboneOut {
    pub fn tap(&self, tap: TapPoint) -> NodeId {
        let idx = tap.block - 1;
        if tap.pre_layer_norm {
            self.pre_ln[idx]
        } else {
            self.post_ln[idx]
        }
    }
}

fn linear(
    g: &mut Graph,
    pn: &mut ParamNodes,
    store: &ParamStore,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = pn.get(g, store, &format!("{name}.weight"))?;
    let b = pn.get(g, store, &format!("{name}.bias"))?;
    let prod = g.matmul(x, w)?;
    g.add_bias(prod, b)
}

/// Runs the backbone on a `T×F` feature node, exposing every block's pre-LN
/// and post-LN outputs as taps.
pub fn backbone_forward(
    g: &mut Graph,
    pn: &mut ParamNodes,
    store: &ParamStore,
    cfg: &BackboneConfig,
    features: NodeId,
) -> Result<BackboneOut> {
    let mut h = linear(g, pn, store, "backbone.input", features)?;
    let mut pre_ln = Vec::with_capacity(cfg.num_blocks);
    let mut post_ln = Vec::with_capacity(cfg.num_blocks);
    for k in 1..=cfg.num_blocks {
        let a1 = linear(g, pn, store, &format!("backbone.block{k}.ff1"), h)?;
        let r = g.relu(a1);
        let a2 = linear(g, pn, store, &format!("backbone.block{k}.ff2"), r)?;
        let pre = g.add(h, a2)?;
        let gain = pn.get(g, store, &format!("backbone.block{k}.ln.gain"))?;
        let bias = pn.get(g, store, &format!("backbone.block{k}.ln.bias"))?;
        let post = g.layer_norm(pre, gain, bias)?;
        pre_ln.push(pre);
        post_ln.push(post);
        h = post;
    }
    let logits = linear(g, pn, store, "backbone.out", h)?;
    let log_probs = g.log_softmax(logits);
    Ok(BackboneOut {
        pre_ln,
        post_ln,
        log_probs,
    })
}

/// Attention-pooled utterance embedding.
pub struct Pooled {
    /// The pooled `d`-vector.
    pub vector: NodeId,
    /// Attention weights over frames; they sum to 1.
    pub weights: NodeId,
}

/// Per-frame scores from a one-hidden-layer tanh MLP, softmax over time,
/// weighted sum of frames.
pub fn attention_pool(
    g: &mut Graph,
    pn: &mut ParamNodes,
    store: &ParamStore,
    prefix: &str,
    frames: NodeId,
) -> Result<Pooled> {
    let t = g.value(frames).rows();
    let d = g.value(frames).cols();
    let hidden = linear(g, pn, store, &format!("{prefix}.attn.hidden"), frames)?;
    let act = g.tanh(hidden);
    let scores = linear(g, pn, store, &format!("{prefix}.attn.score"), act)?;
    let scores = g.reshape(scores, &[t])?;
    let weights = g.softmax_vec(scores)?;
    let row = g.reshape(weights, &[1, t])?;
    let pooled = g.matmul(row, frames)?;
    let vector = g.reshape(pooled, &[d])?;
    Ok(Pooled { vector, weights })
}

/// One utterance's speaker branch: pooled tap, posterior over S speakers,
/// and the cross-entropy against the target speaker.
pub struct SpeakerBranch {
    pub log_posterior: NodeId,
    /// −log P(target speaker), a scalar node.
    pub ce: NodeId,
    /// Detached value of the target speaker posterior P(target | X).
    pub target_prob: f64,
}

pub fn speaker_branch(
    g: &mut Graph,
    pn: &mut ParamNodes,
    store: &ParamStore,
    prefix: &str,
    frames: NodeId,
    speaker: usize,
    num_speakers: usize,
) -> Result<SpeakerBranch> {
    if speaker >= num_speakers {
        return Err(Error::Config(format!(
            "speaker {speaker} outside [0, {num_speakers})"
        )));
    }
    let pooled = attention_pool(g, pn, store, prefix, frames)?;
    let logits = linear(g, pn, store, &format!("{prefix}.out"), pooled.vector)?;
    let log_posterior = g.log_softmax(logits);
    let target = g.pick(log_posterior, speaker)?;
    let ce = g.scale(target, -1.0);
    let target_prob = g.scalar(target).exp();
    Ok(SpeakerBranch {
        log_posterior,
        ce,
        target_prob,
    })
}
