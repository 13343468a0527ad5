//! Layer-wise speaker-identification probing of a frozen backbone.
//!
//! For each block, an independent classifier (attention pooling + softmax,
//! the same architecture as the training-time speaker heads) is trained on
//! that block's output with the backbone frozen, and its held-out accuracy
//! measures how much speaker information the block retains. Block 0 is a
//! pseudo-tap on the raw input features.
//!
//! Probes read post-LN outputs for comparability across models; the pre-LN
//! variant sits behind a flag. The probe budget is fixed and identical for
//! every block and every model, so cross-model comparisons are controlled.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{
    backbone_forward, init_speaker_classifier, speaker_branch, BackboneConfig, ParamNodes,
    SpeakerClassifierConfig, TapPoint,
};
use crate::par;
use crate::params::{component_rng, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::OptimizerState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub attn_hidden: usize,
    pub seed: u64,
    /// Probe pre-LN block outputs instead of the default post-LN outputs.
    pub pre_layer_norm: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            attn_hidden: 64,
            seed: 1,
            pre_layer_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockProbe {
    pub block: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    pub probe_epochs: usize,
}

/// Per-block speaker-identification accuracy of one frozen model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub model_id: String,
    pub num_speakers: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub split_seed: u64,
    pub probe_seed: u64,
    pub blocks: Vec<BlockProbe>,
}

impl ProbeReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<ProbeReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn accuracy_at(&self, block: usize) -> Option<f64> {
        self.blocks
            .iter()
            .find(|b| b.block == block)
            .map(|b| b.eval_accuracy)
    }
}

fn check_split(train: &[Utterance], eval: &[Utterance], num_speakers: usize) -> Result<()> {
    let mut seen = vec![false; num_speakers];
    for utt in train {
        if utt.speaker >= num_speakers {
            return Err(Error::Probe(format!(
                "speaker {} outside [0, {num_speakers})",
                utt.speaker
            )));
        }
        seen[utt.speaker] = true;
    }
    for utt in eval {
        if utt.speaker >= num_speakers || !seen[utt.speaker] {
            return Err(Error::Probe(format!(
                "eval utterance {} has unseen speaker {}",
                utt.id, utt.speaker
            )));
        }
    }
    Ok(())
}

/// Frozen-backbone activations at one tap, computed utterance by utterance.
fn tap_activations(
    store: &ParamStore,
    backbone: &BackboneConfig,
    block: usize,
    pre_layer_norm: bool,
    data: &[Utterance],
) -> Result<Vec<Tensor>> {
    if block == 0 {
        return Ok(data.iter().map(|u| u.features.clone()).collect());
    }
    let results: Vec<Result<Tensor>> = par::map_ordered(data, |utt| {
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let x = g.input("features", utt.features.clone());
        let out = backbone_forward(&mut g, &mut pn, store, backbone, x)?;
        let tap = if pre_layer_norm {
            out.tap(TapPoint::pre_ln(block))
        } else {
            out.tap(TapPoint::post_ln(block))
        };
        Ok(g.value(tap).clone())
    });
    results.into_iter().collect()
}

/// One forward pass per utterance yielding every block's tap, so probing all
/// blocks shares the activation computation.
fn all_tap_activations(
    store: &ParamStore,
    backbone: &BackboneConfig,
    pre_layer_norm: bool,
    data: &[Utterance],
) -> Result<Vec<Vec<Tensor>>> {
    let per_utt: Vec<Result<Vec<Tensor>>> = par::map_ordered(data, |utt| {
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let x = g.input("features", utt.features.clone());
        let out = backbone_forward(&mut g, &mut pn, store, backbone, x)?;
        Ok((1..=backbone.num_blocks)
            .map(|b| {
                let tap = if pre_layer_norm {
                    out.tap(TapPoint::pre_ln(b))
                } else {
                    out.tap(TapPoint::post_ln(b))
                };
                g.value(tap).clone()
            })
            .collect())
    });
    let per_utt: Vec<Vec<Tensor>> = per_utt.into_iter().collect::<Result<_>>()?;
    let mut per_block: Vec<Vec<Tensor>> = (0..backbone.num_blocks).map(|_| Vec::new()).collect();
    for utt_taps in per_utt {
        for (b, t) in utt_taps.into_iter().enumerate() {
            per_block[b].push(t);
        }
    }
    Ok(per_block)
}

fn probe_prefix(block: usize) -> String {
    format!("probe.block{block}")
}

fn probe_accuracy(
    probe_params: &ParamStore,
    prefix: &str,
    activations: &[Tensor],
    speakers: &[usize],
    num_speakers: usize,
) -> Result<f64> {
    let hits: Vec<Result<bool>> = par::map_range(0..activations.len(), |i| {
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let frames = g.input("frames", activations[i].clone());
        let branch = speaker_branch(
            &mut g,
            &mut pn,
            probe_params,
            prefix,
            frames,
            speakers[i],
            num_speakers,
        )?;
        let post = g.value(branch.log_posterior);
        let mut best = 0usize;
        for (k, &v) in post.data().iter().enumerate() {
            if v > post.data()[best] {
                best = k;
            }
        }
        Ok(best == speakers[i])
    });
    let mut correct = 0usize;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / activations.len() as f64)
}

/// Trains a fresh probe on one block of a frozen backbone and returns
/// (train accuracy, eval accuracy). The backbone tensors are untouched;
/// callers can verify via [`ParamStore::checksum`].
pub fn probe_block(
    store: &ParamStore,
    backbone: &BackboneConfig,
    num_speakers: usize,
    block: usize,
    train: &[Utterance],
    eval: &[Utterance],
    cfg: &ProbeConfig,
) -> Result<(f64, f64)> {
    if block > backbone.num_blocks {
        return Err(Error::Probe(format!(
            "block {block} outside [0, {}]",
            backbone.num_blocks
        )));
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Probe("probe needs non-empty train and eval".into()));
    }
    check_split(train, eval, num_speakers)?;

    let train_acts = tap_activations(store, backbone, block, cfg.pre_layer_norm, train)?;
    let eval_acts = tap_activations(store, backbone, block, cfg.pre_layer_norm, eval)?;
    let train_speakers: Vec<usize> = train.iter().map(|u| u.speaker).collect();
    let eval_speakers: Vec<usize> = eval.iter().map(|u| u.speaker).collect();
    train_and_score_probe(
        block,
        &train_acts,
        &train_speakers,
        &eval_acts,
        &eval_speakers,
        num_speakers,
        cfg,
    )
}

fn train_and_score_probe(
    block: usize,
    train_acts: &[Tensor],
    train_speakers: &[usize],
    eval_acts: &[Tensor],
    eval_speakers: &[usize],
    num_speakers: usize,
    cfg: &ProbeConfig,
) -> Result<(f64, f64)> {
    let dim = train_acts[0].cols();
    let prefix = probe_prefix(block);
    let cls = SpeakerClassifierConfig {
        attn_hidden: cfg.attn_hidden,
        num_speakers,
    };
    let mut probe_params = ParamStore::new(cfg.seed);
    init_speaker_classifier(
        &mut probe_params,
        &prefix,
        dim,
        &cls,
        cfg.seed,
        1000 + block as u64,
    );

    let mut opt = OptimizerState::default();
    let optimizer = crate::trainer::Optimizer::default();
    let mut order: Vec<usize> = (0..train_acts.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = component_rng(cfg.seed ^ 0xABCD, 2000 + epoch as u64);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let grads_per: Vec<Result<std::collections::BTreeMap<String, Tensor>>> =
                par::map_ordered(chunk, |&i| {
                    let mut g = Graph::new();
                    let mut pn = ParamNodes::new();
                    let frames = g.input("frames", train_acts[i].clone());
                    let branch = speaker_branch(
                        &mut g,
                        &mut pn,
                        &probe_params,
                        &prefix,
                        frames,
                        train_speakers[i],
                        num_speakers,
                    )?;
                    let grads = g.backward(branch.ce)?;
                    Ok(g.param_gradients(&grads))
                });
            let mut acc: std::collections::BTreeMap<String, Tensor> =
                std::collections::BTreeMap::new();
            for m in grads_per {
                for (name, grad) in m? {
                    match acc.get_mut(&name) {
                        Some(t) => crate::tensor::add_into(t, &grad),
                        None => {
                            acc.insert(name, grad);
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for t in acc.values_mut() {
                *t = crate::tensor::scale(t, scale);
            }
            opt.apply(&optimizer, &mut probe_params, &acc, cfg.lr)?;
        }
    }

    let train_acc = probe_accuracy(
        &probe_params,
        &prefix,
        train_acts,
        train_speakers,
        num_speakers,
    )?;
    let eval_acc = probe_accuracy(
        &probe_params,
        &prefix,
        eval_acts,
        eval_speakers,
        num_speakers,
    )?;
    Ok((train_acc, eval_acc))
}

/// Probes every block of a frozen backbone independently with fresh probes
/// and the identical split, and verifies that the backbone is bit-identical
/// before and after.
pub fn probe_all_blocks(
    store: &ParamStore,
    backbone: &BackboneConfig,
    num_speakers: usize,
    train: &[Utterance],
    eval: &[Utterance],
    cfg: &ProbeConfig,
    model_id: &str,
    split_seed: u64,
) -> Result<ProbeReport> {
    let checksum_before = store.checksum();
    check_split(train, eval, num_speakers)?;
    let train_acts = all_tap_activations(store, backbone, cfg.pre_layer_norm, train)?;
    let eval_acts = all_tap_activations(store, backbone, cfg.pre_layer_norm, eval)?;
    let train_speakers: Vec<usize> = train.iter().map(|u| u.speaker).collect();
    let eval_speakers: Vec<usize> = eval.iter().map(|u| u.speaker).collect();
    let results: Vec<Result<(f64, f64)>> = par::map_range(1..backbone.num_blocks + 1, |block| {
        train_and_score_probe(
            block,
            &train_acts[block - 1],
            &train_speakers,
            &eval_acts[block - 1],
            &eval_speakers,
            num_speakers,
            cfg,
        )
    });
    let mut blocks = Vec::with_capacity(backbone.num_blocks);
    for (i, r) in results.into_iter().enumerate() {
        let (train_accuracy, eval_accuracy) = r?;
        blocks.push(BlockProbe {
            block: i + 1,
            train_accuracy,
            eval_accuracy,
            probe_epochs: cfg.epochs,
        });
    }
    assert_eq!(
        checksum_before,
        store.checksum(),
        "backbone changed during probing"
    );
    Ok(ProbeReport {
        model_id: model_id.to_string(),
        num_speakers,
        train_count: train.len(),
        eval_count: eval.len(),
        split_seed,
        probe_seed: cfg.seed,
        blocks,
    })
}

/// Per-block difference between two probe reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDelta {
    pub block: usize,
    pub baseline_accuracy: f64,
    pub other_accuracy: f64,
    /// other − baseline.
    pub delta: f64,
    /// Binomial standard deviation of the difference (Laplace-smoothed).
    pub sigma: f64,
    /// |delta| > 3σ.
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportComparison {
    pub baseline_id: String,
    pub other_id: String,
    pub eval_count: usize,
    pub deltas: Vec<BlockDelta>,
}

/// Compares `other` against `baseline` block by block, flagging blocks whose
/// accuracy difference exceeds three binomial standard deviations.
pub fn compare_reports(baseline: &ProbeReport, other: &ProbeReport) -> Result<ReportComparison> {
    if baseline.blocks.len() != other.blocks.len() {
        return Err(Error::Probe(format!(
            "block count mismatch: {} vs {}",
            baseline.blocks.len(),
            other.blocks.len()
        )));
    }
    if baseline.split_seed != other.split_seed || baseline.eval_count != other.eval_count {
        return Err(Error::Probe(
            "probe reports use different splits; comparison would be meaningless".into(),
        ));
    }
    let n = baseline.eval_count as f64;
    let smoothed = |p: f64| -> f64 { (p * n + 1.0) / (n + 2.0) };
    let deltas = baseline
        .blocks
        .iter()
        .zip(&other.blocks)
        .map(|(a, b)| {
            let pa = smoothed(a.eval_accuracy);
            let pb = smoothed(b.eval_accuracy);
            let sigma = (pa * (1.0 - pa) / n + pb * (1.0 - pb) / n).sqrt();
            let delta = b.eval_accuracy - a.eval_accuracy;
            BlockDelta {
                block: a.block,
                baseline_accuracy: a.eval_accuracy,
                other_accuracy: b.eval_accuracy,
                delta,
                sigma,
                significant: delta.abs() > 3.0 * sigma,
            }
        })
        .collect();
    Ok(ReportComparison {
        baseline_id: baseline.model_id.clone(),
        other_id: other.model_id.clone(),
        eval_count: baseline.eval_count,
        deltas,
    })
}

/// Expected accuracy of an uninformed probe: a probe on speaker-shuffled
/// data should land within binomial noise of this.
pub fn chance_level(num_speakers: usize) -> f64 {
    1.0 / num_speakers as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, nearest_centroid_sid_accuracy, split, CorpusConfig};
    use crate::model::init_backbone;

    fn probe_corpus(offset: f64, tilt: f64, noise: f64, seed: u64) -> Vec<Utterance> {
        let cfg = CorpusConfig {
            num_speakers: 5,
            utts_per_speaker: 24,
            content_vocab: 4,
            seq_len_range: (6, 10),
            frames_per_symbol_range: (2, 3),
            input_dim: 6,
            speaker_offset_scale: offset,
            speaker_tilt_scale: tilt,
            noise_scale: noise,
            seed,
        };
        generate_corpus(&cfg).unwrap()
    }

    fn quick_probe_cfg() -> ProbeConfig {
        ProbeConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-2,
            attn_hidden: 6,
            seed: 2,
            pre_layer_norm: false,
        }
    }

    fn small_backbone() -> BackboneConfig {
        BackboneConfig {
            num_blocks: 3,
            model_dim: 8,
            ff_dim: 12,
            input_dim: 6,
            vocab: 4,
        }
    }

    #[test]
    fn raw_input_probe_reaches_centroid_oracle_level() {
        let corpus = probe_corpus(1.5, 0.0, 0.2, 3);
        let (train, eval) = split(&corpus, 0.2, 3).unwrap();
        let oracle = nearest_centroid_sid_accuracy(&train, &eval);
        assert!(oracle > 0.99, "oracle should be ~1 at σ_spk=1.5, got {oracle}");
        let backbone = small_backbone();
        let store = init_backbone(&backbone, 1).unwrap();
        let (train_acc, eval_acc) =
            probe_block(&store, &backbone, 5, 0, &train, &eval, &quick_probe_cfg()).unwrap();
        assert!(train_acc > 0.95, "train accuracy {train_acc}");
        assert!(
            eval_acc >= oracle - 0.05,
            "probe ({eval_acc}) should reach the centroid oracle ({oracle})"
        );
    }

    #[test]
    fn shuffled_labels_probe_at_chance_level() {
        let mut corpus = probe_corpus(1.0, 0.3, 0.2, 4);
        // break the feature–speaker association: randomly permute the
        // speaker labels across utterances (marginals stay balanced)
        let mut speakers: Vec<usize> = corpus.iter().map(|u| u.speaker).collect();
        use rand::seq::SliceRandom;
        let mut rng = component_rng(99, 7);
        speakers.shuffle(&mut rng);
        for (utt, &s) in corpus.iter_mut().zip(&speakers) {
            utt.speaker = s;
        }
        let (train, eval) = split(&corpus, 0.2, 4).unwrap();
        let backbone = small_backbone();
        let store = init_backbone(&backbone, 1).unwrap();
        let (_, eval_acc) =
            probe_block(&store, &backbone, 5, 1, &train, &eval, &quick_probe_cfg()).unwrap();
        let p = chance_level(5);
        let n_eval = eval.len() as f64;
        let sigma = (p * (1.0 - p) / n_eval).sqrt();
        assert!(
            (eval_acc - p).abs() <= 3.0 * sigma + 1e-9,
            "accuracy {eval_acc} vs chance {p} (σ {sigma})"
        );
    }

    #[test]
    fn probing_leaves_backbone_bit_identical() {
        let corpus = probe_corpus(1.0, 0.3, 0.2, 5);
        let (train, eval) = split(&corpus, 0.2, 5).unwrap();
        let backbone = small_backbone();
        let store = init_backbone(&backbone, 1).unwrap();
        let before = store.checksum();
        let report = probe_all_blocks(
            &store,
            &backbone,
            5,
            &train,
            &eval,
            &quick_probe_cfg(),
            "frozen",
            5,
        )
        .unwrap();
        assert_eq!(store.checksum(), before);
        assert_eq!(report.blocks.len(), backbone.num_blocks);
        for (i, b) in report.blocks.iter().enumerate() {
            assert_eq!(b.block, i + 1);
            assert!((0.0..=1.0).contains(&b.eval_accuracy));
            assert!((0.0..=1.0).contains(&b.train_accuracy));
        }
    }

    #[test]
    fn probe_results_are_deterministic() {
        let corpus = probe_corpus(1.0, 0.3, 0.2, 6);
        let (train, eval) = split(&corpus, 0.2, 6).unwrap();
        let backbone = small_backbone();
        let store = init_backbone(&backbone, 2).unwrap();
        let run = || {
            probe_all_blocks(
                &store,
                &backbone,
                5,
                &train,
                &eval,
                &quick_probe_cfg(),
                "m",
                6,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn unseen_eval_speaker_is_rejected() {
        let corpus = probe_corpus(1.0, 0.0, 0.1, 7);
        let (train, mut eval) = split(&corpus, 0.2, 7).unwrap();
        eval[0].speaker = 4; // fine — but remove that speaker from train
        let train: Vec<Utterance> = train.into_iter().filter(|u| u.speaker != 4).collect();
        let backbone = small_backbone();
        let store = init_backbone(&backbone, 1).unwrap();
        assert!(matches!(
            probe_block(&store, &backbone, 5, 1, &train, &eval, &quick_probe_cfg()),
            Err(Error::Probe(_))
        ));
    }

    #[test]
    fn comparing_a_report_with_itself_gives_zero_deltas() {
        let corpus = probe_corpus(1.0, 0.3, 0.2, 8);
        let (train, eval) = split(&corpus, 0.2, 8).unwrap();
        let backbone = small_backbone();
        let store = init_backbone(&backbone, 3).unwrap();
        let report = probe_all_blocks(
            &store,
            &backbone,
            5,
            &train,
            &eval,
            &quick_probe_cfg(),
            "self",
            8,
        )
        .unwrap();
        let cmp = compare_reports(&report, &report).unwrap();
        for d in &cmp.deltas {
            assert_eq!(d.delta, 0.0);
            assert!(!d.significant);
            assert!(d.sigma > 0.0);
        }
    }

    #[test]
    fn mismatched_split_seeds_cannot_be_compared() {
        let corpus = probe_corpus(1.0, 0.3, 0.2, 9);
        let (train, eval) = split(&corpus, 0.2, 9).unwrap();
        let backbone = small_backbone();
        let store = init_backbone(&backbone, 3).unwrap();
        let a = probe_all_blocks(
            &store, &backbone, 5, &train, &eval, &quick_probe_cfg(), "a", 9,
        )
        .unwrap();
        let mut b = a.clone();
        b.split_seed = 10;
        assert!(matches!(compare_reports(&a, &b), Err(Error::Probe(_))));
    }

    #[test]
    fn report_round_trips_through_json() {
        let corpus = probe_corpus(1.0, 0.0, 0.2, 10);
        let (train, eval) = split(&corpus, 0.2, 10).unwrap();
        let backbone = small_backbone();
        let store = init_backbone(&backbone, 4).unwrap();
        let report = probe_all_blocks(
            &store, &backbone, 5, &train, &eval, &quick_probe_cfg(), "rt", 10,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save_json(&path).unwrap();
        let loaded = ProbeReport::load_json(&path).unwrap();
        assert_eq!(report, loaded);
    }
}
