//! The release gate: exact oracles and algebraic identities, independent of
//! the training pipeline. Prints one line per check; exits non-zero if any
//! check fails.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::{bail, Result};
use rand::Rng;

use grlmtl_core::ctc::{ctc_bruteforce, ctc_loss, ctc_node, FramePosteriors, LabelSeq};
use grlmtl_core::data::Utterance;
use grlmtl_core::gradcheck::finite_diff_check;
use grlmtl_core::graph::{Graph, NodeId};
use grlmtl_core::model::{
    backbone_forward, init_backbone, init_speaker_classifier, speaker_branch, BackboneConfig,
    ParamNodes, SpeakerClassifierConfig, TapPoint,
};
use grlmtl_core::objectives::{assemble_objective, ObjectiveKind, ObjectiveSpec};
use grlmtl_core::params::{component_rng, ParamStore};
use grlmtl_core::tensor::{self, Tensor};
use grlmtl_core::Result as CoreResult;

pub fn run() -> Result<()> {
    let started = Instant::now();
    let mut all_ok = true;
    let mut check = |name: &str, result: Result<String>| {
        match result {
            Ok(detail) => println!("VERIFY {name:<34} ok   {detail}"),
            Err(e) => {
                println!("VERIFY {name:<34} FAIL {e:#}");
                all_ok = false;
            }
        };
    };

    check("ctc-enumeration-equivalence", ctc_oracle_equivalence());
    check("ctc-gradient-finite-diff", ctc_gradient_check());
    check("model-gradient-finite-diff", model_gradient_check());
    check("grl-negation-identity", grl_negation_identity());
    check("grl-adaptive-scale-identity", grl_adaptive_identity());
    check("grl-discriminator-unaffected", discriminator_unaffected());
    check("checkpoint-round-trip", checkpoint_round_trip());
    check("parallel-sequential-equality", parallel_equality());

    println!("verify finished in {:.1}s", started.elapsed().as_secs_f64());
    if !all_ok {
        return Err(anyhow::Error::new(grlmtl_core::Error::NumericalCollapse(
            "verification failed".into(),
        )));
    }
    Ok(())
}

fn random_posteriors(frames: usize, classes: usize, seed: u64) -> FramePosteriors {
    let mut rng = component_rng(seed, 77);
    let logits: Vec<f64> = (0..frames * classes)
        .map(|_| rng.gen_range(-2.0..2.0))
        .collect();
    let t = Tensor::from_vec(&[frames, classes], logits).expect("logits");
    FramePosteriors::new(tensor::log_softmax(&t)).expect("posteriors")
}

fn ctc_oracle_equivalence() -> Result<String> {
    let mut rng = component_rng(0xCE11, 1);
    let mut checked = 0usize;
    let mut max_diff: f64 = 0.0;
    for i in 0..250 {
        let vocab = rng.gen_range(2..=3usize);
        let frames = rng.gen_range(1..=6usize);
        let len = rng.gen_range(1..=3usize.min(frames));
        let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let labels = LabelSeq::new(symbols, vocab)?;
        if frames < labels.min_frames() {
            continue;
        }
        let p = random_posteriors(frames, vocab + 1, 9000 + i);
        let (loss, _) = ctc_loss(&p, &labels)?;
        let oracle = ctc_bruteforce(&p, &labels)?;
        let diff = (loss - oracle).abs();
        max_diff = max_diff.max(diff);
        checked += 1;
        if diff > 1e-9 {
            bail!("instance {i}: |dp − enumeration| = {diff:.3e}");
        }
    }
    if checked < 200 {
        bail!("only {checked} feasible instances generated");
    }
    Ok(format!("{checked} instances, max |Δ| {max_diff:.2e}"))
}

fn ctc_gradient_check() -> Result<String> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let p = random_posteriors(5, 4, 9500 + seed);
        let labels = LabelSeq::new(vec![0, 2], 3)?;
        let (_, grad) = ctc_loss(&p, &labels)?;
        let eps = 1e-6;
        let mut max_abs_err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for idx in 0..p.log_probs().len() {
            let mut plus = p.log_probs().clone();
            plus.data_mut()[idx] += eps;
            let mut minus = p.log_probs().clone();
            minus.data_mut()[idx] -= eps;
            // perturbed rows are no longer normalized; the recursion is
            // defined for free log-weights, so bypass validation
            let (fp, _) = ctc_loss(&FramePosteriors::new_unchecked(plus), &labels)?;
            let (fm, _) = ctc_loss(&FramePosteriors::new_unchecked(minus), &labels)?;
            let fd = (fp - fm) / (2.0 * eps);
            max_abs_err = max_abs_err.max((grad.data()[idx] - fd).abs());
            scale = scale.max(grad.data()[idx].abs());
        }
        let rel = max_abs_err / scale.max(1e-8);
        worst = worst.max(rel);
        if rel > 1e-5 {
            bail!("seed {seed}: relative error {rel:.3e} > 1e-5");
        }
    }
    Ok(format!("max rel err {worst:.2e} (tol 1e-5)"))
}

fn model_gradient_check() -> Result<String> {
    let cfg = BackboneConfig {
        num_blocks: 3,
        model_dim: 5,
        ff_dim: 7,
        input_dim: 3,
        vocab: 2,
    };
    let cls = SpeakerClassifierConfig {
        attn_hidden: 4,
        num_speakers: 3,
    };
    let mut store = init_backbone(&cfg, 77)?;
    init_speaker_classifier(&mut store, "spk1", cfg.model_dim, &cls, 77, 1);
    init_speaker_classifier(&mut store, "spk2", cfg.model_dim, &cls, 77, 2);
    let mut rng = component_rng(77, 50);
    let features = Tensor::from_vec(
        &[4, cfg.input_dim],
        (0..4 * cfg.input_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;
    let labels = LabelSeq::new(vec![0, 1], cfg.vocab)?;
    let build = move |p: &ParamStore| -> CoreResult<(Graph, NodeId)> {
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let x = g.input("features", features.clone());
        let out = backbone_forward(&mut g, &mut pn, p, &cfg, x)?;
        let ctc = ctc_node(&mut g, out.log_probs, &labels)?;
        let b1 = speaker_branch(&mut g, &mut pn, p, "spk1", out.tap(TapPoint::pre_ln(1)), 1, 3)?;
        let b2 = speaker_branch(&mut g, &mut pn, p, "spk2", out.tap(TapPoint::post_ln(2)), 1, 3)?;
        let partial = g.add_scaled(ctc, b1.ce, 0.5)?;
        let loss = g.add_scaled(partial, b2.ce, 1.0)?;
        Ok((g, loss))
    };
    let report = finite_diff_check(&store, build, 1e-5, 1e-4)?;
    if !report.passed() {
        bail!(
            "max rel err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst_param()
        );
    }
    Ok(format!(
        "{} parameter tensors, max rel err {:.2e} (tol 1e-4)",
        report.per_param.len(),
        report.max_rel_err
    ))
}

struct AdversarialSetup {
    cfg: BackboneConfig,
    cls: SpeakerClassifierConfig,
    store: ParamStore,
    batch: Vec<Utterance>,
}

fn adversarial_setup() -> AdversarialSetup {
    let cfg = BackboneConfig {
        num_blocks: 4,
        model_dim: 6,
        ff_dim: 9,
        input_dim: 4,
        vocab: 3,
    };
    let cls = SpeakerClassifierConfig {
        attn_hidden: 5,
        num_speakers: 4,
    };
    let mut store = init_backbone(&cfg, 123).expect("backbone");
    init_speaker_classifier(&mut store, "spk2", cfg.model_dim, &cls, 123, 2);
    let mut rng = component_rng(321, 60);
    let batch: Vec<Utterance> = (0..3)
        .map(|i| {
            let t = rng.gen_range(5..8usize);
            let feats: Vec<f64> = (0..t * cfg.input_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            Utterance {
                id: format!("v{i}"),
                features: Tensor::from_vec(&[t, cfg.input_dim], feats).expect("features"),
                content: LabelSeq::new(vec![i % 3, (i + 1) % 3], cfg.vocab).expect("labels"),
                speaker: i % 4,
            }
        })
        .collect();
    AdversarialSetup {
        cfg,
        cls,
        store,
        batch,
    }
}

/// Gradients of the spk2 term alone, with the tap→classifier path going
/// through a pass-through node of the given backward scale (`None` = no node
/// at all: the true identity twin).
fn spk2_term_gradients(
    setup: &AdversarialSetup,
    l2: usize,
    backward_scale: Option<f64>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for utt in &setup.batch {
        let mut g = Graph::new();
        let mut pn = ParamNodes::new();
        let x = g.input("features", utt.features.clone());
        let out = backbone_forward(&mut g, &mut pn, &setup.store, &setup.cfg, x)?;
        let tap = out.tap(TapPoint::post_ln(l2));
        let branch_input = match backward_scale {
            // a reversal node with scale −s has backward g ↦ +s·g
            Some(s) => g.gradient_reversal(tap, -s).0,
            None => tap,
        };
        let branch = speaker_branch(
            &mut g,
            &mut pn,
            &setup.store,
            "spk2",
            branch_input,
            utt.speaker,
            setup.cls.num_speakers,
        )?;
        let grads = g.backward(branch.ce)?;
        for (name, t) in g.param_gradients(&grads) {
            match acc.get_mut(&name) {
                Some(a) => tensor::add_into(a, &t),
                None => {
                    acc.insert(name, t);
                }
            }
        }
    }
    Ok(acc)
}

/// The adaptive reversal scale the assembled objective would use on this
/// batch: the batch-mean discriminator target posterior.
fn assembled_lambda_adapt(setup: &AdversarialSetup, l2: usize) -> Result<f64> {
    let spec = ObjectiveSpec::new(ObjectiveKind::SpkAdvAdaptive).with_l2(l2);
    let obj = assemble_objective(&setup.store, &setup.cfg, &setup.cls, &spec, &setup.batch)?;
    obj.lambda_adapt
        .ok_or_else(|| anyhow::anyhow!("adaptive objective produced no λ_adapt"))
}

fn grl_negation_identity() -> Result<String> {
    let setup = adversarial_setup();
    let l2 = 3;
    // backward scale −1: the standard reversal at λ₂ = 1
    let reversed = spk2_term_gradients(&setup, l2, Some(-1.0))?;
    let twin = spk2_term_gradients(&setup, l2, None)?;
    let mut below = 0usize;
    for (name, g_rev) in &reversed {
        let g_twin = &twin[name];
        if name.starts_with("spk2.") {
            for (a, b) in g_rev.data().iter().zip(g_twin.data()) {
                if a.to_bits() != b.to_bits() {
                    bail!("{name}: discriminator gradient changed by the reversal");
                }
            }
        } else {
            below += 1;
            for (a, b) in g_rev.data().iter().zip(g_twin.data()) {
                if a.to_bits() != (-b).to_bits() {
                    bail!("{name}: not an exact negation ({a} vs −{b})");
                }
            }
        }
    }
    if below == 0 {
        bail!("no below-reversal parameters checked");
    }
    Ok(format!("{below} backbone tensors bitwise-negated"))
}

fn grl_adaptive_identity() -> Result<String> {
    let setup = adversarial_setup();
    let l2 = 3;
    let lambda = assembled_lambda_adapt(&setup, l2)?;
    if !(0.0..=1.0).contains(&lambda) {
        bail!("λ_adapt {lambda} outside [0, 1]");
    }
    // the adaptive reversal (backward −λ) against a pass-through twin with
    // backward +λ at the same position: the graphs differ by exactly one
    // sign, so below-reversal gradients must be bitwise negations
    let reversed = spk2_term_gradients(&setup, l2, Some(-lambda))?;
    let pseudo = spk2_term_gradients(&setup, l2, Some(lambda))?;
    let twin = spk2_term_gradients(&setup, l2, None)?;
    let mut below = 0usize;
    for (name, g_rev) in &reversed {
        if !name.starts_with("backbone.") {
            continue;
        }
        below += 1;
        for (a, b) in g_rev.data().iter().zip(pseudo[name].data()) {
            if a.to_bits() != (-b).to_bits() {
                bail!("{name}: reversal is not the bitwise negation of the λ-scaled twin");
            }
        }
        // −λ·(unscaled twin): equal to floating-point rounding, since the
        // scalar multiplication does not commute bitwise through the chain
        let g_twin = &twin[name];
        let scale_ref = g_twin.max_abs().max(1e-12);
        for (a, b) in g_rev.data().iter().zip(g_twin.data()) {
            let expected = -lambda * b;
            let rel = (a - expected).abs() / (expected.abs().max(lambda * scale_ref * 1e-6));
            if rel > 1e-9 {
                bail!("{name}: −λ·twin mismatch, rel {rel:.3e}");
            }
        }
    }
    if below == 0 {
        bail!("no below-reversal parameters checked");
    }
    Ok(format!(
        "λ_adapt {lambda:.4}, {below} tensors ≡ −λ·twin (bitwise up to the one scale)"
    ))
}

fn discriminator_unaffected() -> Result<String> {
    let setup = adversarial_setup();
    let l2 = 3;
    let reversed = spk2_term_gradients(&setup, l2, Some(0.37))?;
    let twin = spk2_term_gradients(&setup, l2, None)?;
    let mut checked = 0usize;
    for (name, g_rev) in &reversed {
        if !name.starts_with("spk2.") {
            continue;
        }
        checked += 1;
        for (a, b) in g_rev.data().iter().zip(twin[name].data()) {
            if a.to_bits() != b.to_bits() {
                bail!("{name}: discriminator gradient depends on reversal scale");
            }
        }
    }
    Ok(format!("{checked} discriminator tensors bitwise-equal"))
}

fn checkpoint_round_trip() -> Result<String> {
    let dir = std::env::temp_dir().join(format!("grlmtl-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("verify.ckpt");
    let cfg = BackboneConfig {
        num_blocks: 2,
        model_dim: 4,
        ff_dim: 5,
        input_dim: 3,
        vocab: 2,
    };
    let store = init_backbone(&cfg, 9)?;
    grlmtl_core::checkpoint::save_checkpoint(&store, &path)?;
    let loaded = grlmtl_core::checkpoint::load_checkpoint(&path)?;
    std::fs::remove_file(&path).ok();
    std::fs::remove_dir(&dir).ok();
    if !store.bit_identical(&loaded) {
        bail!("round-trip altered tensors");
    }
    Ok(format!("{} tensors bit-identical", store.len()))
}

#[cfg(feature = "parallel")]
fn parallel_equality() -> Result<String> {
    let setup = adversarial_setup();
    let spec = ObjectiveSpec::new(ObjectiveKind::SpkAdvAdaptive).with_l2(3);
    let grads_with = |threads: usize| -> Result<BTreeMap<String, Tensor>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()?;
        let out = pool.install(|| -> CoreResult<BTreeMap<String, Tensor>> {
            let obj =
                assemble_objective(&setup.store, &setup.cfg, &setup.cls, &spec, &setup.batch)?;
            obj.backward()
        })?;
        Ok(out)
    };
    let single = grads_with(1)?;
    let many = grads_with(4)?;
    for (name, a) in &single {
        let b = &many[name];
        for (x, y) in a.data().iter().zip(b.data()) {
            if x.to_bits() != y.to_bits() {
                bail!("{name}: gradients differ across thread counts");
            }
        }
    }
    Ok(format!("{} tensors identical across 1 and 4 threads", single.len()))
}

#[cfg(not(feature = "parallel"))]
fn parallel_equality() -> Result<String> {
    Ok("sequential build; nothing to compare".into())
}
