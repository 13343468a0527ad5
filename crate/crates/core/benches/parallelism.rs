//! Data-parallel versus sequential execution of the training inner loops.
//!
//! The `parallel` feature routes utterance-level work through rayon; results
//! are bit-identical across thread counts because per-utterance outputs are
//! reduced in input order. These benches quantify the speedup on the three
//! hottest loops: batch gradient computation, frozen-backbone probing
//! forwards, and the CTC enumeration oracle.

use criterion::{criterion_group, criterion_main, Criterion};

use grlmtl_core::ctc::{ctc_bruteforce, FramePosteriors, LabelSeq};
use grlmtl_core::data::{generate_corpus, CorpusConfig, Utterance};
use grlmtl_core::model::{
    init_backbone, init_speaker_classifier, BackboneConfig, SpeakerClassifierConfig,
};
use grlmtl_core::objectives::{assemble_objective, ObjectiveKind, ObjectiveSpec};
use grlmtl_core::params::ParamStore;
use grlmtl_core::tensor::{self, Tensor};

struct Fixture {
    backbone: BackboneConfig,
    classifier: SpeakerClassifierConfig,
    store: ParamStore,
    batch: Vec<Utterance>,
}

fn fixture() -> Fixture {
    let corpus_cfg = CorpusConfig {
        num_speakers: 8,
        utts_per_speaker: 4,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&corpus_cfg).expect("corpus");
    let backbone = BackboneConfig {
        input_dim: corpus_cfg.input_dim,
        vocab: corpus_cfg.content_vocab,
        ..BackboneConfig::default()
    };
    let classifier = SpeakerClassifierConfig {
        num_speakers: corpus_cfg.num_speakers,
        ..SpeakerClassifierConfig::default()
    };
    let mut store = init_backbone(&backbone, 7).expect("backbone");
    init_speaker_classifier(&mut store, "spk1", backbone.model_dim, &classifier, 7, 1);
    init_speaker_classifier(&mut store, "spk2", backbone.model_dim, &classifier, 7, 2);
    Fixture {
        backbone,
        classifier,
        store,
        batch: corpus.into_iter().take(16).collect(),
    }
}

#[cfg(feature = "parallel")]
fn with_threads<R>(threads: usize, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("pool")
        .install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_threads<R>(_threads: usize, f: impl FnOnce() -> R) -> R {
    f()
}

fn batch_gradient_step(fx: &Fixture) -> f64 {
    let spec = ObjectiveSpec::new(ObjectiveKind::SpkEnhAdvJoint)
        .with_l1(3)
        .with_l2(6);
    let obj = assemble_objective(&fx.store, &fx.backbone, &fx.classifier, &spec, &fx.batch)
        .expect("objective");
    let grads = obj.backward().expect("backward");
    grads.values().map(Tensor::max_abs).sum()
}

fn bench_batch_gradients(c: &mut Criterion) {
    let fx = fixture();
    let mut group = c.benchmark_group("batch_gradient_step");
    group.sample_size(10);
    group.bench_function("sequential_1_thread", |b| {
        b.iter(|| with_threads(1, || batch_gradient_step(&fx)))
    });
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(2);
    group.bench_function(format!("parallel_{cores}_threads"), |b| {
        b.iter(|| with_threads(cores, || batch_gradient_step(&fx)))
    });
    group.finish();
}

fn enumeration_oracle(frames: usize) -> f64 {
    let classes = 4;
    let logits: Vec<f64> = (0..frames * classes)
        .map(|i| ((i * 2654435761) % 97) as f64 / 97.0 - 0.5)
        .collect();
    let t = Tensor::from_vec(&[frames, classes], logits).expect("logits");
    let p = FramePosteriors::new(tensor::log_softmax(&t)).expect("posteriors");
    let labels = LabelSeq::new(vec![0, 1, 2], 3).expect("labels");
    ctc_bruteforce(&p, &labels).expect("oracle")
}

fn bench_ctc_enumeration(c: &mut Criterion) {
    let mut group = c.benchmark_group("ctc_enumeration_11_frames");
    group.sample_size(10);
    group.bench_function("sequential_1_thread", |b| {
        b.iter(|| with_threads(1, || enumeration_oracle(11)))
    });
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(2);
    group.bench_function(format!("parallel_{cores}_threads"), |b| {
        b.iter(|| with_threads(cores, || enumeration_oracle(11)))
    });
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_ctc_enumeration);
criterion_main!(benches);
