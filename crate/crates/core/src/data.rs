//! Synthetic speaker-entangled corpus.
//!
//! Content label sequences are rendered as runs of frames: each symbol has a
//! fixed random unit prototype vector, and each speaker perturbs it with an
//! additive offset and a multiplicative per-dimension tilt, plus white noise.
//! The offset alone would be removable by mean subtraction; the tilt makes
//! speaker variance entangle with content, which is what gives the
//! adversarial objective something real to remove.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::params::component_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub content_vocab: usize,
    /// Total frame count range [T_min, T_max] per utterance.
    pub seq_len_range: (usize, usize),
    /// Frames emitted per content symbol.
    pub frames_per_symbol_range: (usize, usize),
    pub input_dim: usize,
    /// Scale of the additive per-speaker offset.
    pub speaker_offset_scale: f64,
    /// Scale of the multiplicative per-speaker tilt around 1.
    pub speaker_tilt_scale: f64,
    /// White-noise scale per frame.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_speakers: 20,
            utts_per_speaker: 100,
            content_vocab: 10,
            seq_len_range: (20, 40),
            frames_per_symbol_range: (3, 5),
            input_dim: 16,
            // Tilt-dominant speaker signatures: the additive offset alone is
            // linearly persistent through the residual stream, so a large
            // offset saturates per-block speaker probes. The tilt entangles
            // speaker with content and fades with depth under recognition
            // pressure, which is what leaves the auxiliary objectives
            // something measurable to add or remove.
            speaker_offset_scale: 0.06,
            speaker_tilt_scale: 0.45,
            noise_scale: 0.24,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let (t_min, t_max) = self.seq_len_range;
        if t_min < 1 || t_max < t_min {
            return Err(Error::Config(format!(
                "invalid seq_len_range [{t_min}, {t_max}]"
            )));
        }
        let (f_min, f_max) = self.frames_per_symbol_range;
        if f_min < 1 || f_max < f_min {
            return Err(Error::Config(format!(
                "invalid frames_per_symbol_range [{f_min}, {f_max}]"
            )));
        }
        if self.num_speakers == 0 || self.utts_per_speaker == 0 {
            return Err(Error::Config("need at least one speaker and utterance".into()));
        }
        if self.content_vocab < 2 {
            return Err(Error::Config("content_vocab must be at least 2".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        for (name, v) in [
            ("speaker_offset_scale", self.speaker_offset_scale),
            ("speaker_tilt_scale", self.speaker_tilt_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// One utterance: feature matrix, content labels, speaker label.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    /// T×F acoustic features.
    pub features: Tensor,
    pub content: LabelSeq,
    pub speaker: usize,
}

/// Standard normal via Box-Muller; deterministic given the generator state.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Fixed per-symbol and per-speaker signatures drawn from the corpus seed.
pub struct CorpusSignatures {
    pub prototypes: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
    pub tilts: Vec<Vec<f64>>,
}

pub fn corpus_signatures(cfg: &CorpusConfig) -> CorpusSignatures {
    let f = cfg.input_dim;
    let mut proto_rng = component_rng(cfg.seed, 10);
    let prototypes: Vec<Vec<f64>> = (0..cfg.content_vocab)
        .map(|_| unit_vector(f, &mut proto_rng))
        .collect();
    let mut offset_rng = component_rng(cfg.seed, 11);
    let offsets: Vec<Vec<f64>> = (0..cfg.num_speakers)
        .map(|_| {
            (0..f)
                .map(|_| cfg.speaker_offset_scale * gauss(&mut offset_rng))
                .collect()
        })
        .collect();
    let mut tilt_rng = component_rng(cfg.seed, 12);
    let tilts: Vec<Vec<f64>> = (0..cfg.num_speakers)
        .map(|_| {
            (0..f)
                .map(|_| 1.0 + cfg.speaker_tilt_scale * gauss(&mut tilt_rng))
                .collect()
        })
        .collect();
    CorpusSignatures {
        prototypes,
        offsets,
        tilts,
    }
}

/// Generates the full corpus deterministically from the config seed.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let sig = corpus_signatures(cfg);
    let f = cfg.input_dim;
    let vocab = cfg.content_vocab;
    let mut rng = component_rng(cfg.seed, 13);
    let mut corpus = Vec::with_capacity(cfg.num_speakers * cfg.utts_per_speaker);
    let mut utt_counter = 0usize;
    for speaker in 0..cfg.num_speakers {
        for _ in 0..cfg.utts_per_speaker {
            let (t_min, t_max) = cfg.seq_len_range;
            let target = rng.gen_range(t_min..=t_max);
            let (f_min, f_max) = cfg.frames_per_symbol_range;
            let mut runs: Vec<(usize, usize)> = Vec::new();
            let mut total = 0usize;
            let mut prev: Option<usize> = None;
            while total < target {
                // uniform over the alphabet, excluding the previous symbol so
                // the label sequence needs no separating blanks
                let sym = match prev {
                    None => rng.gen_range(0..vocab),
                    Some(p) => {
                        let draw = rng.gen_range(0..vocab - 1);
                        if draw >= p {
                            draw + 1
                        } else {
                            draw
                        }
                    }
                };
                let run = rng.gen_range(f_min..=f_max).min(target - total);
                runs.push((sym, run));
                total += run;
                prev = Some(sym);
            }
            let symbols: Vec<usize> = runs.iter().map(|&(s, _)| s).collect();
            let mut data = Vec::with_capacity(total * f);
            for &(sym, run) in &runs {
                for _ in 0..run {
                    for j in 0..f {
                        let clean =
                            sig.tilts[speaker][j] * sig.prototypes[sym][j] + sig.offsets[speaker][j];
                        data.push(clean + cfg.noise_scale * gauss(&mut rng));
                    }
                }
            }
            let features = Tensor::from_vec(&[total, f], data)?;
            let content = LabelSeq::new(symbols, vocab)?;
            debug_assert!(content.min_frames() <= total);
            corpus.push(Utterance {
                id: format!("utt{utt_counter:06}"),
                features,
                content,
                speaker,
            });
            utt_counter += 1;
        }
    }
    Ok(corpus)
}

/// Utterance-level random split, stratified so every speaker appears in both
/// parts. Fails if any speaker has fewer than two utterances.
pub fn split(
    corpus: &[Utterance],
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    if !(0.0..1.0).contains(&eval_fraction) || eval_fraction <= 0.0 {
        return Err(Error::Config(format!(
            "eval_fraction {eval_fraction} outside (0, 1)"
        )));
    }
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, utt) in corpus.iter().enumerate() {
        by_speaker.entry(utt.speaker).or_default().push(i);
    }
    let mut rng = component_rng(seed, 14);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (speaker, mut indices) in by_speaker {
        if indices.len() < 2 {
            return Err(Error::Corpus(format!(
                "speaker {speaker} has {} utterance(s); need at least 2 to stratify",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let n = indices.len();
        let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
        for (pos, &idx) in indices.iter().enumerate() {
            if pos < n_eval {
                eval.push(idx);
            } else {
                train.push(idx);
            }
        }
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((
        train.into_iter().map(|i| corpus[i].clone()).collect(),
        eval.into_iter().map(|i| corpus[i].clone()).collect(),
    ))
}

/// A batch padded to the longest utterance it contains. Padding frames are
/// excluded from every downstream computation by slicing back to the true
/// length, so padded and unpadded evaluations agree exactly.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    /// batch × T_max × F.
    pub features: Tensor,
    pub lengths: Vec<usize>,
    pub labels: Vec<LabelSeq>,
    pub speakers: Vec<usize>,
    pub ids: Vec<String>,
}

impl PaddedBatch {
    pub fn from_utterances(utts: &[&Utterance]) -> PaddedBatch {
        let t_max = utts.iter().map(|u| u.features.rows()).max().unwrap_or(1);
        let f = utts[0].features.cols();
        let mut data = vec![0.0; utts.len() * t_max * f];
        for (i, u) in utts.iter().enumerate() {
            let t = u.features.rows();
            let dst = &mut data[i * t_max * f..i * t_max * f + t * f];
            dst.copy_from_slice(u.features.data());
        }
        PaddedBatch {
            features: Tensor::from_vec(&[utts.len(), t_max, f], data).expect("padded batch"),
            lengths: utts.iter().map(|u| u.features.rows()).collect(),
            labels: utts.iter().map(|u| u.content.clone()).collect(),
            speakers: utts.iter().map(|u| u.speaker).collect(),
            ids: utts.iter().map(|u| u.id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// The i-th utterance's true-length feature matrix (mask applied).
    pub fn utterance_features(&self, i: usize) -> Tensor {
        let shape = self.features.shape();
        let (t_max, f) = (shape[1], shape[2]);
        let t = self.lengths[i];
        let start = i * t_max * f;
        Tensor::from_vec(&[t, f], self.features.data()[start..start + t * f].to_vec())
            .expect("utterance slice")
    }

    /// Reassembled utterances with padding stripped.
    pub fn utterances(&self) -> Vec<Utterance> {
        (0..self.len())
            .map(|i| Utterance {
                id: self.ids[i].clone(),
                features: self.utterance_features(i),
                content: self.labels[i].clone(),
                speaker: self.speakers[i],
            })
            .collect()
    }
}

/// Deterministic shuffled padded batches for one epoch.
pub fn batch_iterator<'a>(
    data: &'a [Utterance],
    batch_size: usize,
    shuffle_seed: u64,
) -> impl Iterator<Item = PaddedBatch> + 'a {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = component_rng(shuffle_seed, 15);
    order.shuffle(&mut rng);
    let batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect();
    batches.into_iter().map(move |chunk| {
        let utts: Vec<&Utterance> = chunk.iter().map(|&i| &data[i]).collect();
        PaddedBatch::from_utterances(&utts)
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub schema_version: u32,
    pub num_speakers: usize,
    pub content_vocab: usize,
    pub input_dim: usize,
    pub utterances: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    id: String,
    speaker: usize,
    labels: Vec<usize>,
    frames: usize,
}

pub fn tensors_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".tensors")
}

pub fn index_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".index.jsonl")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<prefix>.tensors` (feature matrices in the checkpoint container)
/// and `<prefix>.index.jsonl` (one record per utterance plus a meta header).
pub fn save_corpus(corpus: &[Utterance], meta: &CorpusMeta, prefix: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for utt in corpus {
        tensors.insert(utt.id.clone(), utt.features.clone());
    }
    checkpoint::save_tensors(&tensors_path(prefix), &tensors)?;

    let file = std::fs::File::create(index_path(prefix))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, meta)?;
    w.write_all(b"\n")?;
    for utt in corpus {
        let record = IndexRecord {
            id: utt.id.clone(),
            speaker: utt.speaker,
            labels: utt.content.symbols().to_vec(),
            frames: utt.features.rows(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(prefix: &Path) -> Result<(Vec<Utterance>, CorpusMeta)> {
    let mut tensors = checkpoint::load_tensors(&tensors_path(prefix))?;
    let file = std::fs::File::open(index_path(prefix))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::Corpus("empty index file".into()))??;
    let meta: CorpusMeta = serde_json::from_str(&meta_line)?;
    let mut corpus = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: IndexRecord = serde_json::from_str(&line)?;
        let features = tensors.remove(&record.id).ok_or_else(|| {
            Error::Corpus(format!("utterance {} missing from tensor file", record.id))
        })?;
        if features.rows() != record.frames {
            return Err(Error::Corpus(format!(
                "utterance {}: index says {} frames, tensor has {}",
                record.id,
                record.frames,
                features.rows()
            )));
        }
        corpus.push(Utterance {
            id: record.id,
            features,
            content: LabelSeq::new(record.labels, meta.content_vocab)?,
            speaker: record.speaker,
        });
    }
    if corpus.len() != meta.utterances {
        return Err(Error::Corpus(format!(
            "index declares {} utterances, found {}",
            meta.utterances,
            corpus.len()
        )));
    }
    Ok((corpus, meta))
}

/// Nearest-centroid speaker classification accuracy on utterance-mean
/// features: the oracle lower bound for raw-input speaker probing.
pub fn nearest_centroid_sid_accuracy(train: &[Utterance], eval: &[Utterance]) -> f64 {
    let f = train[0].features.cols();
    let mut centroids: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for utt in train {
        let mean = utterance_mean(utt, f);
        let entry = centroids.entry(utt.speaker).or_insert((vec![0.0; f], 0));
        for (a, b) in entry.0.iter_mut().zip(&mean) {
            *a += b;
        }
        entry.1 += 1;
    }
    let centroids: Vec<(usize, Vec<f64>)> = centroids
        .into_iter()
        .map(|(s, (sum, n))| (s, sum.iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut correct = 0usize;
    for utt in eval {
        let mean = utterance_mean(utt, f);
        let mut best = (usize::MAX, f64::INFINITY);
        for (s, c) in &centroids {
            let d: f64 = c
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (*s, d);
            }
        }
        if best.0 == utt.speaker {
            correct += 1;
        }
    }
    correct as f64 / eval.len() as f64
}

fn utterance_mean(utt: &Utterance, f: usize) -> Vec<f64> {
    let t = utt.features.rows();
    let mut mean = vec![0.0; f];
    for i in 0..t {
        for (m, v) in mean.iter_mut().zip(utt.features.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> CorpusConfig {
        CorpusConfig {
            num_speakers: 6,
            utts_per_speaker: 12,
            content_vocab: 5,
            seq_len_range: (8, 14),
            frames_per_symbol_range: (2, 3),
            input_dim: 8,
            speaker_offset_scale: 1.0,
            speaker_tilt_scale: 0.0,
            noise_scale: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn clean_frames_recover_content_by_nearest_prototype() {
        let mut cfg = quick_cfg();
        cfg.speaker_offset_scale = 0.0;
        cfg.speaker_tilt_scale = 0.0;
        cfg.noise_scale = 0.0;
        let corpus = generate_corpus(&cfg).unwrap();
        let sig = corpus_signatures(&cfg);
        for utt in &corpus {
            let mut decoded = Vec::new();
            let mut prev = usize::MAX;
            for t in 0..utt.features.rows() {
                let frame = utt.features.row(t);
                let mut best = (0usize, f64::INFINITY);
                for (v, proto) in sig.prototypes.iter().enumerate() {
                    let d: f64 = proto
                        .iter()
                        .zip(frame)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best.1 {
                        best = (v, d);
                    }
                }
                assert!(best.1 < 1e-20, "frame should equal a prototype exactly");
                if best.0 != prev {
                    decoded.push(best.0);
                    prev = best.0;
                }
            }
            assert_eq!(decoded, utt.content.symbols());
        }
    }

    #[test]
    fn speaker_offsets_make_centroid_classification_perfect() {
        let cfg = quick_cfg(); // offset 1.0, no tilt, no noise
        let corpus = generate_corpus(&cfg).unwrap();
        let (train, eval) = split(&corpus, 0.25, 7).unwrap();
        let acc = nearest_centroid_sid_accuracy(&train, &eval);
        assert_eq!(acc, 1.0, "σ_spk=1, σ_n=0 should classify perfectly");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = quick_cfg();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.speaker, y.speaker);
            assert_eq!(x.content.symbols(), y.content.symbols());
            for (u, v) in x.features.data().iter().zip(y.features.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn ctc_feasibility_holds_by_construction() {
        let mut cfg = quick_cfg();
        cfg.frames_per_symbol_range = (1, 2);
        let corpus = generate_corpus(&cfg).unwrap();
        for utt in &corpus {
            assert!(utt.content.min_frames() <= utt.features.rows());
            // no adjacent repeats, so min_frames == label count
            assert_eq!(utt.content.min_frames(), utt.content.len());
        }
    }

    #[test]
    fn split_is_stratified_and_exhaustive() {
        let cfg = CorpusConfig {
            num_speakers: 4,
            utts_per_speaker: 100,
            ..quick_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let (train, eval) = split(&corpus, 0.05, 3).unwrap();
        assert_eq!(train.len() + eval.len(), corpus.len());
        let mut per_speaker = BTreeMap::new();
        for u in &eval {
            *per_speaker.entry(u.speaker).or_insert(0usize) += 1;
        }
        assert_eq!(per_speaker.len(), cfg.num_speakers);
        for (_, n) in per_speaker {
            assert_eq!(n, 5, "5% of 100 utterances per speaker");
        }
        let mut train_speakers: Vec<usize> = train.iter().map(|u| u.speaker).collect();
        train_speakers.dedup();
        assert_eq!(train_speakers.len(), cfg.num_speakers);
    }

    #[test]
    fn split_requires_two_utterances_per_speaker() {
        let cfg = CorpusConfig {
            num_speakers: 2,
            utts_per_speaker: 1,
            ..quick_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        assert!(matches!(
            split(&corpus, 0.5, 0),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn label_distribution_is_uniform_within_three_sigma() {
        let cfg = CorpusConfig {
            num_speakers: 10,
            utts_per_speaker: 40,
            content_vocab: 5,
            ..quick_cfg()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut counts = vec![0usize; cfg.content_vocab];
        let mut total = 0usize;
        for utt in &corpus {
            for &s in utt.content.symbols() {
                counts[s] += 1;
                total += 1;
            }
        }
        let p = 1.0 / cfg.content_vocab as f64;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for (v, &c) in counts.iter().enumerate() {
            let expected = total as f64 * p;
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "symbol {v}: count {c} vs expected {expected} (σ {sigma})"
            );
        }
    }

    #[test]
    fn sid_accuracy_monotone_in_offset_scale() {
        for seed in [1u64, 2, 3] {
            let mut accs = Vec::new();
            for &scale in &[0.0, 0.5, 1.0] {
                let cfg = CorpusConfig {
                    num_speakers: 10,
                    utts_per_speaker: 30,
                    speaker_offset_scale: scale,
                    speaker_tilt_scale: 0.0,
                    noise_scale: 2.5,
                    seq_len_range: (10, 16),
                    input_dim: 8,
                    seed,
                    ..quick_cfg()
                };
                let corpus = generate_corpus(&cfg).unwrap();
                let (train, eval) = split(&corpus, 0.2, seed).unwrap();
                accs.push(nearest_centroid_sid_accuracy(&train, &eval));
            }
            assert!(
                accs[0] < accs[1] && accs[1] < accs[2],
                "seed {seed}: accuracies {accs:?} not strictly increasing"
            );
        }
    }

    #[test]
    fn padded_batches_have_expected_shape_and_exact_slices() {
        let cfg = quick_cfg();
        let corpus = generate_corpus(&cfg).unwrap();
        let batch_size = 5;
        let mut seen = 0usize;
        for batch in batch_iterator(&corpus, batch_size, 11) {
            let shape = batch.features.shape();
            assert_eq!(shape.len(), 3);
            assert_eq!(shape[0], batch.len());
            let t_max = *batch.lengths.iter().max().unwrap();
            assert_eq!(shape[1], t_max);
            assert_eq!(shape[2], cfg.input_dim);
            for i in 0..batch.len() {
                let sliced = batch.utterance_features(i);
                let original = corpus
                    .iter()
                    .find(|u| u.id == batch.ids[i])
                    .expect("utterance exists");
                assert_eq!(sliced.shape(), original.features.shape());
                for (a, b) in sliced.data().iter().zip(original.features.data()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            seen += batch.len();
        }
        assert_eq!(seen, corpus.len());
    }

    #[test]
    fn masked_pool_of_padded_utterance_equals_unpadded_pool() {
        use crate::graph::Graph;
        use crate::model::{attention_pool, init_speaker_classifier, ParamNodes};
        use crate::model::SpeakerClassifierConfig;
        use crate::params::ParamStore;

        let cfg = quick_cfg();
        let corpus = generate_corpus(&cfg).unwrap();
        let utts: Vec<&Utterance> = corpus.iter().take(4).collect();
        let batch = PaddedBatch::from_utterances(&utts);
        let cls = SpeakerClassifierConfig {
            attn_hidden: 5,
            num_speakers: cfg.num_speakers,
        };
        let mut store = ParamStore::new(0);
        init_speaker_classifier(&mut store, "spk1", cfg.input_dim, &cls, 13, 1);
        for i in 0..batch.len() {
            let pool = |frames: Tensor| -> Vec<f64> {
                let mut g = Graph::new();
                let mut pn = ParamNodes::new();
                let node = g.input("frames", frames);
                let pooled = attention_pool(&mut g, &mut pn, &store, "spk1", node).unwrap();
                g.value(pooled.vector).data().to_vec()
            };
            // length masking strips the padded rows before pooling, so the
            // padded and unpadded paths agree exactly
            let masked = pool(batch.utterance_features(i));
            let unpadded = pool(utts[i].features.clone());
            for (a, b) in masked.iter().zip(&unpadded) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn shuffle_is_deterministic_per_seed() {
        let cfg = quick_cfg();
        let corpus = generate_corpus(&cfg).unwrap();
        let ids = |seed: u64| -> Vec<String> {
            batch_iterator(&corpus, 4, seed)
                .flat_map(|b| b.ids.clone())
                .collect()
        };
        assert_eq!(ids(5), ids(5));
        assert_ne!(ids(5), ids(6));
    }

    #[test]
    fn corpus_round_trips_through_files() {
        let cfg = quick_cfg();
        let corpus = generate_corpus(&cfg).unwrap();
        let meta = CorpusMeta {
            schema_version: 1,
            num_speakers: cfg.num_speakers,
            content_vocab: cfg.content_vocab,
            input_dim: cfg.input_dim,
            utterances: corpus.len(),
        };
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("toy");
        save_corpus(&corpus, &meta, &prefix).unwrap();
        let (loaded, lmeta) = load_corpus(&prefix).unwrap();
        assert_eq!(lmeta.utterances, corpus.len());
        assert_eq!(loaded.len(), corpus.len());
        for (a, b) in corpus.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.speaker, b.speaker);
            assert_eq!(a.content.symbols(), b.content.symbols());
            for (x, y) in a.features.data().iter().zip(b.features.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
