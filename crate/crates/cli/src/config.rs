//! Plain-text experiment configuration: `[section]` headers and `key = value`
//! pairs, `#` comments. Unknown sections or keys are rejected so typos fail
//! loudly, and every run writes the fully-resolved configuration next to its
//! outputs.

use anyhow::{anyhow, bail, Context, Result};

use grlmtl_core::data::CorpusConfig;
use grlmtl_core::model::{BackboneConfig, SpeakerClassifierConfig};
use grlmtl_core::objectives::{ObjectiveKind, ObjectiveSpec};
use grlmtl_core::probe::ProbeConfig;
use grlmtl_core::trainer::{Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub attn_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_blocks: 8,
            model_dim: 64,
            ff_dim: 128,
            attn_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub objective: String,
    pub l1: Option<usize>,
    pub l2: Option<usize>,
    pub beta_focal: f64,
    pub beta_adapt: f64,
    pub lambda2: f64,
    pub per_utterance_focal: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub constant_fraction: f64,
    pub optimizer: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub eval_fraction: f64,
    pub split_seed: u64,
    /// Epochs for the second stage of the sequential pipeline; 0 means
    /// the same budget as the first stage.
    pub stage2_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            objective: "baseline-ctc".into(),
            l1: None,
            l2: None,
            beta_focal: 1.0,
            beta_adapt: 1.0,
            lambda2: 1.0,
            per_utterance_focal: false,
            epochs: 15,
            batch_size: 16,
            peak_lr: 2e-3,
            constant_fraction: 0.2,
            optimizer: "adam".into(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: Some(5.0),
            seed: 1,
            eval_fraction: 0.05,
            split_seed: 1,
            stage2_epochs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub pre_layer_norm: bool,
    /// Cap on probe training utterances (0 = use the whole training split).
    pub train_subset: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            epochs: 10,
            batch_size: 32,
            lr: 5e-3,
            seed: 1,
            pre_layer_norm: false,
            train_subset: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub probe: ProbeSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "corpus" | "model" | "train" | "probe") {
                    bail!("line {}: unknown section [{section}]", lineno + 1);
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value)
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| anyhow!("key `{key}`: cannot parse `{value}`: {e}"))
        }
        match (section, key) {
            ("corpus", "num_speakers") => self.corpus.num_speakers = p(key, value)?,
            ("corpus", "utts_per_speaker") => self.corpus.utts_per_speaker = p(key, value)?,
            ("corpus", "content_vocab") => self.corpus.content_vocab = p(key, value)?,
            ("corpus", "seq_len_min") => self.corpus.seq_len_range.0 = p(key, value)?,
            ("corpus", "seq_len_max") => self.corpus.seq_len_range.1 = p(key, value)?,
            ("corpus", "frames_per_symbol_min") => {
                self.corpus.frames_per_symbol_range.0 = p(key, value)?
            }
            ("corpus", "frames_per_symbol_max") => {
                self.corpus.frames_per_symbol_range.1 = p(key, value)?
            }
            ("corpus", "input_dim") => self.corpus.input_dim = p(key, value)?,
            ("corpus", "speaker_offset_scale") => {
                self.corpus.speaker_offset_scale = p(key, value)?
            }
            ("corpus", "speaker_tilt_scale") => self.corpus.speaker_tilt_scale = p(key, value)?,
            ("corpus", "noise_scale") => self.corpus.noise_scale = p(key, value)?,
            ("corpus", "seed") => self.corpus.seed = p(key, value)?,
            ("model", "num_blocks") => self.model.num_blocks = p(key, value)?,
            ("model", "model_dim") => self.model.model_dim = p(key, value)?,
            ("model", "ff_dim") => self.model.ff_dim = p(key, value)?,
            ("model", "attn_hidden") => self.model.attn_hidden = p(key, value)?,
            ("train", "objective") => self.train.objective = value.to_string(),
            ("train", "l1") => self.train.l1 = Some(p(key, value)?),
            ("train", "l2") => self.train.l2 = Some(p(key, value)?),
            ("train", "beta_focal") => self.train.beta_focal = p(key, value)?,
            ("train", "beta_adapt") => self.train.beta_adapt = p(key, value)?,
            ("train", "lambda2") => self.train.lambda2 = p(key, value)?,
            ("train", "per_utterance_focal") => self.train.per_utterance_focal = p(key, value)?,
            ("train", "epochs") => self.train.epochs = p(key, value)?,
            ("train", "batch_size") => self.train.batch_size = p(key, value)?,
            ("train", "peak_lr") => self.train.peak_lr = p(key, value)?,
            ("train", "constant_fraction") => self.train.constant_fraction = p(key, value)?,
            ("train", "optimizer") => self.train.optimizer = value.to_string(),
            ("train", "adam_beta1") => self.train.adam_beta1 = p(key, value)?,
            ("train", "adam_beta2") => self.train.adam_beta2 = p(key, value)?,
            ("train", "adam_eps") => self.train.adam_eps = p(key, value)?,
            ("train", "grad_clip_norm") => {
                self.train.grad_clip_norm = if value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(p(key, value)?)
                }
            }
            ("train", "seed") => self.train.seed = p(key, value)?,
            ("train", "eval_fraction") => self.train.eval_fraction = p(key, value)?,
            ("train", "split_seed") => self.train.split_seed = p(key, value)?,
            ("train", "stage2_epochs") => self.train.stage2_epochs = p(key, value)?,
            ("probe", "epochs") => self.probe.epochs = p(key, value)?,
            ("probe", "batch_size") => self.probe.batch_size = p(key, value)?,
            ("probe", "lr") => self.probe.lr = p(key, value)?,
            ("probe", "seed") => self.probe.seed = p(key, value)?,
            ("probe", "pre_layer_norm") => self.probe.pre_layer_norm = p(key, value)?,
            ("probe", "train_subset") => self.probe.train_subset = p(key, value)?,
            ("", k) => bail!("key `{k}` appears before any [section] header"),
            (s, k) => bail!("unknown key `{k}` in section [{s}]"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.backbone_config().validate()?;
        if !matches!(self.train.optimizer.as_str(), "adam" | "sgd") {
            bail!("optimizer must be `adam` or `sgd`");
        }
        let _ = self.objective_kind()?;
        Ok(())
    }

    pub fn objective_kind(&self) -> Result<Option<ObjectiveKind>> {
        if self.train.objective == "spk-enh-seq-adv" {
            return Ok(None); // the two-stage pipeline, handled by the trainer
        }
        Ok(Some(self.train.objective.parse::<ObjectiveKind>()?))
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            num_blocks: self.model.num_blocks,
            model_dim: self.model.model_dim,
            ff_dim: self.model.ff_dim,
            input_dim: self.corpus.input_dim,
            vocab: self.corpus.content_vocab,
        }
    }

    pub fn classifier_config(&self) -> SpeakerClassifierConfig {
        SpeakerClassifierConfig {
            attn_hidden: self.model.attn_hidden,
            num_speakers: self.corpus.num_speakers,
        }
    }

    pub fn objective_spec(&self, kind: ObjectiveKind) -> ObjectiveSpec {
        let mut spec = ObjectiveSpec::new(kind);
        spec.l1 = self.train.l1;
        spec.l2 = self.train.l2;
        spec.beta_focal = self.train.beta_focal;
        spec.beta_adapt = self.train.beta_adapt;
        spec.lambda2 = self.train.lambda2;
        spec.per_utterance_focal = self.train.per_utterance_focal;
        spec
    }

    pub fn train_config(&self, kind: ObjectiveKind) -> TrainConfig {
        TrainConfig {
            objective: self.objective_spec(kind),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            peak_lr: self.train.peak_lr,
            constant_fraction: self.train.constant_fraction,
            optimizer: match self.train.optimizer.as_str() {
                "sgd" => Optimizer::Sgd,
                _ => Optimizer::Adam {
                    beta1: self.train.adam_beta1,
                    beta2: self.train.adam_beta2,
                    eps: self.train.adam_eps,
                },
            },
            grad_clip_norm: self.train.grad_clip_norm,
            seed: self.train.seed,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe.epochs,
            batch_size: self.probe.batch_size,
            lr: self.probe.lr,
            attn_hidden: self.model.attn_hidden,
            seed: self.probe.seed,
            pre_layer_norm: self.probe.pre_layer_norm,
        }
    }

    /// Fully-resolved configuration in the same format `parse` accepts.
    pub fn render(&self) -> String {
        let c = &self.corpus;
        let m = &self.model;
        let t = &self.train;
        let p = &self.probe;
        let clip = match t.grad_clip_norm {
            Some(v) => format!("{v}"),
            None => "none".to_string(),
        };
        format!(
            "# resolved experiment configuration\n\
             [corpus]\n\
             num_speakers = {}\nutts_per_speaker = {}\ncontent_vocab = {}\n\
             seq_len_min = {}\nseq_len_max = {}\n\
             frames_per_symbol_min = {}\nframes_per_symbol_max = {}\n\
             input_dim = {}\nspeaker_offset_scale = {}\nspeaker_tilt_scale = {}\n\
             noise_scale = {}\nseed = {}\n\
             \n[model]\n\
             num_blocks = {}\nmodel_dim = {}\nff_dim = {}\nattn_hidden = {}\n\
             \n[train]\n\
             objective = {}\n{}{}beta_focal = {}\nbeta_adapt = {}\nlambda2 = {}\n\
             per_utterance_focal = {}\nepochs = {}\nbatch_size = {}\npeak_lr = {}\n\
             constant_fraction = {}\noptimizer = {}\nadam_beta1 = {}\nadam_beta2 = {}\n\
             adam_eps = {}\ngrad_clip_norm = {}\nseed = {}\neval_fraction = {}\n\
             split_seed = {}\nstage2_epochs = {}\n\
             \n[probe]\n\
             epochs = {}\nbatch_size = {}\nlr = {}\nseed = {}\npre_layer_norm = {}\n\
             train_subset = {}\n",
            c.num_speakers,
            c.utts_per_speaker,
            c.content_vocab,
            c.seq_len_range.0,
            c.seq_len_range.1,
            c.frames_per_symbol_range.0,
            c.frames_per_symbol_range.1,
            c.input_dim,
            c.speaker_offset_scale,
            c.speaker_tilt_scale,
            c.noise_scale,
            c.seed,
            m.num_blocks,
            m.model_dim,
            m.ff_dim,
            m.attn_hidden,
            t.objective,
            t.l1.map(|v| format!("l1 = {v}\n")).unwrap_or_default(),
            t.l2.map(|v| format!("l2 = {v}\n")).unwrap_or_default(),
            t.beta_focal,
            t.beta_adapt,
            t.lambda2,
            t.per_utterance_focal,
            t.epochs,
            t.batch_size,
            t.peak_lr,
            t.constant_fraction,
            t.optimizer,
            t.adam_beta1,
            t.adam_beta2,
            t.adam_eps,
            clip,
            t.seed,
            t.eval_fraction,
            t.split_seed,
            t.stage2_epochs,
            p.epochs,
            p.batch_size,
            p.lr,
            p.seed,
            p.pre_layer_norm,
            p.train_subset,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = ExperimentConfig::parse("[corpus]\nnum_speekers = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("num_speekers"));
        let err = ExperimentConfig::parse("[nonsense]\n").unwrap_err();
        assert!(format!("{err:#}").contains("nonsense"));
    }

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.corpus.num_speakers = 7;
        cfg.train.objective = "spk-enh".into();
        cfg.train.l1 = Some(3);
        cfg.train.grad_clip_norm = None;
        cfg.probe.pre_layer_norm = true;
        let text = cfg.render();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "\n# top comment\n[train]\nepochs = 3 # trailing\n\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
    }
}
