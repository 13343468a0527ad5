//! Command-line driver for speaker-based multi-task training experiments.

mod config;
mod report;
mod svg;
mod verify;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use clap::{Parser, Subcommand};

use grlmtl_core::checkpoint;
use grlmtl_core::data;
use grlmtl_core::model::init_backbone;
use grlmtl_core::objectives::ObjectiveKind;
use grlmtl_core::probe;
use grlmtl_core::trainer;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "grlmtl",
    about = "Speaker enhancing and adversarial multi-task training with \
             gradient reversal, plus layer-wise speaker probing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speaker-entangled corpus file pair.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output prefix; writes <prefix>.tensors and <prefix>.index.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing corpus files.
        #[arg(long)]
        force: bool,
        /// Override the corpus seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model under one of the objectives (or the two-stage pipeline).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Objective override: baseline-ctc, spk-enh, spk-adv-standard,
        /// spk-adv-adaptive, spk-enh-adv-joint, or spk-enh-seq-adv.
        #[arg(long)]
        objective: Option<String>,
        /// Corpus prefix written by gen-data.
        #[arg(long)]
        corpus: PathBuf,
        /// Seed checkpoint to continue-train from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the epoch count from the config file.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Probe every block of a frozen checkpoint for speaker information.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Report output path (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Override the probe seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Identifier stored in the report; defaults to the checkpoint stem.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Greedy-decode a corpus and report the label error rate.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the oracle suite: CTC enumeration equivalence, gradient checks,
    /// reversal identities, checkpoint round-trip, parallel determinism.
    Verify,
    /// Compare runs: text table plus probe-curve SVG.
    Report {
        /// Run directories produced by `train` (with optional probe.json).
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<grlmtl_core::Error>()
                .map(|e| if e.is_numerical() { 2 } else { 1 })
                .unwrap_or(1);
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            force,
            seed,
        } => cmd_gen_data(&config, &out, force, seed),
        Command::Train {
            config,
            objective,
            corpus,
            init,
            out,
            seed,
            epochs,
        } => cmd_train(&config, objective, &corpus, init.as_deref(), &out, seed, epochs),
        Command::Probe {
            ckpt,
            corpus,
            config,
            out,
            seed,
            model_id,
        } => cmd_probe(&ckpt, &corpus, &config, &out, seed, model_id),
        Command::Decode {
            ckpt,
            corpus,
            config,
        } => cmd_decode(&ckpt, &corpus, &config),
        Command::Verify => verify::run(),
        Command::Report { runs, out } => report::run(&runs, &out),
    }
}

fn cmd_gen_data(config: &Path, out: &Path, force: bool, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.corpus.seed = s;
    }
    let tensors = data::tensors_path(out);
    let index = data::index_path(out);
    if !force && (tensors.exists() || index.exists()) {
        bail!(
            "output {} exists; pass --force to overwrite",
            tensors.display()
        );
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(
        with_suffix(out, ".config.resolved.ini"),
        cfg.render(),
    )?;
    let corpus = data::generate_corpus(&cfg.corpus)?;
    let meta = data::CorpusMeta {
        schema_version: 1,
        num_speakers: cfg.corpus.num_speakers,
        content_vocab: cfg.corpus.content_vocab,
        input_dim: cfg.corpus.input_dim,
        utterances: corpus.len(),
    };
    data::save_corpus(&corpus, &meta, out)?;
    let total_frames: usize = corpus.iter().map(|u| u.features.rows()).sum();
    println!(
        "wrote {}: {} speakers, vocab {}, {} utterances, {} frames",
        out.display(),
        cfg.corpus.num_speakers,
        cfg.corpus.content_vocab,
        corpus.len(),
        total_frames
    );
    Ok(())
}

fn load_corpus_checked(
    prefix: &Path,
    cfg: &ExperimentConfig,
) -> Result<(Vec<data::Utterance>, Vec<data::Utterance>)> {
    let (corpus, meta) = data::load_corpus(prefix)?;
    if meta.num_speakers != cfg.corpus.num_speakers
        || meta.content_vocab != cfg.corpus.content_vocab
        || meta.input_dim != cfg.corpus.input_dim
    {
        bail!(
            "corpus {} disagrees with config: {} speakers / vocab {} / dim {} on disk, \
             {} / {} / {} in config",
            prefix.display(),
            meta.num_speakers,
            meta.content_vocab,
            meta.input_dim,
            cfg.corpus.num_speakers,
            cfg.corpus.content_vocab,
            cfg.corpus.input_dim
        );
    }
    let (train, eval) = data::split(&corpus, cfg.train.eval_fraction, cfg.train.split_seed)?;
    Ok((train, eval))
}

fn cmd_train(
    config: &Path,
    objective: Option<String>,
    corpus: &Path,
    init: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(obj) = objective {
        cfg.train.objective = obj;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved.ini"), cfg.render())?;

    let (train_data, eval_data) = load_corpus_checked(corpus, &cfg)?;
    let backbone = cfg.backbone_config();
    let classifier = cfg.classifier_config();

    if cfg.train.objective == "spk-enh-seq-adv" {
        let l1 = cfg
            .train
            .l1
            .ok_or_else(|| anyhow!("spk-enh-seq-adv requires l1"))?;
        let l2 = cfg
            .train
            .l2
            .ok_or_else(|| anyhow!("spk-enh-seq-adv requires l2"))?;
        let seed_store = match init {
            Some(path) => checkpoint::load_checkpoint(path)?,
            None => init_backbone(&backbone, cfg.train.seed)?,
        };
        let stage1 = cfg.train_config(ObjectiveKind::SpkEnh);
        let mut stage2 = cfg.train_config(ObjectiveKind::SpkAdvAdaptive);
        if cfg.train.stage2_epochs > 0 {
            stage2.epochs = cfg.train.stage2_epochs;
        }
        let (outcome, stage1_log) = trainer::sequential_enh_then_adv(
            &seed_store,
            l1,
            l2,
            &stage1,
            &stage2,
            &backbone,
            &classifier,
            &train_data,
            &eval_data,
            Some(out),
        )?;
        let final_ler = outcome
            .log
            .evals
            .last()
            .map(|e| e.label_error_rate)
            .unwrap_or(f64::NAN);
        println!(
            "sequential pipeline done: stage1 {} steps, stage2 {} steps, final eval LER {:.4}",
            stage1_log.steps.len(),
            outcome.log.steps.len(),
            final_ler
        );
        return Ok(());
    }

    let kind = cfg
        .objective_kind()?
        .expect("non-pipeline objective parses to a kind");
    let train_cfg = cfg.train_config(kind);
    let outcome = match init {
        Some(path) => {
            let seed_store = checkpoint::load_checkpoint(path)?;
            trainer::continue_train(
                &seed_store,
                &train_cfg,
                &backbone,
                &classifier,
                &train_data,
                &eval_data,
                Some(out),
            )?
        }
        None => {
            let fresh = init_backbone(&backbone, train_cfg.seed)?;
            trainer::train(
                &train_cfg,
                &backbone,
                &classifier,
                &train_data,
                &eval_data,
                fresh,
                Some(out),
            )?
        }
    };
    let final_ler = outcome
        .log
        .evals
        .last()
        .map(|e| e.label_error_rate)
        .unwrap_or(f64::NAN);
    println!(
        "{}: {} steps, final eval LER {:.4}",
        kind.as_str(),
        outcome.log.steps.len(),
        final_ler
    );
    Ok(())
}

fn cmd_probe(
    ckpt: &Path,
    corpus: &Path,
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    model_id: Option<String>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.probe.seed = s;
    }
    let store = checkpoint::load_checkpoint(ckpt)?;
    let backbone = cfg.backbone_config();
    trainer::check_backbone_compatible(&store, &backbone)?;
    let (train_data, eval_data) = load_corpus_checked(corpus, &cfg)?;
    // strided subsampling keeps every speaker represented
    let probe_train: Vec<data::Utterance> =
        if cfg.probe.train_subset > 0 && cfg.probe.train_subset < train_data.len() {
            let stride = train_data.len().div_ceil(cfg.probe.train_subset);
            train_data.iter().step_by(stride).cloned().collect()
        } else {
            train_data.clone()
        };
    let model_id = model_id.unwrap_or_else(|| {
        ckpt.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let report = probe::probe_all_blocks(
        &store,
        &backbone,
        cfg.corpus.num_speakers,
        &probe_train,
        &eval_data,
        &cfg.probe_config(),
        &model_id,
        cfg.train.split_seed,
    )?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    report.save_json(out)?;
    std::fs::write(with_suffix(out, ".config.resolved.ini"), cfg.render())?;
    print!("{}", render_probe_table(&report));
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    std::path::PathBuf::from(s)
}

fn render_probe_table(report: &probe::ProbeReport) -> String {
    let mut out = format!(
        "probe report for {} ({} eval utterances)\nblock  train_acc  eval_acc\n",
        report.model_id, report.eval_count
    );
    for b in &report.blocks {
        out.push_str(&format!(
            "{:>5}  {:>9.4}  {:>8.4}\n",
            b.block, b.train_accuracy, b.eval_accuracy
        ));
    }
    out
}

fn cmd_decode(ckpt: &Path, corpus: &Path, config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let store = checkpoint::load_checkpoint(ckpt)?;
    let backbone = cfg.backbone_config();
    trainer::check_backbone_compatible(&store, &backbone)?;
    let (corpus_data, _) = data::load_corpus(corpus)?;
    let spec = grlmtl_core::objectives::ObjectiveSpec::new(ObjectiveKind::BaselineCtc);
    let metrics = trainer::evaluate(
        &store,
        &backbone,
        &cfg.classifier_config(),
        &spec,
        &corpus_data,
    )?;
    println!(
        "decoded {} utterances: label error rate {:.4}",
        corpus_data.len(),
        metrics.label_error_rate
    );
    Ok(())
}
