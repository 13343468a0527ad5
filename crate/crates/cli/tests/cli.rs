//! End-to-end checks of the command-line surface.

use std::path::Path;
use std::process::Command;

fn grlmtl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grlmtl"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.ini");
    std::fs::write(
        &path,
        "[corpus]\n\
         num_speakers = 4\n\
         utts_per_speaker = 10\n\
         content_vocab = 4\n\
         seq_len_min = 8\nseq_len_max = 12\n\
         frames_per_symbol_min = 3\nframes_per_symbol_max = 4\n\
         input_dim = 6\n\
         seed = 3\n\
         [model]\n\
         num_blocks = 3\nmodel_dim = 10\nff_dim = 14\nattn_hidden = 6\n\
         [train]\n\
         epochs = 2\nbatch_size = 8\npeak_lr = 2e-3\nseed = 3\nsplit_seed = 3\n\
         eval_fraction = 0.2\nl1 = 1\nl2 = 2\n\
         [probe]\n\
         epochs = 3\ntrain_subset = 20\n",
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let corpus = dir.path().join("corpus");

    let out = grlmtl()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&corpus)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("40 utterances"));

    // refusing to overwrite without --force
    let again = grlmtl()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&corpus)
        .output()
        .unwrap();
    assert_eq!(again.status.code(), Some(1));

    // identical corpus bytes under --force with the same seed
    let first = std::fs::read(dir.path().join("corpus.tensors")).unwrap();
    let forced = grlmtl()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&corpus)
        .arg("--force")
        .output()
        .unwrap();
    assert!(forced.status.success());
    assert_eq!(first, std::fs::read(dir.path().join("corpus.tensors")).unwrap());

    // train the baseline, then continue with the adaptive objective
    let run1 = dir.path().join("run1");
    let out = grlmtl()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--objective", "baseline-ctc", "--corpus"])
        .arg(&corpus)
        .arg("--out")
        .arg(&run1)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run1.join("final.ckpt").exists());
    assert!(run1.join("train_log.jsonl").exists());
    assert!(run1.join("config.resolved.ini").exists());
    // baseline logs contain no speaker components
    let log = std::fs::read_to_string(run1.join("train_log.jsonl")).unwrap();
    assert!(log.contains("\"record\":\"step\""));
    assert!(!log.contains("\"lambda_adapt\":0."));

    let run2 = dir.path().join("run2");
    let out = grlmtl()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--objective", "spk-adv-adaptive", "--corpus"])
        .arg(&corpus)
        .args(["--init"])
        .arg(run1.join("final.ckpt"))
        .arg("--out")
        .arg(&run2)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log2 = std::fs::read_to_string(run2.join("train_log.jsonl")).unwrap();
    assert!(log2.contains("lambda_adapt"), "adaptive runs log the reversal scale");

    // probe the adaptive model; rerunning produces identical JSON
    let report = run2.join("probe.json");
    for _ in 0..2 {
        let out = grlmtl()
            .args(["probe", "--ckpt"])
            .arg(run2.join("final.ckpt"))
            .arg("--corpus")
            .arg(&corpus)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&report)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let json = std::fs::read_to_string(&report).unwrap();
    assert!(json.contains("\"blocks\""));

    // decode prints a label error rate
    let out = grlmtl()
        .args(["decode", "--ckpt"])
        .arg(run1.join("final.ckpt"))
        .arg("--corpus")
        .arg(&corpus)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("label error rate"));

    // report over both runs: table + svg, byte-identical across reruns
    let rep_dir = dir.path().join("report");
    let mut table_bytes = Vec::new();
    for _ in 0..2 {
        let out = grlmtl()
            .args(["report", "--runs"])
            .arg(&run1)
            .arg(&run2)
            .arg("--out")
            .arg(&rep_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let bytes = std::fs::read(rep_dir.join("table.txt")).unwrap();
        if table_bytes.is_empty() {
            table_bytes = bytes;
        } else {
            assert_eq!(table_bytes, bytes);
        }
    }
    assert!(rep_dir.join("probes.svg").exists());
    let table = String::from_utf8(table_bytes).unwrap();
    assert!(table.contains("baseline-ctc"));
    assert!(table.contains("sid_b1"));
}

#[test]
fn sequential_objective_creates_stage_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let corpus = dir.path().join("corpus");
    assert!(grlmtl()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&corpus)
        .status()
        .unwrap()
        .success());
    let run = dir.path().join("seq");
    let out = grlmtl()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--objective", "spk-enh-seq-adv", "--corpus"])
        .arg(&corpus)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("stage1/train_log.jsonl").exists());
    assert!(run.join("stage2/train_log.jsonl").exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[corpus]\nnum_speekers = 4\n").unwrap();
    let out = grlmtl()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_speekers"));
}

#[test]
fn missing_report_run_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = grlmtl()
        .args(["report", "--runs"])
        .arg(dir.path().join("nope"))
        .arg("--out")
        .arg(dir.path().join("rep"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_passes_on_fresh_checkout() {
    let out = grlmtl().arg("verify").output().unwrap();
    assert!(
        out.status.success(),
        "verify failed:\n{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.matches(" ok ").count() >= 8);
}

#[test]
fn probe_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let corpus = dir.path().join("corpus");
    assert!(grlmtl()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&corpus)
        .status()
        .unwrap()
        .success());
    // a checkpoint built for a different width
    let other = dir.path().join("other.ini");
    std::fs::write(
        &other,
        std::fs::read_to_string(&cfg)
            .unwrap()
            .replace("model_dim = 10", "model_dim = 12"),
    )
    .unwrap();
    let run = dir.path().join("run");
    assert!(grlmtl()
        .args(["train", "--config"])
        .arg(&other)
        .args(["--objective", "baseline-ctc", "--corpus"])
        .arg(&corpus)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap()
        .success());
    let out = grlmtl()
        .args(["probe", "--ckpt"])
        .arg(run.join("final.ckpt"))
        .arg("--corpus")
        .arg(&corpus)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("probe.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
