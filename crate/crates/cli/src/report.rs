//! Cross-run comparison: an aligned text table and a probe-curve chart.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use grlmtl_core::probe::ProbeReport;
use grlmtl_core::trainer::TrainLog;

use crate::svg::{line_chart, Series};

struct RunSummary {
    name: String,
    objective: String,
    final_ler: Option<f64>,
    best_ler: Option<f64>,
    probe: Option<ProbeReport>,
}

fn load_run(dir: &Path) -> Result<RunSummary> {
    if !dir.is_dir() {
        bail!("run directory {} does not exist", dir.display());
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    // the sequential pipeline nests its stages; report the final stage
    let log_path = ["train_log.jsonl", "stage2/train_log.jsonl"]
        .iter()
        .map(|p| dir.join(p))
        .find(|p| p.exists());
    let (objective, final_ler, best_ler) = match log_path {
        Some(p) => {
            let log = TrainLog::load_jsonl(&p)
                .with_context(|| format!("loading {}", p.display()))?;
            let final_ler = log.evals.last().map(|e| e.label_error_rate);
            let best = log
                .evals
                .iter()
                .map(|e| e.label_error_rate)
                .fold(f64::INFINITY, f64::min);
            let objective = if p.to_string_lossy().contains("stage2") {
                "spk-enh-seq-adv".to_string()
            } else {
                log.meta.objective.kind.as_str().to_string()
            };
            (
                objective,
                final_ler,
                final_ler.map(|_| best),
            )
        }
        None => ("?".to_string(), None, None),
    };
    let probe_path = dir.join("probe.json");
    let probe = if probe_path.exists() {
        Some(ProbeReport::load_json(&probe_path)?)
    } else {
        None
    };
    Ok(RunSummary {
        name,
        objective,
        final_ler,
        best_ler,
        probe,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    }
}

fn render_table(runs: &[RunSummary]) -> String {
    let num_blocks = runs
        .iter()
        .filter_map(|r| r.probe.as_ref().map(|p| p.blocks.len()))
        .max()
        .unwrap_or(0);
    let mut header = format!(
        "{:<24} {:<18} {:>9} {:>9}",
        "run", "objective", "final_ler", "best_ler"
    );
    for b in 1..=num_blocks {
        header.push_str(&format!(" {:>7}", format!("sid_b{b}")));
    }
    let mut out = header;
    out.push('\n');
    out.push_str(&"-".repeat(out.len() - 1));
    out.push('\n');
    for r in runs {
        let mut line = format!(
            "{:<24} {:<18} {:>9} {:>9}",
            r.name,
            r.objective,
            fmt_opt(r.final_ler),
            fmt_opt(r.best_ler)
        );
        for b in 1..=num_blocks {
            let acc = r.probe.as_ref().and_then(|p| p.accuracy_at(b));
            line.push_str(&format!(
                " {:>7}",
                acc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into())
            ));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn run(run_dirs: &[PathBuf], out_dir: &Path) -> Result<()> {
    let runs: Vec<RunSummary> = run_dirs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out_dir)?;
    let table = render_table(&runs);
    std::fs::write(out_dir.join("table.txt"), &table)?;
    let series: Vec<Series> = runs
        .iter()
        .filter_map(|r| {
            r.probe.as_ref().map(|p| Series {
                label: r.name.clone(),
                points: p
                    .blocks
                    .iter()
                    .map(|b| (b.block as f64, b.eval_accuracy))
                    .collect(),
            })
        })
        .collect();
    if !series.is_empty() {
        let chart = line_chart(
            "speaker identification accuracy by block",
            "block",
            "eval accuracy",
            &series,
        );
        std::fs::write(out_dir.join("probes.svg"), chart)?;
    }
    print!("{table}");
    Ok(())
}
