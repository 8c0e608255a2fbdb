//! Metric evaluation of generated motion against the ground-truth corpus, and
//! the consolidated run report.
//!
//! Generated dialogues rarely match the ground-truth length (the stop head
//! decides when to end), so each pair is truncated to its common frame count
//! before pooling; zero-overlap dialogues are skipped deterministically.

use std::fs;
use std::time::Instant;

use dyad_core::metrics::{metric_report, MetricReport};
use dyad_core::rng::split_seed_labeled;
use dyad_core::Tensor;

use crate::error::{HarnessError, Result};
use crate::infer::{load_motion_tracks, InferSummary};
use crate::paths::atomic_write;
use crate::stages::RunContext;

pub struct EvalOutcome {
    pub report: MetricReport,
    pub used: usize,
    pub skipped: usize,
}

pub fn cmd_eval(ctx: &RunContext) -> Result<EvalOutcome> {
    let t0 = Instant::now();
    let samples = ctx.load_corpus_checked()?;
    let summary_path = ctx.paths.infer_summary();
    if !summary_path.exists() {
        return Err(HarnessError::prereq(format!(
            "no inference outputs at {}; run `dyad infer` first",
            ctx.paths.infer_dir().display()
        )));
    }
    let summary: InferSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)
        .map_err(|e| HarnessError::config(format!("bad infer summary: {e}")))?;

    let mut gen_pairs: Vec<[Tensor; 2]> = Vec::new();
    let mut gt_pairs: Vec<[Tensor; 2]> = Vec::new();
    let mut skipped = 0usize;
    for row in &summary.dialogues {
        let sample = samples.get(row.index).ok_or_else(|| {
            HarnessError::config(format!(
                "infer summary references dialogue {} but the corpus has {}",
                row.index,
                samples.len()
            ))
        })?;
        let tracks = load_motion_tracks(&ctx.paths.dialogue_dir(row.index).join("motion.json"))?;
        let common = tracks
            .s1
            .rows()
            .min(sample.motion[0].rows());
        if common == 0 {
            skipped += 1;
            continue;
        }
        gen_pairs.push([
            tracks.s1.slice_rows(0, common)?,
            tracks.s2.slice_rows(0, common)?,
        ]);
        gt_pairs.push([
            sample.motion[0].slice_rows(0, common)?,
            sample.motion[1].slice_rows(0, common)?,
        ]);
    }
    if gen_pairs.is_empty() {
        return Err(HarnessError::Numerical(
            "every generated dialogue was empty; nothing to evaluate".into(),
        ));
    }

    let report = metric_report(&gen_pairs, &gt_pairs, split_seed_labeled(ctx.cfg.seed, "eval"))?;
    atomic_write(&ctx.paths.eval_csv(), report.to_csv().as_bytes())?;
    let mut md = report.to_markdown();
    md.push_str(&format!(
        "\nevaluated {} of {} dialogues ({} empty)\n",
        gen_pairs.len(),
        summary.dialogues.len(),
        skipped
    ));
    atomic_write(&ctx.paths.eval_md(), md.as_bytes())?;

    ctx.update_manifest(|m| {
        m.artifacts.insert("eval_csv".into(), "reports/eval.csv".into());
        m.artifacts.insert("eval_md".into(), "reports/eval.md".into());
        m.timings_ms.insert("eval".into(), t0.elapsed().as_millis());
    })?;
    print!("{}", report.to_csv());
    Ok(EvalOutcome {
        report,
        used: gen_pairs.len(),
        skipped,
    })
}

/// One page tying the run together: stage results plus whichever tables
/// exist. No timings here — those stay in the manifest — so two identical
/// runs render identical bytes.
pub fn cmd_report(ctx: &RunContext) -> Result<()> {
    let t0 = Instant::now();
    let manifest = crate::manifest::RunManifest::load_or_default(&ctx.paths.manifest())?;
    let mut out = String::from("# Run report\n\n");
    out.push_str(&format!("config `{}`\n\n", ctx.cfg.hash_hex()));

    out.push_str("## Training stages\n\n");
    if manifest.stages.is_empty() {
        out.push_str("none trained yet\n");
    } else {
        out.push_str("| stage | steps | final loss | checkpoint |\n|---|---|---|---|\n");
        for (name, rec) in &manifest.stages {
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                name,
                rec.steps,
                rec.final_loss
                    .map(|l| format!("{l:.6}"))
                    .unwrap_or_else(|| "n/a".into()),
                rec.checkpoint
            ));
        }
    }

    for (title, path) in [
        ("## Motion metrics\n\n", ctx.paths.eval_md()),
        ("## Mapper strategy comparison\n\n", ctx.paths.ablation_md()),
    ] {
        out.push('\n');
        out.push_str(title);
        match fs::read_to_string(&path) {
            Ok(table) => out.push_str(&table),
            Err(_) => out.push_str("not generated yet\n"),
        }
    }

    atomic_write(&ctx.paths.summary_md(), out.as_bytes())?;
    ctx.update_manifest(|m| {
        m.artifacts.insert("report".into(), "reports/summary.md".into());
        m.timings_ms.insert("report".into(), t0.elapsed().as_millis());
    })?;
    println!("report: {}", ctx.paths.summary_md().display());
    Ok(())
}
