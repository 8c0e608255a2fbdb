//! Training orchestration: corpus generation plus the five model stages.
//!
//! Step-budgeted stages train in segments of `checkpoint_every` steps. Each
//! segment is seeded from the stage seed by its starting step and starts a
//! fresh optimizer, so "train for N steps" means the same fixed sequence of
//! segment calls whether it runs in one invocation or across interruptions —
//! resuming from the last boundary checkpoint is byte-equivalent to never
//! having stopped.

use std::fs;
use std::time::Instant;

use dyad_core::data::{
    corpus_identities, load_corpus, save_corpus, synth_corpus, CorpusMeta, DialogueSample,
    TokenStreams,
};
use dyad_core::motion::{train_mapper, MotionMapper};
use dyad_core::nn::ParamStore;
use dyad_core::rng::{split_seed, split_seed_labeled};
use dyad_core::speaker::{train_speaker, SpeakerMapper};
use dyad_core::speech::{tokenize_text, train_acoustic, train_t2s, AcousticModel, T2SModel};
use dyad_core::visual::{train_visual, VisualDenoiser};

use crate::checkpoints::{
    find_resumable, fingerprint_for, merge_stores, save_stage_checkpoint, split_store,
};
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::manifest::{RunManifest, StageRecord};
use crate::paths::{atomic_write, RunPaths};

pub const TRAIN_STAGES: [&str; 5] = ["t2s", "acoustic", "visual", "mapper-motion", "mapper-speaker"];

/// Everything a command needs: the resolved config and the run's file layout.
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub paths: RunPaths,
}

impl RunContext {
    pub fn new(cfg: ExperimentConfig, out_root: &std::path::Path) -> RunContext {
        let paths = RunPaths::new(out_root, &cfg.run_name);
        RunContext { cfg, paths }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        split_seed_labeled(self.cfg.seed, stage)
    }

    /// Load the corpus, insisting it matches the current corpus config so a
    /// stale file cannot silently train the wrong experiment.
    pub fn load_corpus_checked(&self) -> Result<Vec<DialogueSample>> {
        let path = self.paths.corpus();
        if !path.exists() {
            return Err(HarnessError::prereq(format!(
                "no corpus at {}; run `dyad gen-data` first",
                path.display()
            )));
        }
        let meta = CorpusMeta::load(&path)?;
        let want = self.cfg.corpus.to_core(self.cfg.seed);
        if meta.config != want {
            return Err(HarnessError::config(format!(
                "corpus at {} was generated from a different corpus config; \
                 rerun `dyad gen-data` or restore the old config",
                path.display()
            )));
        }
        Ok(load_corpus(&path)?)
    }

    pub fn update_manifest(&self, f: impl FnOnce(&mut RunManifest)) -> Result<()> {
        let mut m = RunManifest::load_or_default(&self.paths.manifest())?;
        f(&mut m);
        m.save(&self.paths.manifest(), &self.cfg.hash_hex(), self.cfg.seed)
    }
}

pub fn cmd_gen_data(ctx: &RunContext) -> Result<()> {
    let t0 = Instant::now();
    let core_cfg = ctx.cfg.corpus.to_core(ctx.cfg.seed);
    let samples = synth_corpus(&core_cfg)?;
    fs::create_dir_all(&ctx.paths.dir)?;
    save_corpus(&samples, &ctx.paths.corpus())?;
    CorpusMeta::new(core_cfg.clone(), samples.len()).save(&ctx.paths.corpus())?;
    ctx.update_manifest(|m| {
        m.artifacts.insert("corpus".into(), "corpus.jsonl".into());
        m.timings_ms.insert("gen-data".into(), t0.elapsed().as_millis());
    })?;
    println!(
        "gen-data: {} dialogues ({} identities, seed {}) -> {}",
        samples.len(),
        ctx.cfg.corpus.n_identities,
        core_cfg.seed,
        ctx.paths.corpus().display()
    );
    Ok(())
}

pub fn cmd_train(ctx: &RunContext, stage: &str) -> Result<StageRecord> {
    let record = match stage {
        "t2s" => train_t2s_stage(ctx)?,
        "acoustic" => train_acoustic_stage(ctx)?,
        "visual" => train_visual_stage(ctx)?,
        "mapper-motion" => train_mapper_motion_stage(ctx)?,
        "mapper-speaker" => train_mapper_speaker_stage(ctx)?,
        other => {
            return Err(HarnessError::config(format!(
                "unknown training stage {other:?} (expected one of {})",
                TRAIN_STAGES.join(", ")
            )))
        }
    };
    ctx.update_manifest(|m| {
        m.stages.insert(stage.to_string(), record.clone());
        m.timings_ms.insert(format!("train-{stage}"), record.wall_ms);
    })?;
    println!(
        "train {stage}: {} steps, final loss {}, checkpoint {}",
        record.steps,
        record
            .final_loss
            .map(|l| format!("{l:.6}"))
            .unwrap_or_else(|| "n/a".into()),
        record.checkpoint
    );
    Ok(record)
}

/// Per-step losses from one segment plus the stage's headline loss.
struct SegmentReport {
    losses: Vec<f64>,
    final_loss: f64,
}

fn read_last_loss(path: &std::path::Path) -> Option<f64> {
    let text = fs::read_to_string(path).ok()?;
    let last = text.lines().last()?;
    last.split(',').nth(1)?.parse().ok()
}

/// The segmented training driver shared by the step-budgeted stages.
#[allow(clippy::too_many_arguments)]
fn run_segments<S>(
    ctx: &RunContext,
    stage: &str,
    target: u64,
    every: u64,
    fingerprint: [u8; 32],
    init: impl FnOnce() -> Result<S>,
    restore: impl FnOnce(ParamStore) -> Result<S>,
    mut segment: impl FnMut(&mut S, u64, usize) -> Result<SegmentReport>,
    export: impl Fn(&S) -> ParamStore,
) -> Result<StageRecord> {
    let t0 = Instant::now();
    let stage_seed = ctx.stage_seed(stage);
    let dir = ctx.paths.checkpoints_dir();
    let curve_path = ctx.paths.curve(stage);

    let found = find_resumable(&dir, stage, target, every, &fingerprint, stage_seed)?;
    if let Some(f) = &found {
        if f.step == target {
            return Ok(StageRecord {
                checkpoint: ctx.paths.rel(&f.path),
                steps: target,
                final_loss: read_last_loss(&curve_path),
                wall_ms: t0.elapsed().as_millis(),
            });
        }
    }

    let (mut state, reached) = match found {
        Some(f) => {
            let step = f.step;
            (restore(f.store)?, step)
        }
        None => (init()?, 0),
    };

    // keep curve rows from the part of the trajectory we are not redoing
    let mut rows: Vec<String> = Vec::new();
    if reached > 0 {
        if let Ok(text) = fs::read_to_string(&curve_path) {
            rows = text
                .lines()
                .skip(1)
                .filter(|l| {
                    l.split(',')
                        .next()
                        .and_then(|s| s.parse::<u64>().ok())
                        .is_some_and(|s| s < reached)
                })
                .map(str::to_string)
                .collect();
        }
    }

    let mut cur = reached;
    let mut final_loss = f64::NAN;
    while cur < target {
        let len = every.min(target - cur);
        let rep = segment(&mut state, split_seed(stage_seed, cur), len as usize)?;
        for (i, loss) in rep.losses.iter().enumerate() {
            rows.push(format!("{},{}", cur + i as u64, loss));
        }
        final_loss = rep.final_loss;
        cur += len;
        save_stage_checkpoint(
            &ctx.paths.checkpoint(stage, cur),
            stage_seed,
            fingerprint,
            cur,
            &export(&state),
        )?;
        let mut text = String::from("step,loss\n");
        for r in &rows {
            text.push_str(r);
            text.push('\n');
        }
        atomic_write(&curve_path, text.as_bytes())?;
    }

    Ok(StageRecord {
        checkpoint: ctx.paths.rel(&ctx.paths.checkpoint(stage, target)),
        steps: target,
        final_loss: Some(final_loss),
        wall_ms: t0.elapsed().as_millis(),
    })
}

fn train_t2s_stage(ctx: &RunContext) -> Result<StageRecord> {
    let samples = ctx.load_corpus_checked()?;
    let pairs: Vec<(Vec<u32>, TokenStreams)> = samples
        .iter()
        .map(|s| Ok((tokenize_text(&s.script)?, s.streams.clone())))
        .collect::<dyad_core::Result<_>>()?;
    let sec = ctx.cfg.t2s.clone();
    let init_seed = split_seed_labeled(ctx.stage_seed("t2s"), "init");
    run_segments(
        ctx,
        "t2s",
        sec.train_steps,
        sec.checkpoint_every,
        fingerprint_for(&ctx.cfg, "t2s"),
        || Ok(T2SModel::init(sec.model_cfg(), init_seed)),
        |store| {
            Ok(T2SModel {
                cfg: sec.model_cfg(),
                store,
            })
        },
        |model, seg_seed, len| {
            let rep = train_t2s(model, &pairs, &sec.train_opts(len), seg_seed)?;
            Ok(SegmentReport {
                losses: rep.loss_curve,
                final_loss: rep.final_ce,
            })
        },
        |model| model.store.clone(),
    )
}

fn train_acoustic_stage(ctx: &RunContext) -> Result<StageRecord> {
    let samples = ctx.load_corpus_checked()?;
    let sec = ctx.cfg.acoustic.clone();
    let init_seed = split_seed_labeled(ctx.stage_seed("acoustic"), "init");
    run_segments(
        ctx,
        "acoustic",
        sec.train_steps,
        sec.checkpoint_every,
        fingerprint_for(&ctx.cfg, "acoustic"),
        || Ok(AcousticModel::init(sec.model_cfg(), init_seed)),
        |store| {
            Ok(AcousticModel {
                cfg: sec.model_cfg(),
                store,
            })
        },
        |model, seg_seed, len| {
            let rep = train_acoustic(model, &samples, &sec.train_opts(len), seg_seed)?;
            let final_loss = *rep.loss_curve.last().expect("at least one step");
            Ok(SegmentReport {
                losses: rep.loss_curve,
                final_loss,
            })
        },
        |model| model.store.clone(),
    )
}

fn train_mapper_speaker_stage(ctx: &RunContext) -> Result<StageRecord> {
    // gallery derives from the corpus config; loading checks the prerequisite
    ctx.load_corpus_checked()?;
    let gallery = corpus_identities(&ctx.cfg.corpus.to_core(ctx.cfg.seed))?;
    let sec = ctx.cfg.speaker.clone();
    let init_seed = split_seed_labeled(ctx.stage_seed("mapper-speaker"), "init");
    run_segments(
        ctx,
        "mapper-speaker",
        sec.train_steps,
        sec.checkpoint_every,
        fingerprint_for(&ctx.cfg, "mapper-speaker"),
        || Ok(SpeakerMapper::init(sec.model_cfg(), init_seed)),
        |store| {
            Ok(SpeakerMapper {
                cfg: sec.model_cfg(),
                store,
            })
        },
        |mapper, seg_seed, len| {
            let rep = train_speaker(mapper, &gallery, &sec.train_opts(len), seg_seed)?;
            Ok(SegmentReport {
                losses: rep.loss_curve,
                final_loss: rep.final_mean_loss,
            })
        },
        |mapper| mapper.store.clone(),
    )
}

/// Epoch-scheduled rather than step-budgeted, so it runs as a single shot:
/// an existing checkpoint for the same trajectory is reused, anything else
/// retrains from scratch.
fn train_mapper_motion_stage(ctx: &RunContext) -> Result<StageRecord> {
    let t0 = Instant::now();
    let samples = ctx.load_corpus_checked()?;
    let corpus_cfg = ctx.cfg.corpus.to_core(ctx.cfg.seed);
    let codebook = corpus_cfg.codebook();
    let sec = &ctx.cfg.mapper;
    let fingerprint = fingerprint_for(&ctx.cfg, "mapper-motion");
    let stage_seed = ctx.stage_seed("mapper-motion");
    let total = (sec.epochs * sec.steps_per_epoch) as u64;
    let ckpt = ctx.paths.checkpoint("mapper-motion", total);

    if let Some(f) = find_resumable(
        &ctx.paths.checkpoints_dir(),
        "mapper-motion",
        total,
        total.max(1),
        &fingerprint,
        stage_seed,
    )? {
        if f.step == total {
            return Ok(StageRecord {
                checkpoint: ctx.paths.rel(&f.path),
                steps: total,
                final_loss: read_last_loss(&ctx.paths.curve("mapper-motion")),
                wall_ms: t0.elapsed().as_millis(),
            });
        }
    }

    let (mapper, report) = train_mapper(
        sec.model_cfg()?,
        &samples,
        &codebook,
        &sec.train_opts(false),
        stage_seed,
    )?;
    save_stage_checkpoint(&ckpt, stage_seed, fingerprint, total, &mapper.store)?;

    let mut text = String::from("epoch,val_mse\n");
    for (e, v) in report.val_mse.iter().enumerate() {
        text.push_str(&format!("{e},{v}\n"));
    }
    atomic_write(&ctx.paths.curve("mapper-motion"), text.as_bytes())?;

    Ok(StageRecord {
        checkpoint: ctx.paths.rel(&ckpt),
        steps: total,
        final_loss: report.val_mse.last().copied(),
        wall_ms: t0.elapsed().as_millis(),
    })
}

/// Load the trained motion mapper the visual stage builds on, or say exactly
/// which command is missing.
fn load_motion_mapper(ctx: &RunContext) -> Result<MotionMapper> {
    let sec = &ctx.cfg.mapper;
    let total = (sec.epochs * sec.steps_per_epoch) as u64;
    let found = find_resumable(
        &ctx.paths.checkpoints_dir(),
        "mapper-motion",
        total,
        total.max(1),
        &fingerprint_for(&ctx.cfg, "mapper-motion"),
        ctx.stage_seed("mapper-motion"),
    )?
    .ok_or_else(|| {
        HarnessError::prereq(
            "the visual stage needs a trained motion mapper; run `dyad train mapper-motion` first",
        )
    })?;
    Ok(MotionMapper {
        cfg: sec.model_cfg()?,
        store: found.store,
    })
}

fn train_visual_stage(ctx: &RunContext) -> Result<StageRecord> {
    let samples = ctx.load_corpus_checked()?;
    let corpus_cfg = ctx.cfg.corpus.to_core(ctx.cfg.seed);
    let codebook = corpus_cfg.codebook();
    let base_mapper = load_motion_mapper(ctx)?;
    let mapper_cfg = ctx.cfg.mapper.model_cfg()?;
    let sec = ctx.cfg.visual.clone();
    let init_seed = split_seed_labeled(ctx.stage_seed("visual"), "init");
    run_segments(
        ctx,
        "visual",
        sec.train_steps,
        sec.checkpoint_every,
        fingerprint_for(&ctx.cfg, "visual"),
        || {
            Ok((
                VisualDenoiser::init(sec.model_cfg(), init_seed),
                base_mapper,
            ))
        },
        |merged| {
            Ok((
                VisualDenoiser {
                    cfg: sec.model_cfg(),
                    store: split_store(&merged, "den"),
                },
                MotionMapper {
                    cfg: mapper_cfg,
                    store: split_store(&merged, "map"),
                },
            ))
        },
        |(denoiser, mapper), seg_seed, len| {
            let rep = train_visual(
                denoiser,
                mapper,
                &samples,
                &codebook,
                &sec.train_opts(len),
                seg_seed,
            )?;
            let final_loss = *rep.loss_curve.last().expect("at least one step");
            Ok(SegmentReport {
                losses: rep.loss_curve,
                final_loss,
            })
        },
        |(denoiser, mapper)| merge_stores(&[("den", &denoiser.store), ("map", &mapper.store)]),
    )
}
