//! End-to-end inference over corpus dialogues.
//!
//! Speech side: script → dual token streams → mel → waveform, voiced by
//! face-derived speaker embeddings (the mapper's inference path — the
//! ground-truth audio embeddings are never read here). Visual side: one latent
//! track per participant, chained window by window with the trailing frames of
//! each window conditioning the next.

use serde::{Deserialize, Serialize};
use std::fs;
use std::time::Instant;

use dyad_core::consts::{HOP_SAMPLES, TOKENS_PER_VIDEO_FRAME};
use dyad_core::data::{Codebook, DialogueSample};
use dyad_core::motion::MotionMapper;
use dyad_core::nn::ParamStore;
use dyad_core::rng::{rng_from_seed, split_seed, split_seed_labeled};
use dyad_core::speaker::{map_speaker, SpeakerMapper};
use dyad_core::speech::{end_to_end_speech, write_wav, AcousticModel, SpeechOutput, T2SModel};
use dyad_core::visual::{
    prev_context, sample_video, ConditioningSet, NoiseSchedule, VisualDenoiser,
};
use dyad_core::Tensor;

use crate::checkpoints::{find_resumable, fingerprint_for, split_store};
use crate::error::{HarnessError, Result};
use crate::paths::atomic_write;
use crate::stages::RunContext;

/// Generated motion for one dialogue, one track per participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionTracks {
    pub s1: Tensor,
    pub s2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamsFile {
    pub s1: Vec<u32>,
    pub s2: Vec<u32>,
    pub truncated: bool,
    /// Which embedding source voiced the dialogue; always "face" at inference.
    pub speaker_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRow {
    pub index: usize,
    pub sample_id: usize,
    pub tokens: usize,
    pub truncated: bool,
    pub mel_frames: usize,
    pub wav_samples: usize,
    pub video_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub n_dialogues: usize,
    pub dialogues: Vec<DialogueRow>,
}

/// Fetch a stage's fully trained parameters; anything less is a prerequisite
/// error naming the command to run.
fn load_trained(ctx: &RunContext, stage: &str, target: u64, every: u64) -> Result<ParamStore> {
    let found = find_resumable(
        &ctx.paths.checkpoints_dir(),
        stage,
        target,
        every,
        &fingerprint_for(&ctx.cfg, stage),
        ctx.stage_seed(stage),
    )?;
    match found {
        Some(f) if f.step == target => Ok(f.store),
        Some(f) => Err(HarnessError::prereq(format!(
            "{stage} is trained to step {} of {target}; run `dyad train {stage}` to finish",
            f.step
        ))),
        None => Err(HarnessError::prereq(format!(
            "no {stage} checkpoint for this config; run `dyad train {stage}` first"
        ))),
    }
}

struct Models {
    t2s: T2SModel,
    acoustic: AcousticModel,
    denoiser: VisualDenoiser,
    mapper: MotionMapper,
    speaker: SpeakerMapper,
}

fn load_models(ctx: &RunContext) -> Result<Models> {
    let cfg = &ctx.cfg;
    let t2s = T2SModel {
        cfg: cfg.t2s.model_cfg(),
        store: load_trained(ctx, "t2s", cfg.t2s.train_steps, cfg.t2s.checkpoint_every)?,
    };
    let acoustic = AcousticModel {
        cfg: cfg.acoustic.model_cfg(),
        store: load_trained(
            ctx,
            "acoustic",
            cfg.acoustic.train_steps,
            cfg.acoustic.checkpoint_every,
        )?,
    };
    let merged = load_trained(ctx, "visual", cfg.visual.train_steps, cfg.visual.checkpoint_every)?;
    let denoiser = VisualDenoiser {
        cfg: cfg.visual.model_cfg(),
        store: split_store(&merged, "den"),
    };
    // the motion mapper as tuned jointly with the denoiser, not the raw
    // supervised one from the mapper-motion stage
    let mapper = MotionMapper {
        cfg: cfg.mapper.model_cfg()?,
        store: split_store(&merged, "map"),
    };
    let speaker = SpeakerMapper {
        cfg: cfg.speaker.model_cfg(),
        store: load_trained(
            ctx,
            "mapper-speaker",
            cfg.speaker.train_steps,
            cfg.speaker.checkpoint_every,
        )?,
    };
    Ok(Models {
        t2s,
        acoustic,
        denoiser,
        mapper,
        speaker,
    })
}

/// Chain guidance windows into one track of `total` frames for one role.
fn generate_track(
    ctx: &RunContext,
    models: &Models,
    sample: &DialogueSample,
    role: usize,
    c_mot: &Tensor,
    total: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let d_z = models.denoiser.cfg.d_z;
    let k_prev = models.denoiser.cfg.k_prev;
    let window = ctx.cfg.visual.window_frames;
    let mut rng = rng_from_seed(seed);
    let mut track = Tensor::zeros(&[0, d_z]);
    let mut start = 0usize;
    while start < total {
        let w = window.min(total - start);
        let cond = ConditioningSet::for_identity(
            &sample.identities[role],
            c_mot.slice_rows(2 * start, 2 * w)?,
            prev_context(&track, start, k_prev),
        )?;
        let video = sample_video(
            &models.denoiser,
            &cond,
            w,
            sched,
            ctx.cfg.visual.cfg_scale,
            ctx.cfg.visual.sampler,
            &mut rng,
        )?;
        track = Tensor::concat_rows(&[&track, &video.z])?;
        start += w;
    }
    Ok(track)
}

fn check_contracts(speech: &SpeechOutput, tracks: &MotionTracks) -> Result<()> {
    let tokens = speech.streams.len();
    if speech.mel.rows() != tokens {
        return Err(HarnessError::Numerical(format!(
            "alignment broken: {} mel frames for {tokens} tokens",
            speech.mel.rows()
        )));
    }
    if speech.wav.len() != HOP_SAMPLES * speech.mel.rows() {
        return Err(HarnessError::Numerical(format!(
            "alignment broken: {} wav samples for {} mel frames",
            speech.wav.len(),
            speech.mel.rows()
        )));
    }
    let frames = tokens / TOKENS_PER_VIDEO_FRAME;
    for (name, t) in [("s1", &tracks.s1), ("s2", &tracks.s2)] {
        if t.rows() != frames {
            return Err(HarnessError::Numerical(format!(
                "alignment broken: {} {name} video frames for {tokens} tokens",
                t.rows()
            )));
        }
    }
    Ok(())
}

pub fn cmd_infer(ctx: &RunContext) -> Result<InferSummary> {
    let t0 = Instant::now();
    let samples = ctx.load_corpus_checked()?;
    let models = load_models(ctx)?;
    let codebook = ctx.cfg.corpus.to_core(ctx.cfg.seed).codebook();
    let sched = NoiseSchedule::linear(ctx.cfg.visual.t_steps);
    let infer_seed = ctx.stage_seed("infer");

    let n = ctx.cfg.infer.n_dialogues.min(samples.len());
    let mut rows = Vec::with_capacity(n);
    for (i, sample) in samples.iter().take(n).enumerate() {
        let d_seed = split_seed(infer_seed, i as u64);
        let row = infer_dialogue(ctx, &models, &codebook, &sched, sample, i, d_seed)?;
        rows.push(row);
    }

    let summary = InferSummary {
        n_dialogues: n,
        dialogues: rows,
    };
    let mut json = serde_json::to_string_pretty(&summary)
        .map_err(|e| HarnessError::config(format!("serialize infer summary: {e}")))?;
    json.push('\n');
    atomic_write(&ctx.paths.infer_summary(), json.as_bytes())?;

    ctx.update_manifest(|m| {
        m.artifacts.insert("infer_summary".into(), "infer/summary.json".into());
        m.timings_ms.insert("infer".into(), t0.elapsed().as_millis());
    })?;
    println!(
        "infer: {n} dialogues -> {} (alignment contracts verified)",
        ctx.paths.infer_dir().display()
    );
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn infer_dialogue(
    ctx: &RunContext,
    models: &Models,
    codebook: &Codebook,
    sched: &NoiseSchedule,
    sample: &DialogueSample,
    index: usize,
    d_seed: u64,
) -> Result<DialogueRow> {
    // face-driven speaker embeddings, one per participant
    let e1 = map_speaker(
        &models.speaker,
        &sample.identities[0].face_embedding,
        &sample.identities[0].ref_features,
    )?;
    let e2 = map_speaker(
        &models.speaker,
        &sample.identities[1].face_embedding,
        &sample.identities[1].ref_features,
    )?;

    let speech = end_to_end_speech(
        &sample.script,
        &e1.e_spk,
        &e2.e_spk,
        &models.t2s,
        &models.acoustic,
        &ctx.cfg.t2s.sampling_opts(split_seed_labeled(d_seed, "t2s")),
        &ctx.cfg.acoustic.ode_opts(split_seed_labeled(d_seed, "ode")),
    )?;

    let total = speech.video_frame_budget;
    let tracks = if total == 0 {
        let d_z = models.denoiser.cfg.d_z;
        MotionTracks {
            s1: Tensor::zeros(&[0, d_z]),
            s2: Tensor::zeros(&[0, d_z]),
        }
    } else {
        let s1_feat = codebook.dequantize(speech.streams.stream(1))?;
        let s2_feat = codebook.dequantize(speech.streams.stream(2))?;
        let c_mot = models.mapper.apply(&s1_feat, &s2_feat)?.c_mot;
        MotionTracks {
            s1: generate_track(
                ctx,
                models,
                sample,
                0,
                &c_mot,
                total,
                split_seed_labeled(d_seed, "visual-s1"),
                sched,
            )?,
            s2: generate_track(
                ctx,
                models,
                sample,
                1,
                &c_mot,
                total,
                split_seed_labeled(d_seed, "visual-s2"),
                sched,
            )?,
        }
    };
    check_contracts(&speech, &tracks)?;

    let dir = ctx.paths.dialogue_dir(index);
    fs::create_dir_all(&dir)?;
    let streams_file = StreamsFile {
        s1: speech.streams.stream(1).to_vec(),
        s2: speech.streams.stream(2).to_vec(),
        truncated: speech.truncated,
        speaker_source: format!("{:?}", e1.source).to_lowercase(),
    };
    atomic_write(
        &dir.join("streams.json"),
        serde_json::to_string_pretty(&streams_file)
            .map_err(|e| HarnessError::config(format!("serialize streams: {e}")))?
            .as_bytes(),
    )?;
    atomic_write(
        &dir.join("motion.json"),
        serde_json::to_string(&tracks)
            .map_err(|e| HarnessError::config(format!("serialize motion: {e}")))?
            .as_bytes(),
    )?;
    write_wav(&dir.join("audio.wav"), &speech.wav)?;

    Ok(DialogueRow {
        index,
        sample_id: sample.id,
        tokens: speech.streams.len(),
        truncated: speech.truncated,
        mel_frames: speech.mel.rows(),
        wav_samples: speech.wav.len(),
        video_frames: total,
    })
}

pub fn load_motion_tracks(path: &std::path::Path) -> Result<MotionTracks> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::config(format!("bad motion file {}: {e}", path.display())))
}
