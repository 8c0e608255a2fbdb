//! Checkpoint identity and discovery.
//!
//! A checkpoint belongs to a training trajectory, not just an architecture:
//! its header carries the stage seed plus a fingerprint hashed over everything
//! that shapes the parameter sequence (corpus config, model size, batch, lr,
//! segment length). The step budget and sampling knobs are deliberately left
//! out, so raising `train_steps` or retuning inference resumes instead of
//! retraining.

use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

use dyad_core::data::CorpusConfig;
use dyad_core::nn::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamStore};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// Hash a stage's trajectory identity: a schema tag, the resolved corpus
/// config, and the stage's section with non-trajectory keys removed.
pub fn stage_fingerprint(
    tag: &str,
    corpus: &CorpusConfig,
    section: &impl serde::Serialize,
    strip: &[&str],
) -> [u8; 32] {
    let mut sec = serde_json::to_value(section).expect("section serializes");
    if let Some(obj) = sec.as_object_mut() {
        for key in strip {
            obj.remove(*key);
        }
    }
    let payload = serde_json::json!({
        "tag": tag,
        "corpus": corpus,
        "section": sec,
    });
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&payload).expect("payload serializes"));
    h.finalize().into()
}

/// Keys that tune sampling or the step budget, per stage. Changing these must
/// not invalidate existing checkpoints.
pub fn fingerprint_for(cfg: &ExperimentConfig, stage: &str) -> [u8; 32] {
    let corpus = cfg.corpus.to_core(cfg.seed);
    match stage {
        "t2s" => stage_fingerprint(
            "t2s-v1",
            &corpus,
            &cfg.t2s,
            &["train_steps", "temperature", "top_k", "cfg_scale", "cfg_k", "max_len"],
        ),
        "acoustic" => stage_fingerprint(
            "acoustic-v1",
            &corpus,
            &cfg.acoustic,
            &["train_steps", "steps", "cfg_scale"],
        ),
        "visual" => {
            // the jointly tuned mapper is part of the trajectory
            let mut h = Sha256::new();
            h.update(stage_fingerprint(
                "visual-v1",
                &corpus,
                &cfg.visual,
                &["train_steps", "cfg_scale", "sampler"],
            ));
            h.update(fingerprint_for(cfg, "mapper-motion"));
            h.finalize().into()
        }
        "mapper-motion" => stage_fingerprint("mapper-motion-v1", &corpus, &cfg.mapper, &[]),
        "mapper-speaker" => {
            stage_fingerprint("mapper-speaker-v1", &corpus, &cfg.speaker, &["train_steps"])
        }
        other => panic!("unknown stage {other}"),
    }
}

/// All `<stage>-NNNNNN.ckpt` files in `dir`, sorted by step.
pub fn list_checkpoints(dir: &Path, stage: &str) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let prefix = format!("{stage}-");
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(rest) = name.strip_prefix(&prefix) else {
            continue;
        };
        let Some(digits) = rest.strip_suffix(".ckpt") else {
            continue;
        };
        // exactly six digits, so "mapper-speaker-*" never matches "mapper"
        if digits.len() != 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        out.push((digits.parse().expect("digits"), entry.path()));
    }
    out.sort();
    Ok(out)
}

pub struct FoundCheckpoint {
    pub step: u64,
    pub path: PathBuf,
    pub store: ParamStore,
}

/// Best checkpoint to continue from: the largest step ≤ `target` that sits on
/// a segment boundary (or hits the target exactly) and whose header matches
/// this trajectory. Off-boundary snapshots from runs with a different budget
/// are skipped so resumed training replays the same segment schedule.
pub fn find_resumable(
    dir: &Path,
    stage: &str,
    target: u64,
    every: u64,
    fingerprint: &[u8; 32],
    stage_seed: u64,
) -> Result<Option<FoundCheckpoint>> {
    let mut cands = list_checkpoints(dir, stage)?;
    cands.retain(|(s, _)| *s > 0 && *s <= target && (*s == target || *s % every == 0));
    for (step, path) in cands.into_iter().rev() {
        let (header, store, _) = load_checkpoint(&path)?;
        if header.config_hash == *fingerprint && header.seed == stage_seed && header.step == step {
            return Ok(Some(FoundCheckpoint { step, path, store }));
        }
    }
    Ok(None)
}

pub fn save_stage_checkpoint(
    path: &Path,
    stage_seed: u64,
    fingerprint: [u8; 32],
    step: u64,
    store: &ParamStore,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let header = CheckpointHeader {
        seed: stage_seed,
        config_hash: fingerprint,
        step,
    };
    save_checkpoint(path, &header, store, None).map_err(HarnessError::from)
}

/// Flatten several named stores into one, for stages that train two models.
pub fn merge_stores(parts: &[(&str, &ParamStore)]) -> ParamStore {
    let mut out = ParamStore::default();
    for (prefix, store) in parts {
        for (name, t) in store.iter() {
            out.insert(format!("{prefix}.{name}"), t.clone());
        }
    }
    out
}

pub fn split_store(merged: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::default();
    let with_dot = format!("{prefix}.");
    for (name, t) in merged.iter() {
        if let Some(rest) = name.strip_prefix(&with_dot) {
            out.insert(rest.to_string(), t.clone());
        }
    }
    out
}
