//! Experiment configuration: one TOML file plus `--set key=value` overrides.
//! Every key has a default, unknown keys are rejected before any compute, and
//! the resolved config hashes to a stable id recorded in the run manifest.
//!
//! Stage randomness never appears here: the root `seed` is split per stage by
//! label, so each stage is independently reproducible from this file alone.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

use dyad_core::consts::{
    FACE_EMBED_DIM, LATENT_DIM, MOTION_CONTEXT_FRAMES, MOTION_FEATURE_DIM, N_MELS, REF_SHAPE,
    SPEAKER_EMBED_DIM, TOKEN_DIM, VOCAB_SIZE, WINDOW_FRAMES,
};
use dyad_core::data::CorpusConfig;
use dyad_core::motion::{MapperConfig, Strategy, TrainOpts};
use dyad_core::rng::split_seed_labeled;
use dyad_core::speaker::{SpeakerMapperConfig, SpeakerTrainOpts};
use dyad_core::speech::{
    AcousticConfig, AcousticTrainOpts, OdeOpts, SamplingOpts, T2SConfig, T2STrainOpts,
    TEXT_VOCAB_SIZE,
};
use dyad_core::visual::{DenoiserConfig, SamplerKind, VisualTrainOpts};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Subdirectory of the output root this run writes into.
    pub run_name: String,
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Replicate seeds for the ablation table.
    pub seeds: Vec<u64>,
    pub corpus: CorpusSection,
    pub t2s: T2sSection,
    pub acoustic: AcousticSection,
    pub visual: VisualSection,
    pub mapper: MapperSection,
    pub speaker: SpeakerSection,
    pub infer: InferSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_name: "default".into(),
            seed: 17,
            seeds: vec![1, 2, 3],
            corpus: CorpusSection::default(),
            t2s: T2sSection::default(),
            acoustic: AcousticSection::default(),
            visual: VisualSection::default(),
            mapper: MapperSection::default(),
            speaker: SpeakerSection::default(),
            infer: InferSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_samples: usize,
    pub n_identities: usize,
    pub tokens_per_sample: usize,
    pub overlap_prob: f64,
    pub silence_prob: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_samples: 24,
            n_identities: 8,
            tokens_per_sample: 120,
            overlap_prob: 0.12,
            silence_prob: 0.15,
        }
    }
}

impl CorpusSection {
    /// Core corpus config with the seed derived from the run's root seed.
    pub fn to_core(&self, root_seed: u64) -> CorpusConfig {
        CorpusConfig {
            n_samples: self.n_samples,
            n_identities: self.n_identities,
            tokens_per_sample: self.tokens_per_sample,
            overlap_prob: self.overlap_prob,
            silence_prob: self.silence_prob,
            seed: split_seed_labeled(root_seed, "corpus"),
        }
    }
}

/// Text-to-semantic stage: model size, training schedule, and the sampling
/// knobs used at inference (temperature 0 = greedy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct T2sSection {
    pub width: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub train_steps: u64,
    pub checkpoint_every: u64,
    pub batch: usize,
    pub lr: f64,
    pub text_dropout: f64,
    pub stop_weight: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub cfg_scale: f64,
    pub cfg_k: usize,
    pub max_len: usize,
}

impl Default for T2sSection {
    fn default() -> Self {
        T2sSection {
            width: 64,
            heads: 4,
            enc_depth: 1,
            dec_depth: 2,
            train_steps: 400,
            checkpoint_every: 200,
            batch: 4,
            lr: 1e-3,
            text_dropout: 0.1,
            stop_weight: 1.0,
            temperature: 0.0,
            top_k: 8,
            cfg_scale: 1.5,
            cfg_k: 32,
            max_len: 512,
        }
    }
}

impl T2sSection {
    pub fn model_cfg(&self) -> T2SConfig {
        T2SConfig {
            text_vocab: TEXT_VOCAB_SIZE,
            vocab: VOCAB_SIZE,
            width: self.width,
            heads: self.heads,
            enc_depth: self.enc_depth,
            dec_depth: self.dec_depth,
        }
    }

    pub fn train_opts(&self, steps: usize) -> T2STrainOpts {
        T2STrainOpts {
            steps,
            batch: self.batch,
            lr: self.lr,
            text_dropout: self.text_dropout,
            stop_weight: self.stop_weight,
        }
    }

    pub fn sampling_opts(&self, seed: u64) -> SamplingOpts {
        SamplingOpts {
            temperature: self.temperature,
            top_k: self.top_k,
            cfg_scale: self.cfg_scale,
            cfg_k: self.cfg_k,
            max_len: self.max_len,
            seed,
        }
    }
}

/// Acoustic flow stage; `steps`/`cfg_scale` are the ODE sampling knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticSection {
    pub width: usize,
    pub depth: usize,
    pub train_steps: u64,
    pub checkpoint_every: u64,
    pub batch: usize,
    pub chunk_frames: usize,
    pub lr: f64,
    pub dropout_p: f64,
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for AcousticSection {
    fn default() -> Self {
        AcousticSection {
            width: 64,
            depth: 2,
            train_steps: 300,
            checkpoint_every: 150,
            batch: 4,
            chunk_frames: 32,
            lr: 2e-3,
            dropout_p: 0.3,
            steps: 32,
            cfg_scale: 1.0,
        }
    }
}

impl AcousticSection {
    pub fn model_cfg(&self) -> AcousticConfig {
        AcousticConfig {
            n_mels: N_MELS,
            vocab: VOCAB_SIZE,
            width: self.width,
            depth: self.depth,
            d_spk: 2 * SPEAKER_EMBED_DIM,
        }
    }

    pub fn train_opts(&self, steps: usize) -> AcousticTrainOpts {
        AcousticTrainOpts {
            steps,
            batch: self.batch,
            chunk_frames: self.chunk_frames,
            lr: self.lr,
            dropout_p: self.dropout_p,
        }
    }

    pub fn ode_opts(&self, seed: u64) -> OdeOpts {
        OdeOpts {
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            seed,
        }
    }
}

/// Visual diffusion stage. Training freezes the denoiser trunk and updates
/// only the motion mapper plus the motion/temporal attention blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualSection {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub temporal_attention: bool,
    pub k_prev: usize,
    pub t_steps: usize,
    pub window_frames: usize,
    pub train_steps: u64,
    pub checkpoint_every: u64,
    pub batch: usize,
    pub lr: f64,
    pub dropout_p: f64,
    pub cfg_scale: f64,
    pub sampler: SamplerKind,
}

impl Default for VisualSection {
    fn default() -> Self {
        VisualSection {
            width: 64,
            heads: 4,
            depth: 2,
            temporal_attention: true,
            k_prev: MOTION_CONTEXT_FRAMES,
            t_steps: 40,
            window_frames: WINDOW_FRAMES,
            train_steps: 150,
            checkpoint_every: 50,
            batch: 2,
            lr: 1e-3,
            dropout_p: 0.05,
            cfg_scale: 1.2,
            sampler: SamplerKind::Ddim,
        }
    }
}

impl VisualSection {
    pub fn model_cfg(&self) -> DenoiserConfig {
        DenoiserConfig {
            d_z: LATENT_DIM,
            width: self.width,
            heads: self.heads,
            depth: self.depth,
            d_mot: MOTION_FEATURE_DIM,
            d_face: FACE_EMBED_DIM,
            ref_tokens: REF_SHAPE[0] * REF_SHAPE[1],
            ref_dim: REF_SHAPE[2],
            k_prev: self.k_prev,
            temporal_attention: self.temporal_attention,
        }
    }

    /// Trainable denoiser prefixes: motion attention and temporal attention
    /// in every block. Everything else in the denoiser stays frozen.
    pub fn unfrozen_prefixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in 0..self.depth {
            out.push(format!("blk{k}.mot"));
            out.push(format!("blk{k}.tmp"));
        }
        out
    }

    pub fn train_opts(&self, steps: usize) -> VisualTrainOpts {
        VisualTrainOpts {
            steps,
            batch: self.batch,
            window_frames: self.window_frames,
            t_steps: self.t_steps,
            lr: self.lr,
            dropout_p: self.dropout_p,
            denoiser_unfrozen: Some(self.unfrozen_prefixes()),
            mapper_unfrozen: true,
        }
    }
}

/// Motion mapper stage and the shared schedule for the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperSection {
    pub strategy: String,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub pos_dim: usize,
    pub tie_streams: bool,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_pairs: usize,
    pub window_tokens: usize,
    pub lr: f64,
}

impl Default for MapperSection {
    fn default() -> Self {
        MapperSection {
            strategy: "joint".into(),
            width: 64,
            heads: 4,
            depth: 2,
            pos_dim: 16,
            tie_streams: false,
            epochs: 5,
            steps_per_epoch: 60,
            batch_pairs: 4,
            window_tokens: 64,
            lr: 3e-3,
        }
    }
}

impl MapperSection {
    pub fn strategy(&self) -> Result<Strategy> {
        Strategy::parse(&self.strategy).map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn model_cfg(&self) -> Result<MapperConfig> {
        Ok(MapperConfig {
            strategy: self.strategy()?,
            d_in: TOKEN_DIM,
            pos_dim: self.pos_dim,
            width: self.width,
            heads: self.heads,
            depth: self.depth,
            d_mot: MOTION_FEATURE_DIM,
            tie_streams: self.tie_streams,
        })
    }

    pub fn train_opts(&self, zero_prosody: bool) -> TrainOpts {
        TrainOpts {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            batch_pairs: self.batch_pairs,
            window_tokens: self.window_tokens,
            lr: self.lr,
            zero_prosody,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerSection {
    pub channels: usize,
    pub width: usize,
    pub use_face: bool,
    pub use_ref: bool,
    pub train_steps: u64,
    pub checkpoint_every: u64,
    pub batch: usize,
    pub lr: f64,
}

impl Default for SpeakerSection {
    fn default() -> Self {
        SpeakerSection {
            channels: 8,
            width: 64,
            use_face: true,
            use_ref: true,
            train_steps: 1000,
            checkpoint_every: 500,
            batch: 64,
            lr: 1e-3,
        }
    }
}

impl SpeakerSection {
    pub fn model_cfg(&self) -> SpeakerMapperConfig {
        SpeakerMapperConfig {
            d_spk: SPEAKER_EMBED_DIM,
            d_face: FACE_EMBED_DIM,
            ref_shape: REF_SHAPE,
            channels: self.channels,
            width: self.width,
            use_face: self.use_face,
            use_ref: self.use_ref,
        }
    }

    pub fn train_opts(&self, steps: usize) -> SpeakerTrainOpts {
        SpeakerTrainOpts {
            steps,
            batch: self.batch,
            lr: self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    /// How many corpus dialogues to synthesize (clamped to the corpus size).
    pub n_dialogues: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection { n_dialogues: 4 }
    }
}

impl ExperimentConfig {
    /// Everything enum-like or structurally constrained is checked here, so a
    /// bad config fails before any artifact is touched.
    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() || self.run_name.contains(std::path::is_separator) {
            return Err(HarnessError::config(format!(
                "run_name {:?} must be a single non-empty path component",
                self.run_name
            )));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::config("seeds list must not be empty"));
        }
        self.mapper.strategy()?;
        if self.corpus.n_samples == 0 {
            return Err(HarnessError::config("corpus.n_samples must be positive"));
        }
        if self.corpus.n_identities < 2 {
            return Err(HarnessError::config("corpus.n_identities must be at least 2"));
        }
        if self.corpus.tokens_per_sample < 16 || self.corpus.tokens_per_sample % 2 != 0 {
            return Err(HarnessError::config(
                "corpus.tokens_per_sample must be even and at least 16",
            ));
        }
        for (name, steps, every) in [
            ("t2s", self.t2s.train_steps, self.t2s.checkpoint_every),
            ("acoustic", self.acoustic.train_steps, self.acoustic.checkpoint_every),
            ("visual", self.visual.train_steps, self.visual.checkpoint_every),
            ("speaker", self.speaker.train_steps, self.speaker.checkpoint_every),
        ] {
            if steps == 0 {
                return Err(HarnessError::config(format!(
                    "{name}.train_steps must be positive"
                )));
            }
            if every == 0 {
                return Err(HarnessError::config(format!(
                    "{name}.checkpoint_every must be positive"
                )));
            }
        }
        if self.mapper.epochs == 0 || self.mapper.steps_per_epoch == 0 {
            return Err(HarnessError::config(
                "mapper.epochs and mapper.steps_per_epoch must be positive",
            ));
        }
        if self.infer.n_dialogues == 0 {
            return Err(HarnessError::config("infer.n_dialogues must be positive"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&json);
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse the file (or start from defaults when absent) and fold in `--set`
/// overrides, then deserialize strictly and validate.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| {
            HarnessError::prereq(format!("config file {}: {e}", p.display()))
        })?,
        None => String::new(),
    };
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| HarnessError::config(format!("config is not valid TOML: {e}")))?;
    for spec in sets {
        apply_set(&mut table, spec)?;
    }
    let cfg = ExperimentConfig::deserialize(toml::Value::Table(table))
        .map_err(|e| HarnessError::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply one `key.path=value` override. Values parse as TOML scalars first
/// (so numbers and bools keep their types) and fall back to plain strings.
fn apply_set(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::config(format!("--set {spec:?}: expected key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(HarnessError::config(format!("--set {spec:?}: empty key")));
    }
    let value = parse_scalar(raw.trim());

    let mut cur = table;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                HarnessError::config(format!("--set {key}: {part} is not a table"))
            })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Wrap in a throwaway document so "3", "true", "[1,2]" all parse typed.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v exists"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
