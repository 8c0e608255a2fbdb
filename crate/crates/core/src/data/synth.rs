//! Synthetic dyadic corpus generator.
//!
//! Each sample is a two-party conversation built from an explicit turn
//! schedule: alternating turns with calibrated overlap and silence gaps, a
//! per-turn prosody sinusoid that selects semantic tokens by prosody level,
//! motion tracks coupled to that prosody (speaker) or its lagged attenuation
//! (listener), and mel frames rendered as a fixed linear function of the
//! active token centroids plus a speaker-embedding coloring.
//!
//! Everything is a pure function of the config seed; identity semantics
//! (latent→voice, latent→face maps, the mel rendering matrices) live under a
//! fixed world seed so that two corpora with different seeds still agree on
//! what a given identity latent sounds like.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consts::{
    EXPR_DIMS, FACE_EMBED_DIM, IDENTITY_LATENT_DIM, LATENT_DIM, REF_SHAPE, SILENCE_INDEX,
    SPEAKER_EMBED_DIM, TOKEN_DIM, VIDEO_FPS,
};
use crate::data::codebook::Codebook;
use crate::data::script::{DialogueScript, Turn};
use crate::data::tokens::TokenStreams;
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, split_seed, split_seed_labeled};
use crate::tensor::{normal, Tensor};

/// Fixed seed for world-level structure (identity maps, mel rendering).
const WORLD_SEED: u64 = 0x00D1_A108_0001;

/// Expected turn length / gap / overlap in tokens, used to calibrate the
/// schedule so that the long-run fraction of both-speaking positions matches
/// `overlap_prob` and the silent fraction roughly matches `silence_prob`.
const MEAN_TURN_TOKENS: f64 = 36.0; // 2 * U{12..24}
const MEAN_GAP_TOKENS: f64 = 13.0; // 2 * U{3..10}
const MEAN_OVERLAP_TOKENS: f64 = 11.0; // 2 * U{3..8}

/// Prosody→motion coupling gains. The speaker's expression dims follow their
/// own prosody; a listener follows the partner's prosody 4 frames late, plus
/// a slow nod.
const SPEAKER_GAIN: f64 = 0.55;
const LISTENER_GAIN: f64 = 0.35;
const LISTENER_LAG_FRAMES: usize = 4;
const NOD_GAIN: f64 = 0.12;
const NOD_HZ: f64 = 1.2;
/// Expression dims that carry the prosody coupling (the rest are free).
const COUPLED_DIMS: std::ops::Range<usize> = 6..14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_samples: usize,
    pub n_identities: usize,
    /// Tokens per sample; must be even (2 tokens per video frame).
    pub tokens_per_sample: usize,
    /// Target fraction of token positions where both speakers are active.
    pub overlap_prob: f64,
    /// Target fraction of token positions where neither speaker is active.
    pub silence_prob: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_samples: 64,
            n_identities: 8,
            tokens_per_sample: 400,
            overlap_prob: 0.12,
            silence_prob: 0.15,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::input("n_identities must be at least 2"));
        }
        if self.tokens_per_sample < 16 || self.tokens_per_sample % 2 != 0 {
            return Err(Error::input(format!(
                "tokens_per_sample must be even and >= 16, got {}",
                self.tokens_per_sample
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_prob) || !(0.0..1.0).contains(&self.silence_prob) {
            return Err(Error::input("overlap_prob and silence_prob must be in [0, 1)"));
        }
        let (q, g) = self.transition_probs();
        if !(0.0..=1.0).contains(&q) || !(0.0..=1.0).contains(&g) || q + g > 1.0 {
            return Err(Error::input(format!(
                "overlap_prob {} / silence_prob {} infeasible for the turn-length model \
                 (overlap branch {q:.3}, gap branch {g:.3})",
                self.overlap_prob, self.silence_prob
            )));
        }
        Ok(())
    }

    /// Per-transition probabilities of (overlap, gap) between consecutive
    /// turns. Solving the renewal balance: with expected advance D per turn,
    /// both-fraction = q·E[O]/D and none-fraction = g·E[G]/D where
    /// D = E[L] − q·E[O] + g·E[G], giving D = E[L]/(1 + o − s).
    fn transition_probs(&self) -> (f64, f64) {
        let d = MEAN_TURN_TOKENS / (1.0 + self.overlap_prob - self.silence_prob);
        let q = self.overlap_prob * d / MEAN_OVERLAP_TOKENS;
        let g = self.silence_prob * d / MEAN_GAP_TOKENS;
        (q, g)
    }

    /// The codebook every consumer of this corpus should use; derived from
    /// the corpus seed so it never needs to be stored alongside the samples.
    pub fn codebook(&self) -> Codebook {
        Codebook::generate(split_seed_labeled(self.seed, "codebook"))
    }
}

/// One synthetic person: latent-derived face embedding, spatial reference
/// features, and the ground-truth voice embedding the speaker mapper learns
/// to recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub id: usize,
    pub face_embedding: Tensor,
    pub ref_features: Tensor,
    pub speaker_embedding: Tensor,
}

/// One conversation: script, token streams, per-speaker motion tracks at
/// 25 fps, the mixed mel at 50 Hz, and the two identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub id: usize,
    pub script: DialogueScript,
    pub streams: TokenStreams,
    pub motion: [Tensor; 2],
    pub mel: Tensor,
    pub identities: [SyntheticIdentity; 2],
}

/// Fixed world matrices: voice map A (e_spk = tanh(A·u)), face map B
/// (c_face = B·u + noise), and the mel rendering pair (R tokens, P speaker).
struct World {
    a: Tensor,
    b: Tensor,
    mel_r: Tensor,
    mel_p: Tensor,
}

impl World {
    fn new() -> World {
        let scale = 1.0 / (IDENTITY_LATENT_DIM as f64).sqrt();
        let mut ra = rng_from_seed(split_seed_labeled(WORLD_SEED, "identity.voice"));
        let mut rb = rng_from_seed(split_seed_labeled(WORLD_SEED, "identity.face"));
        let mut rr = rng_from_seed(split_seed_labeled(WORLD_SEED, "mel.tokens"));
        let mut rp = rng_from_seed(split_seed_labeled(WORLD_SEED, "mel.speaker"));
        World {
            a: Tensor::rand_normal(&[SPEAKER_EMBED_DIM, IDENTITY_LATENT_DIM], &mut ra)
                .scale(scale),
            b: Tensor::rand_normal(&[FACE_EMBED_DIM, IDENTITY_LATENT_DIM], &mut rb).scale(scale),
            mel_r: Tensor::rand_normal(&[crate::consts::N_MELS, TOKEN_DIM], &mut rr).scale(0.25),
            mel_p: Tensor::rand_normal(&[crate::consts::N_MELS, SPEAKER_EMBED_DIM], &mut rp)
                .scale(0.15),
        }
    }
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    assert_eq!(m.cols(), v.len());
    (0..m.rows())
        .map(|r| (0..v.len()).map(|c| m.at(r, c) * v[c]).sum())
        .collect()
}

/// Deterministic 8×8×4 spatial expansion of the first four latent dims; the
/// reference features deliberately see only half the identity latent so
/// dropping the face embedding hurts more than dropping these.
fn expand_ref(u: &[f64]) -> Tensor {
    let [h, w, c] = REF_SHAPE;
    let mut out = Tensor::zeros(&[h, w, c]);
    let b1: Vec<f64> = (0..h)
        .map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / h as f64).cos())
        .collect();
    let b2: Vec<f64> = (0..h)
        .map(|i| (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / h as f64).sin())
        .collect();
    for ih in 0..h {
        for iw in 0..w {
            for ic in 0..c {
                let v = u[ic] * b1[ih] * b1[iw] + u[(ic + 1) % c] * b2[ih] * b2[iw];
                out.data[(ih * w + iw) * c + ic] = v;
            }
        }
    }
    out
}

fn make_identity(world: &World, id: usize, seed: u64) -> SyntheticIdentity {
    let mut rng = rng_from_seed(seed);
    let u: Vec<f64> = (0..IDENTITY_LATENT_DIM).map(|_| normal(&mut rng)).collect();
    let e_spk: Vec<f64> = matvec(&world.a, &u).into_iter().map(f64::tanh).collect();
    let face: Vec<f64> = matvec(&world.b, &u)
        .into_iter()
        .map(|x| x + 0.06 * normal(&mut rng))
        .collect();
    SyntheticIdentity {
        id,
        face_embedding: Tensor::new(vec![FACE_EMBED_DIM], face).unwrap(),
        ref_features: expand_ref(&u),
        speaker_embedding: Tensor::new(vec![SPEAKER_EMBED_DIM], e_spk).unwrap(),
    }
}

const LEXICON: [&str; 16] = [
    "yes", "no", "well", "right", "okay", "hm", "so", "then", "look", "see", "now", "really",
    "maybe", "sure", "oh", "true",
];

/// Per-turn prosody sinusoid. Parameters hash from (speaker, text) only, so
/// the same utterance always carries the same prosody contour — the text→token
/// map stays learnable.
struct ProsodyContour {
    amplitude: f64,
    period_tokens: f64,
    phase: f64,
}

impl ProsodyContour {
    fn for_turn(speaker: u8, text: &str) -> ProsodyContour {
        let seed = split_seed_labeled(
            split_seed_labeled(WORLD_SEED, "prosody"),
            &format!("{speaker}:{text}"),
        );
        let mut rng = rng_from_seed(seed);
        ProsodyContour {
            amplitude: 0.6 + 0.35 * rng.gen::<f64>(),
            period_tokens: [16.0, 24.0, 32.0][rng.gen_range(0..3)],
            phase: rng.gen::<f64>() * std::f64::consts::TAU,
        }
    }

    fn at(&self, local_token: usize) -> f64 {
        self.amplitude
            * (std::f64::consts::TAU * local_token as f64 / self.period_tokens + self.phase).sin()
    }
}

/// Build the turn schedule for one sample, in token units (all boundaries
/// even so turns align to video frames).
fn build_schedule(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<(u8, usize, usize, String)> {
    let total = cfg.tokens_per_sample;
    let (q, g) = cfg.transition_probs();
    let mut turns = Vec::new();
    let mut speaker: u8 = if rng.gen_bool(0.5) { 1 } else { 2 };
    let mut t = 2 * rng.gen_range(0..=3usize); // short silent lead-in
    let mut prev_end = [0usize; 2]; // last turn end per speaker, for overlap clamping
    while t < total {
        let len = 2 * rng.gen_range(12..=24usize);
        let end = (t + len).min(total);
        if end > t {
            let n_words = rng.gen_range(2..=5usize);
            let text = (0..n_words)
                .map(|_| LEXICON[rng.gen_range(0..LEXICON.len())])
                .collect::<Vec<_>>()
                .join(" ");
            turns.push((speaker, t, end, text));
            prev_end[(speaker - 1) as usize] = end;
        }
        let x: f64 = rng.gen();
        let raw_next = if x < q {
            (t + len).saturating_sub(2 * rng.gen_range(3..=8usize))
        } else if x < q + g {
            t + len + 2 * rng.gen_range(3..=10usize)
        } else {
            t + len
        };
        speaker = 3 - speaker;
        // an overlapping turn may not reach back into this speaker's own
        // previous turn
        t = raw_next.max(prev_end[(speaker - 1) as usize]);
    }
    turns
}

/// Per-frame prosody level of one stream: mean centroid prosody of the two
/// tokens in each video frame (exactly the turn contour after quantization;
/// zero on silence).
pub fn frame_prosody(streams: &TokenStreams, codebook: &Codebook, role: u8) -> Vec<f64> {
    let s = streams.stream(role);
    s.chunks(2)
        .map(|pair| {
            pair.iter().map(|&t| codebook.prosody_level(t)).sum::<f64>() / pair.len() as f64
        })
        .collect()
}

/// Motion synthesis for one role: identity base posture + AR(1) wander,
/// prosody-coupled expression while speaking, lagged partner coupling and a
/// nod while listening.
#[allow(clippy::too_many_arguments)]
fn synth_motion(
    script: &DialogueScript,
    role: u8,
    frames: usize,
    p_self: &[f64],
    p_other: &[f64],
    identity: &SyntheticIdentity,
    nod_phase: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let mut m = Tensor::zeros(&[frames, LATENT_DIM]);
    // base posture derived from the face embedding so it is identity-stable
    let base: Vec<f64> = (0..LATENT_DIM)
        .map(|d| {
            let u = identity.face_embedding.data[d % FACE_EMBED_DIM];
            if d < EXPR_DIMS.start {
                0.25 * (2.0 * u).tanh()
            } else {
                0.15 * (2.0 * u).tanh()
            }
        })
        .collect();
    let phi = 0.8; // AR(1) pole
    let mut noise = vec![0.0f64; LATENT_DIM];
    let other_role = 3 - role;
    for f in 0..frames {
        for d in 0..LATENT_DIM {
            let marginal_sd = if d < EXPR_DIMS.start { 0.15 } else { 0.1 };
            noise[d] = phi * noise[d] + marginal_sd * (1.0 - phi * phi).sqrt() * normal(rng);
        }
        let self_active = script.is_active(role, f);
        let other_active = script.is_active(other_role, f);
        for d in 0..LATENT_DIM {
            let mut v = base[d] + noise[d];
            if self_active {
                if COUPLED_DIMS.contains(&d) {
                    v += SPEAKER_GAIN * p_self[f];
                }
                if d == 0 {
                    v += 0.2 * p_self[f]; // head emphasis while speaking
                }
            } else if other_active {
                if COUPLED_DIMS.contains(&d) && f >= LISTENER_LAG_FRAMES {
                    v += LISTENER_GAIN * p_other[f - LISTENER_LAG_FRAMES];
                }
                if d == 1 {
                    v += NOD_GAIN
                        * (std::f64::consts::TAU * NOD_HZ * f as f64 / VIDEO_FPS as f64
                            + nod_phase)
                            .sin();
                }
            }
            m.set(f, d, v);
        }
    }
    m
}

/// The identity gallery a config generates, without synthesizing any
/// dialogues. Bit-identical to the identities referenced by the samples of
/// `synth_corpus(cfg)`.
pub fn corpus_identities(cfg: &CorpusConfig) -> Result<Vec<SyntheticIdentity>> {
    cfg.validate()?;
    let world = World::new();
    let id_base = split_seed_labeled(cfg.seed, "identities");
    Ok((0..cfg.n_identities)
        .map(|i| make_identity(&world, i, split_seed(id_base, i as u64)))
        .collect())
}

/// Generate the full corpus for a config. Deterministic: the same config
/// yields bit-identical samples.
pub fn synth_corpus(cfg: &CorpusConfig) -> Result<Vec<DialogueSample>> {
    cfg.validate()?;
    let world = World::new();
    let codebook = cfg.codebook();

    let id_base = split_seed_labeled(cfg.seed, "identities");
    let identities: Vec<SyntheticIdentity> = (0..cfg.n_identities)
        .map(|i| make_identity(&world, i, split_seed(id_base, i as u64)))
        .collect();

    let sample_base = split_seed_labeled(cfg.seed, "samples");
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for k in 0..cfg.n_samples {
        let sample_seed = split_seed(sample_base, k as u64);
        let mut rng = rng_from_seed(split_seed_labeled(sample_seed, "schedule"));
        let sched = build_schedule(cfg, &mut rng);

        let turns: Vec<Turn> = sched
            .iter()
            .map(|(speaker, start, end, text)| Turn {
                speaker: *speaker,
                text: text.clone(),
                start_frame: start / 2,
                end_frame: end / 2,
            })
            .collect();
        let script = DialogueScript::new(turns)?;

        // token streams: within a turn, pick the nearest non-silence centroid
        // to the turn's prosody contour; silence elsewhere
        let total = cfg.tokens_per_sample;
        let mut s = [vec![SILENCE_INDEX; total], vec![SILENCE_INDEX; total]];
        for (speaker, start, end, text) in &sched {
            let contour = ProsodyContour::for_turn(*speaker, text);
            for t in *start..*end {
                s[(speaker - 1) as usize][t] = codebook.nearest_to_prosody(contour.at(t - start));
            }
        }
        let streams = TokenStreams::new(s[0].clone(), s[1].clone())?;

        let p1 = frame_prosody(&streams, &codebook, 1);
        let p2 = frame_prosody(&streams, &codebook, 2);
        let frames = total / 2;

        // pick two distinct identities
        let mut id_rng = rng_from_seed(split_seed_labeled(sample_seed, "identity-pair"));
        let i1 = id_rng.gen_range(0..cfg.n_identities);
        let i2 = (i1 + 1 + id_rng.gen_range(0..cfg.n_identities - 1)) % cfg.n_identities;
        let pair = [identities[i1].clone(), identities[i2].clone()];

        let mut motion_rng1 = rng_from_seed(split_seed_labeled(sample_seed, "motion.1"));
        let mut motion_rng2 = rng_from_seed(split_seed_labeled(sample_seed, "motion.2"));
        let nod1 = rng_from_seed(split_seed_labeled(sample_seed, "nod.1")).gen::<f64>()
            * std::f64::consts::TAU;
        let nod2 = rng_from_seed(split_seed_labeled(sample_seed, "nod.2")).gen::<f64>()
            * std::f64::consts::TAU;
        let motion1 = synth_motion(&script, 1, frames, &p1, &p2, &pair[0], nod1, &mut motion_rng1);
        let motion2 = synth_motion(&script, 2, frames, &p2, &p1, &pair[1], nod2, &mut motion_rng2);

        // mixed mel: sum of active streams' rendered centroids, colored by
        // each speaker's voice embedding
        let mut mel = Tensor::zeros(&[total, crate::consts::N_MELS]);
        for t in 0..total {
            for (role_idx, stream) in [&streams.s1, &streams.s2].into_iter().enumerate() {
                let tok = stream[t];
                if tok != streams.silence_index {
                    let c: Vec<f64> = (0..TOKEN_DIM)
                        .map(|d| codebook.centroids.at(tok as usize, d))
                        .collect();
                    let rendered = matvec(&world.mel_r, &c);
                    let colored = matvec(&world.mel_p, &pair[role_idx].speaker_embedding.data);
                    for (mcol, val) in rendered.iter().zip(&colored).enumerate() {
                        mel.set(t, mcol, mel.at(t, mcol) + val.0 + val.1);
                    }
                }
            }
        }

        samples.push(DialogueSample {
            id: k,
            script,
            streams,
            motion: [motion1, motion2],
            mel,
            identities: pair,
        });
    }
    Ok(samples)
}
