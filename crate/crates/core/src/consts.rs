//! Shared dimensional constants of the synthetic world.
//!
//! Token, latent, and audio geometry are fixed so that one video frame always
//! corresponds to exactly two semantic tokens and two mel frames, and one mel
//! frame to exactly 320 waveform samples. Everything downstream (alignment
//! contracts, window slicing, the vocoder) leans on these numbers.

use std::ops::Range;

/// Semantic token vocabulary size.
pub const VOCAB_SIZE: usize = 256;
/// Reserved silence token.
pub const SILENCE_INDEX: u32 = 0;
/// Width of a token centroid.
pub const TOKEN_DIM: usize = 16;
/// Linguistic-content half of a centroid.
pub const LING_DIMS: Range<usize> = 0..8;
/// Prosody half of a centroid.
pub const PROSODY_DIMS: Range<usize> = 8..16;

/// Semantic token rate and mel frame rate.
pub const TOKEN_RATE_HZ: usize = 50;
/// Video frame rate; half the token rate by design.
pub const VIDEO_FPS: usize = 25;
/// Tokens (and mel frames) per video frame.
pub const TOKENS_PER_VIDEO_FRAME: usize = 2;

/// Visual latent width: 6 pose dims then 18 expression dims.
pub const LATENT_DIM: usize = 24;
pub const POSE_DIMS: Range<usize> = 0..6;
pub const EXPR_DIMS: Range<usize> = 6..24;

/// Width of interactive motion features produced by the motion mapper.
pub const MOTION_FEATURE_DIM: usize = 32;

/// Speaker embedding width.
pub const SPEAKER_EMBED_DIM: usize = 16;
/// Face embedding width.
pub const FACE_EMBED_DIM: usize = 32;
/// Reference feature map: height, width, channels.
pub const REF_SHAPE: [usize; 3] = [8, 8, 4];
/// Latent identity factor width inside the generator.
pub const IDENTITY_LATENT_DIM: usize = 8;

/// Mel bins per frame.
pub const N_MELS: usize = 80;
/// Waveform sample rate.
pub const SAMPLE_RATE_HZ: usize = 16_000;
/// Waveform samples per mel frame (16 kHz / 50 Hz).
pub const HOP_SAMPLES: usize = 320;

/// Denoiser conditioning window length in video frames.
pub const WINDOW_FRAMES: usize = 14;
/// Previous latent frames fed back as motion conditioning.
pub const MOTION_CONTEXT_FRAMES: usize = 2;
