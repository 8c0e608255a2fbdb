//! Speech pipeline: script text → character ids → dual semantic token
//! streams (autoregressive) → mel frames (flow matching) → waveform
//! (sinusoid-bank vocoder).

pub mod acoustic;
pub mod pipeline;
pub mod t2s;
pub mod text;
pub mod vocoder;

pub use acoustic::{
    acoustic_loss, flow_interpolate, ode_sample, ode_sample_from, train_acoustic, AcousticCond,
    AcousticConfig, AcousticModel, AcousticTrainOpts, AcousticTrainReport, FlowField, OdeOpts,
};
pub use pipeline::{end_to_end_speech, SpeechOutput};
pub use t2s::{
    cfg_filter_logits, cfg_logits, decode_semantic, t2s_ce_loss, train_t2s, DecodeOutput,
    SamplingOpts, T2SConfig, T2SModel, T2STrainOpts, T2STrainReport,
};
pub use text::{detokenize, tokenize_text, TEXT_VOCAB_SIZE};
pub use vocoder::{read_wav, toy_vocoder, write_wav};
