//! Dialogue scripts, dual-stream semantic tokens, the quantization codebook,
//! and the synthetic dyadic corpus (generation + file I/O).

pub mod codebook;
pub mod corpus;
pub mod script;
pub mod synth;
pub mod tokens;

pub use codebook::Codebook;
pub use corpus::{load_corpus, save_corpus, CorpusMeta};
pub use script::{DialogueScript, Turn};
pub use synth::{corpus_identities, synth_corpus, CorpusConfig, DialogueSample, SyntheticIdentity};
pub use tokens::{active_speaker_mask, pad_single_role, Activity, TokenStreams};
