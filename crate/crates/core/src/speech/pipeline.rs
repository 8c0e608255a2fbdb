//! Script to sound: tokenize → decode semantic streams → flow-sample the
//! mixed mel → render the waveform. The alignment contracts live here: one
//! mel frame per token step, 320 waveform samples per mel frame, and a video
//! budget of ⌊T/2⌋ frames for T token steps.

use crate::consts::{HOP_SAMPLES, TOKENS_PER_VIDEO_FRAME};
use crate::data::DialogueScript;
use crate::error::Result;
use crate::speech::acoustic::{ode_sample, AcousticCond, AcousticModel, OdeOpts};
use crate::speech::t2s::{decode_semantic, SamplingOpts, T2SModel};
use crate::speech::text::tokenize_text;
use crate::speech::vocoder::toy_vocoder;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SpeechOutput {
    pub streams: crate::data::TokenStreams,
    /// Token decoding hit max_len before the stop head fired.
    pub truncated: bool,
    pub mel: Tensor,
    pub wav: Vec<f64>,
    /// How many video frames this dialogue spans: ⌊tokens / 2⌋.
    pub video_frame_budget: usize,
}

/// Run the full speech side for one script and one ordered identity pair.
/// Deterministic given the two seeds carried in the option structs.
pub fn end_to_end_speech(
    script: &DialogueScript,
    e_spk1: &Tensor,
    e_spk2: &Tensor,
    t2s: &T2SModel,
    acoustic: &AcousticModel,
    t2s_opts: &SamplingOpts,
    ode_opts: &OdeOpts,
) -> Result<SpeechOutput> {
    let text = tokenize_text(script)?;
    let decoded = decode_semantic(t2s, &text, t2s_opts)?;
    let cond = AcousticCond::new(decoded.streams.clone(), e_spk1, e_spk2)?;
    let mel = ode_sample(acoustic, &cond, ode_opts)?;
    let wav = toy_vocoder(&mel)?;
    let tokens = decoded.streams.len();
    debug_assert_eq!(mel.rows(), tokens);
    debug_assert_eq!(wav.len(), HOP_SAMPLES * mel.rows());
    Ok(SpeechOutput {
        streams: decoded.streams,
        truncated: decoded.truncated,
        mel,
        wav,
        video_frame_budget: tokens / TOKENS_PER_VIDEO_FRAME,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consts::SPEAKER_EMBED_DIM;
    use crate::data::Turn;
    use crate::rng::rng_from_seed;
    use crate::speech::acoustic::AcousticConfig;
    use crate::speech::t2s::T2SConfig;
    use crate::tensor::Tensor;

    fn small_models() -> (T2SModel, AcousticModel) {
        let t2s = T2SModel::init(
            T2SConfig { width: 16, heads: 2, enc_depth: 1, dec_depth: 1, ..T2SConfig::default() },
            50,
        );
        let ac = AcousticModel::init(AcousticConfig { width: 16, depth: 1, ..AcousticConfig::default() }, 51);
        (t2s, ac)
    }

    fn script(words: &str, two_turns: bool) -> DialogueScript {
        let mut turns = vec![Turn { speaker: 1, text: words.into(), start_frame: 0, end_frame: 4 }];
        if two_turns {
            turns.push(Turn { speaker: 2, text: "sure".into(), start_frame: 4, end_frame: 8 });
        }
        DialogueScript::new(turns).unwrap()
    }

    #[test]
    fn alignment_contracts_hold_for_untrained_models() {
        let (t2s, ac) = small_models();
        let mut rng = rng_from_seed(1);
        for k in 0..10 {
            let sc = script(["well okay", "no", "see you then"][k % 3], k % 2 == 0);
            let e1 = Tensor::rand_normal(&[SPEAKER_EMBED_DIM], &mut rng);
            let e2 = Tensor::rand_normal(&[SPEAKER_EMBED_DIM], &mut rng);
            let out = end_to_end_speech(
                &sc,
                &e1,
                &e2,
                &t2s,
                &ac,
                &SamplingOpts { max_len: 9, cfg_scale: 1.0, seed: k as u64, ..SamplingOpts::default() },
                &OdeOpts { steps: 4, cfg_scale: 1.0, seed: k as u64 },
            )
            .unwrap();
            let t = out.streams.len();
            assert!(t >= 1 && t <= 9);
            assert_eq!(out.mel.rows(), t, "one mel frame per token step");
            assert_eq!(out.wav.len(), HOP_SAMPLES * t, "320 samples per mel frame");
            assert_eq!(out.video_frame_budget, t / 2);
        }
    }

    #[test]
    fn full_run_is_deterministic_given_seeds() {
        let (t2s, ac) = small_models();
        let sc = script("really now", true);
        let mut rng = rng_from_seed(2);
        let e1 = Tensor::rand_normal(&[SPEAKER_EMBED_DIM], &mut rng);
        let e2 = Tensor::rand_normal(&[SPEAKER_EMBED_DIM], &mut rng);
        let t_opts = SamplingOpts { temperature: 0.8, top_k: 4, max_len: 7, cfg_scale: 1.2, seed: 5, ..SamplingOpts::default() };
        let o_opts = OdeOpts { steps: 5, cfg_scale: 1.3, seed: 6 };
        let run = || end_to_end_speech(&sc, &e1, &e2, &t2s, &ac, &t_opts, &o_opts).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.streams, b.streams);
        assert_eq!(a.mel, b.mel);
        assert_eq!(a.wav, b.wav);
        assert_eq!(a.truncated, b.truncated);
    }

    #[test]
    fn component_errors_propagate() {
        let (t2s, ac) = small_models();
        let empty = DialogueScript::new(vec![]).unwrap();
        let e = Tensor::zeros(&[SPEAKER_EMBED_DIM]);
        let err = end_to_end_speech(
            &empty,
            &e,
            &e,
            &t2s,
            &ac,
            &SamplingOpts::default(),
            &OdeOpts::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }
}
