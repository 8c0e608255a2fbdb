//! Dual-stream semantic token sequences and the per-position activity mask.

use serde::{Deserialize, Serialize};

use crate::consts::{SILENCE_INDEX, TOKEN_RATE_HZ, VOCAB_SIZE};
use crate::error::{Error, Result};

/// Two aligned token streams, one per conversation participant. Silence spans
/// are filled with `silence_index`, so both streams always have equal length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStreams {
    pub s1: Vec<u32>,
    pub s2: Vec<u32>,
    pub vocab_size: usize,
    pub silence_index: u32,
    pub rate_hz: usize,
}

impl TokenStreams {
    pub fn new(s1: Vec<u32>, s2: Vec<u32>) -> Result<Self> {
        let streams = TokenStreams {
            s1,
            s2,
            vocab_size: VOCAB_SIZE,
            silence_index: SILENCE_INDEX,
            rate_hz: TOKEN_RATE_HZ,
        };
        streams.validate()?;
        Ok(streams)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s1.len() != self.s2.len() {
            return Err(Error::input(format!(
                "stream lengths differ: {} vs {}",
                self.s1.len(),
                self.s2.len()
            )));
        }
        if (self.silence_index as usize) >= self.vocab_size {
            return Err(Error::input(format!(
                "silence_index {} outside vocab of {}",
                self.silence_index, self.vocab_size
            )));
        }
        for (name, s) in [("s1", &self.s1), ("s2", &self.s2)] {
            if let Some(&bad) = s.iter().find(|&&t| (t as usize) >= self.vocab_size) {
                return Err(Error::input(format!(
                    "{name} contains token {bad} outside vocab of {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.s1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s1.is_empty()
    }

    pub fn stream(&self, role: u8) -> &[u32] {
        match role {
            1 => &self.s1,
            2 => &self.s2,
            _ => panic!("role must be 1 or 2"),
        }
    }
}

/// Per-position speaking state derived from which streams carry non-silence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activity {
    None,
    S1,
    S2,
    Both,
}

/// Wrap a single role's token sequence into dual streams, padding the other
/// role with silence.
pub fn pad_single_role(indices: &[u32], role: u8, silence_index: u32) -> Result<TokenStreams> {
    if indices.is_empty() {
        return Err(Error::input("cannot pad an empty token sequence"));
    }
    if role != 1 && role != 2 {
        return Err(Error::input(format!("role must be 1 or 2, got {role}")));
    }
    let silence = vec![silence_index; indices.len()];
    let (s1, s2) = if role == 1 {
        (indices.to_vec(), silence)
    } else {
        (silence, indices.to_vec())
    };
    TokenStreams::new(s1, s2)
}

/// Token-level activity mask: which streams are non-silent at each position.
pub fn active_speaker_mask(streams: &TokenStreams) -> Vec<Activity> {
    let sil = streams.silence_index;
    streams
        .s1
        .iter()
        .zip(&streams.s2)
        .map(|(&a, &b)| match (a != sil, b != sil) {
            (true, true) => Activity::Both,
            (true, false) => Activity::S1,
            (false, true) => Activity::S2,
            (false, false) => Activity::None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pad_role_one() {
        let s = pad_single_role(&[5, 7], 1, 0).unwrap();
        assert_eq!(s.s1, vec![5, 7]);
        assert_eq!(s.s2, vec![0, 0]);
    }

    #[test]
    fn pad_role_two() {
        let s = pad_single_role(&[3], 2, 0).unwrap();
        assert_eq!(s.s1, vec![0]);
        assert_eq!(s.s2, vec![3]);
    }

    #[test]
    fn pad_rejects_empty_and_bad_role() {
        assert!(pad_single_role(&[], 1, 0).is_err());
        assert!(pad_single_role(&[1], 0, 0).is_err());
        assert!(pad_single_role(&[1], 3, 0).is_err());
    }

    #[test]
    fn mask_examples() {
        let s = TokenStreams::new(vec![5, 0], vec![0, 9]).unwrap();
        assert_eq!(active_speaker_mask(&s), vec![Activity::S1, Activity::S2]);
        let s = TokenStreams::new(vec![5], vec![9]).unwrap();
        assert_eq!(active_speaker_mask(&s), vec![Activity::Both]);
        let s = TokenStreams::new(vec![0], vec![0]).unwrap();
        assert_eq!(active_speaker_mask(&s), vec![Activity::None]);
    }

    #[test]
    fn validation_rejects_mismatch_and_range() {
        assert!(TokenStreams::new(vec![1, 2], vec![3]).is_err());
        assert!(TokenStreams::new(vec![256], vec![0]).is_err());
        assert!(TokenStreams::new(vec![255], vec![0]).is_ok());
    }

    proptest! {
        #[test]
        fn pad_always_satisfies_stream_invariants(
            indices in proptest::collection::vec(0u32..256, 1..64),
            role in 1u8..=2,
        ) {
            let s = pad_single_role(&indices, role, 0).unwrap();
            prop_assert_eq!(s.s1.len(), s.s2.len());
            prop_assert!(s.validate().is_ok());
            let padded = if role == 1 { &s.s2 } else { &s.s1 };
            prop_assert!(padded.iter().all(|&t| t == 0));
            prop_assert_eq!(s.stream(role), &indices[..]);
        }
    }
}
