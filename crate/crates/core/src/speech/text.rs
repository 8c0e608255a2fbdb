//! Character-level dialogue text tokenizer with speaker-turn separators.
//!
//! Each turn is emitted as its speaker's separator symbol followed by the
//! character ids of its text, so between any two consecutive turns exactly
//! one separator appears. Round-trips are exact on (speaker, text) pairs;
//! turn timing lives in the script, not in the token sequence.

use crate::data::script::DialogueScript;
use crate::error::{Error, Result};

/// Separator announcing a speaker-1 turn.
pub const SEP_S1: u32 = 0;
/// Separator announcing a speaker-2 turn.
pub const SEP_S2: u32 = 1;
const SPACE: u32 = 2;
const CHAR_BASE: u32 = 3;
/// Two separators + space + 'a'..='z'.
pub const TEXT_VOCAB_SIZE: usize = 29;

fn char_id(c: char) -> Result<u32> {
    match c {
        ' ' => Ok(SPACE),
        'a'..='z' => Ok(CHAR_BASE + (c as u32 - 'a' as u32)),
        other => Err(Error::input(format!(
            "character {other:?} is outside the text vocabulary (lowercase letters and spaces)"
        ))),
    }
}

fn id_char(id: u32) -> Result<char> {
    match id {
        SPACE => Ok(' '),
        _ if (CHAR_BASE..TEXT_VOCAB_SIZE as u32).contains(&id) => {
            Ok((b'a' + (id - CHAR_BASE) as u8) as char)
        }
        other => Err(Error::input(format!("text token {other} out of range"))),
    }
}

pub fn tokenize_text(script: &DialogueScript) -> Result<Vec<u32>> {
    if script.turns.is_empty() {
        return Err(Error::input("cannot tokenize an empty script"));
    }
    let mut out = Vec::new();
    for turn in &script.turns {
        if turn.text.is_empty() {
            return Err(Error::input(format!(
                "turn starting at frame {} has empty text",
                turn.start_frame
            )));
        }
        out.push(match turn.speaker {
            1 => SEP_S1,
            2 => SEP_S2,
            s => return Err(Error::input(format!("unknown speaker {s}"))),
        });
        for c in turn.text.chars() {
            out.push(char_id(c)?);
        }
    }
    Ok(out)
}

/// Inverse of `tokenize_text` up to turn timing: recovers the
/// (speaker, text) sequence.
pub fn detokenize(ids: &[u32]) -> Result<Vec<(u8, String)>> {
    if ids.is_empty() {
        return Err(Error::input("cannot detokenize an empty sequence"));
    }
    let mut turns: Vec<(u8, String)> = Vec::new();
    for &id in ids {
        match id {
            SEP_S1 => turns.push((1, String::new())),
            SEP_S2 => turns.push((2, String::new())),
            other => match turns.last_mut() {
                None => {
                    return Err(Error::input(
                        "text token stream must start with a speaker separator",
                    ))
                }
                Some((_, text)) => text.push(id_char(other)?),
            },
        }
    }
    if let Some((s, t)) = turns.iter().find(|(_, t)| t.is_empty()) {
        return Err(Error::input(format!("speaker-{s} turn {t:?} decoded empty")));
    }
    Ok(turns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::script::Turn;

    fn script(turns: &[(u8, &str, usize, usize)]) -> DialogueScript {
        DialogueScript::new(
            turns
                .iter()
                .map(|&(speaker, text, start_frame, end_frame)| Turn {
                    speaker,
                    text: text.to_string(),
                    start_frame,
                    end_frame,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trips_speakers_and_text() {
        let s = script(&[(1, "hello there", 0, 10), (2, "yes", 12, 18), (1, "ok", 20, 24)]);
        let ids = tokenize_text(&s).unwrap();
        let got = detokenize(&ids).unwrap();
        let want: Vec<(u8, String)> = s
            .turns
            .iter()
            .map(|t| (t.speaker, t.text.clone()))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn one_separator_sits_between_consecutive_turns() {
        let s = script(&[(1, "hi", 0, 4), (2, "no", 6, 10)]);
        let ids = tokenize_text(&s).unwrap();
        let sep_positions: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == SEP_S1 || id == SEP_S2)
            .map(|(i, _)| i)
            .collect();
        // one at the very start, exactly one between the turns
        assert_eq!(sep_positions, vec![0, 3]);
    }

    #[test]
    fn empty_script_and_empty_turn_are_input_errors() {
        assert!(tokenize_text(&DialogueScript::new(vec![]).unwrap()).is_err());
        let s = script(&[(1, "", 0, 4)]);
        assert!(tokenize_text(&s).is_err());
    }

    #[test]
    fn unknown_character_error_names_the_character() {
        let s = script(&[(1, "Hi!", 0, 4)]);
        let err = tokenize_text(&s).unwrap_err();
        assert!(err.to_string().contains("'H'"), "got: {err}");
    }

    #[test]
    fn all_ids_stay_in_vocabulary_range() {
        let s = script(&[(1, "the quick brown fox jumps over a lazy dog", 0, 40)]);
        let ids = tokenize_text(&s).unwrap();
        assert!(ids.iter().all(|&id| (id as usize) < TEXT_VOCAB_SIZE));
    }

    #[test]
    fn dangling_or_separator_free_sequences_are_rejected() {
        assert!(detokenize(&[]).is_err());
        assert!(detokenize(&[5, 6]).is_err(), "must start with a separator");
        assert!(detokenize(&[SEP_S1]).is_err(), "separator with no text");
        assert!(detokenize(&[SEP_S1, 99]).is_err(), "out-of-range id");
    }
}
