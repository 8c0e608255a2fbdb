//! Dialogue scripts: ordered speaker turns with frame-aligned extents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One speaker turn. Frame extents are video frames (25 fps), `end_frame`
/// exclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: u8,
    pub text: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// A two-party dialogue as an ordered turn list. Overlap between the two
/// speakers is allowed; a speaker never overlaps themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueScript {
    pub turns: Vec<Turn>,
}

impl DialogueScript {
    pub fn new(turns: Vec<Turn>) -> Result<Self> {
        let script = DialogueScript { turns };
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.turns.iter().enumerate() {
            if t.speaker != 1 && t.speaker != 2 {
                return Err(Error::input(format!(
                    "turn {i}: speaker must be 1 or 2, got {}",
                    t.speaker
                )));
            }
            if t.end_frame <= t.start_frame {
                return Err(Error::input(format!(
                    "turn {i}: end_frame {} must exceed start_frame {}",
                    t.end_frame, t.start_frame
                )));
            }
        }
        for w in self.turns.windows(2) {
            if w[1].start_frame < w[0].start_frame {
                return Err(Error::input(format!(
                    "turns not sorted by start_frame ({} after {})",
                    w[1].start_frame, w[0].start_frame
                )));
            }
        }
        // same-speaker turns may not overlap (different speakers may)
        for s in [1u8, 2u8] {
            let mine: Vec<&Turn> = self.turns.iter().filter(|t| t.speaker == s).collect();
            for w in mine.windows(2) {
                if w[1].start_frame < w[0].end_frame {
                    return Err(Error::input(format!(
                        "speaker {s} turns overlap: [{}, {}) and [{}, {})",
                        w[0].start_frame, w[0].end_frame, w[1].start_frame, w[1].end_frame
                    )));
                }
            }
        }
        Ok(())
    }

    /// Frame count needed to contain every turn.
    pub fn span_frames(&self) -> usize {
        self.turns.iter().map(|t| t.end_frame).max().unwrap_or(0)
    }

    /// Whether `speaker` has a turn covering video frame `frame`.
    pub fn is_active(&self, speaker: u8, frame: usize) -> bool {
        self.turns
            .iter()
            .any(|t| t.speaker == speaker && t.start_frame <= frame && frame < t.end_frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(speaker: u8, start: usize, end: usize) -> Turn {
        Turn {
            speaker,
            text: "hi".into(),
            start_frame: start,
            end_frame: end,
        }
    }

    #[test]
    fn valid_script_with_cross_speaker_overlap() {
        let s = DialogueScript::new(vec![turn(1, 0, 10), turn(2, 8, 20), turn(1, 20, 25)]);
        assert!(s.is_ok());
        let s = s.unwrap();
        assert_eq!(s.span_frames(), 25);
        assert!(s.is_active(1, 9));
        assert!(s.is_active(2, 9));
        assert!(!s.is_active(2, 7));
    }

    #[test]
    fn bad_speaker_id_rejected() {
        let e = DialogueScript::new(vec![turn(3, 0, 5)]).unwrap_err();
        assert!(e.to_string().contains("speaker"));
    }

    #[test]
    fn empty_extent_rejected() {
        assert!(DialogueScript::new(vec![turn(1, 5, 5)]).is_err());
        assert!(DialogueScript::new(vec![turn(1, 6, 5)]).is_err());
    }

    #[test]
    fn unsorted_rejected() {
        let e = DialogueScript::new(vec![turn(1, 10, 12), turn(2, 0, 5)]).unwrap_err();
        assert!(e.to_string().contains("sorted"));
    }

    #[test]
    fn same_speaker_overlap_rejected() {
        let e = DialogueScript::new(vec![turn(1, 0, 10), turn(1, 9, 15)]).unwrap_err();
        assert!(e.to_string().contains("overlap"));
        // abutting is fine: end is exclusive
        assert!(DialogueScript::new(vec![turn(1, 0, 10), turn(1, 10, 15)]).is_ok());
    }
}
