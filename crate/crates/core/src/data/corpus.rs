//! Corpus file I/O: one JSON record per line, bit-exact round trips.
//!
//! Reals ride on serde_json's shortest-round-trip float printing, so
//! `load(save(x)) == x` holds exactly. A small `<path>.meta.json` sidecar
//! records the generating config so consumers can rebuild the codebook.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consts::{FACE_EMBED_DIM, LATENT_DIM, N_MELS, REF_SHAPE, SPEAKER_EMBED_DIM};
use crate::data::script::{DialogueScript, Turn};
use crate::data::synth::{CorpusConfig, DialogueSample, SyntheticIdentity};
use crate::data::tokens::TokenStreams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IdentityRec {
    id: usize,
    face_embedding: Vec<f64>,
    ref_features: Vec<Vec<Vec<f64>>>,
    speaker_embedding: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleRec {
    id: usize,
    turns: Vec<Turn>,
    s1: Vec<u32>,
    s2: Vec<u32>,
    motion1: Vec<Vec<f64>>,
    motion2: Vec<Vec<f64>>,
    mel: Vec<Vec<f64>>,
    identity1: IdentityRec,
    identity2: IdentityRec,
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn rows_to_tensor(rows: &[Vec<f64>], width: usize, what: &str) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::input(format!(
                "{what} row {i} has width {}, expected {width}",
                row.len()
            )));
        }
        data.extend_from_slice(row);
    }
    Tensor::new(vec![rows.len(), width], data)
}

fn identity_to_rec(ident: &SyntheticIdentity) -> IdentityRec {
    let [h, w, c] = REF_SHAPE;
    let ref_features = (0..h)
        .map(|ih| {
            (0..w)
                .map(|iw| {
                    (0..c)
                        .map(|ic| ident.ref_features.data[(ih * w + iw) * c + ic])
                        .collect()
                })
                .collect()
        })
        .collect();
    IdentityRec {
        id: ident.id,
        face_embedding: ident.face_embedding.data.clone(),
        ref_features,
        speaker_embedding: ident.speaker_embedding.data.clone(),
    }
}

fn rec_to_identity(rec: &IdentityRec) -> Result<SyntheticIdentity> {
    let [h, w, c] = REF_SHAPE;
    if rec.face_embedding.len() != FACE_EMBED_DIM {
        return Err(Error::input(format!(
            "face_embedding has {} dims, expected {FACE_EMBED_DIM}",
            rec.face_embedding.len()
        )));
    }
    if rec.speaker_embedding.len() != SPEAKER_EMBED_DIM {
        return Err(Error::input(format!(
            "speaker_embedding has {} dims, expected {SPEAKER_EMBED_DIM}",
            rec.speaker_embedding.len()
        )));
    }
    let mut data = Vec::with_capacity(h * w * c);
    if rec.ref_features.len() != h {
        return Err(Error::input("ref_features has wrong height"));
    }
    for plane in &rec.ref_features {
        if plane.len() != w {
            return Err(Error::input("ref_features has wrong width"));
        }
        for cell in plane {
            if cell.len() != c {
                return Err(Error::input("ref_features has wrong channel count"));
            }
            data.extend_from_slice(cell);
        }
    }
    Ok(SyntheticIdentity {
        id: rec.id,
        face_embedding: Tensor::new(vec![FACE_EMBED_DIM], rec.face_embedding.clone())?,
        ref_features: Tensor::new(REF_SHAPE.to_vec(), data)?,
        speaker_embedding: Tensor::new(vec![SPEAKER_EMBED_DIM], rec.speaker_embedding.clone())?,
    })
}

fn sample_to_rec(s: &DialogueSample) -> SampleRec {
    SampleRec {
        id: s.id,
        turns: s.script.turns.clone(),
        s1: s.streams.s1.clone(),
        s2: s.streams.s2.clone(),
        motion1: tensor_to_rows(&s.motion[0]),
        motion2: tensor_to_rows(&s.motion[1]),
        mel: tensor_to_rows(&s.mel),
        identity1: identity_to_rec(&s.identities[0]),
        identity2: identity_to_rec(&s.identities[1]),
    }
}

fn rec_to_sample(rec: SampleRec) -> Result<DialogueSample> {
    let script = DialogueScript::new(rec.turns)?;
    let streams = TokenStreams::new(rec.s1, rec.s2)?;
    let sample = DialogueSample {
        id: rec.id,
        script,
        streams,
        motion: [
            rows_to_tensor(&rec.motion1, LATENT_DIM, "motion1")?,
            rows_to_tensor(&rec.motion2, LATENT_DIM, "motion2")?,
        ],
        mel: rows_to_tensor(&rec.mel, N_MELS, "mel")?,
        identities: [
            rec_to_identity(&rec.identity1)?,
            rec_to_identity(&rec.identity2)?,
        ],
    };
    for t in [&sample.motion[0], &sample.motion[1], &sample.mel] {
        if !t.is_finite() {
            return Err(Error::input("non-finite value in sample"));
        }
    }
    Ok(sample)
}

/// Write one JSON record per line; atomic via a temp file + rename.
pub fn save_corpus(samples: &[DialogueSample], path: &Path) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut out = BufWriter::new(fs::File::create(&tmp)?);
        for s in samples {
            let rec = sample_to_rec(s);
            let line = serde_json::to_string(&rec)
                .map_err(|e| Error::input(format!("serialize sample {}: {e}", s.id)))?;
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<DialogueSample>> {
    let file = fs::File::open(path)?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRec = serde_json::from_str(&line)
            .map_err(|e| Error::format(i + 1, format!("bad record: {e}")))?;
        let sample = rec_to_sample(rec).map_err(|e| Error::format(i + 1, e.to_string()))?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Sidecar describing how a corpus file was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub format_version: u32,
    pub n_samples: usize,
    pub config: CorpusConfig,
}

impl CorpusMeta {
    pub fn new(config: CorpusConfig, n_samples: usize) -> CorpusMeta {
        CorpusMeta {
            format_version: FORMAT_VERSION,
            n_samples,
            config,
        }
    }

    pub fn path_for(corpus_path: &Path) -> PathBuf {
        let mut name = corpus_path.file_name().unwrap_or_default().to_os_string();
        name.push(".meta.json");
        corpus_path.with_file_name(name)
    }

    pub fn save(&self, corpus_path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::input(format!("serialize corpus meta: {e}")))?;
        fs::write(Self::path_for(corpus_path), text)?;
        Ok(())
    }

    pub fn load(corpus_path: &Path) -> Result<CorpusMeta> {
        let p = Self::path_for(corpus_path);
        let text = fs::read_to_string(&p)?;
        serde_json::from_str(&text).map_err(|e| Error::format(1, format!("bad corpus meta: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_corpus;

    fn tiny_corpus() -> Vec<DialogueSample> {
        synth_corpus(&CorpusConfig {
            n_samples: 3,
            n_identities: 2,
            tokens_per_sample: 120,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let samples = tiny_corpus();
        save_corpus(&samples, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(samples, loaded);
        // and a second save of the loaded corpus writes identical bytes
        let path2 = dir.path().join("again.jsonl");
        save_corpus(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_corpus(&[], &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), vec![]);
    }

    #[test]
    fn truncated_line_is_a_format_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&tiny_corpus(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let cut = format!("{}\n{}\n", lines[0], &lines[1][..lines[1].len() / 2]);
        fs::write(&path, cut).unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn garbage_and_missing_fields_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "not json at all\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        fs::write(&path, "{\"id\": 0}\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn meta_sidecar_round_trips_and_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let samples = tiny_corpus();
        save_corpus(&samples, &path).unwrap();
        // loading works with no sidecar present
        assert!(load_corpus(&path).is_ok());
        assert!(CorpusMeta::load(&path).is_err());
        let meta = CorpusMeta::new(
            CorpusConfig {
                n_samples: 3,
                n_identities: 2,
                tokens_per_sample: 120,
                ..CorpusConfig::default()
            },
            samples.len(),
        );
        meta.save(&path).unwrap();
        assert_eq!(CorpusMeta::load(&path).unwrap(), meta);
    }
}
