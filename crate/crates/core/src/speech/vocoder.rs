//! Toy vocoder: renders mel frames with a bank of 80 sinusoids on a log
//! frequency grid, one oscillator per mel bin, 320 samples per frame at
//! 16 kHz. Phase accumulates across the whole waveform so frame boundaries
//! step only in amplitude, never in phase. Not a speech vocoder — a
//! deterministic, invertible-enough stand-in that keeps the framing
//! arithmetic honest.

use std::path::Path;

use crate::consts::{HOP_SAMPLES, N_MELS, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const F_LO_HZ: f64 = 80.0;
const F_HI_HZ: f64 = 7600.0;

/// Center frequency of each mel bin, log-spaced from 80 Hz to 7.6 kHz.
pub fn bin_frequencies() -> Vec<f64> {
    (0..N_MELS)
        .map(|b| F_LO_HZ * (F_HI_HZ / F_LO_HZ).powf(b as f64 / (N_MELS - 1) as f64))
        .collect()
}

/// Render mel frames to samples: x[n] = Σ_b mel[t(n), b]·sin(φ_b[n]) / N,
/// with φ_b advancing by 2π·f_b/sr every sample from the start of the clip.
pub fn toy_vocoder(mel: &Tensor) -> Result<Vec<f64>> {
    if mel.shape().len() != 2 || mel.cols() != N_MELS {
        return Err(Error::input(format!(
            "vocoder expects T x {N_MELS} mel frames, got {:?}",
            mel.shape()
        )));
    }
    if !mel.is_finite() {
        return Err(Error::input("mel contains non-finite values"));
    }
    let freqs = bin_frequencies();
    let dphase: Vec<f64> =
        freqs.iter().map(|f| std::f64::consts::TAU * f / SAMPLE_RATE_HZ as f64).collect();
    let frames = mel.rows();
    let mut out = Vec::with_capacity(frames * HOP_SAMPLES);
    let mut phase = vec![0.0f64; N_MELS];
    for t in 0..frames {
        let amps = mel.row(t);
        for _ in 0..HOP_SAMPLES {
            let mut x = 0.0;
            for b in 0..N_MELS {
                x += amps[b] * phase[b].sin();
                phase[b] += dphase[b];
                if phase[b] > std::f64::consts::TAU {
                    phase[b] -= std::f64::consts::TAU;
                }
            }
            out.push(x / N_MELS as f64);
        }
    }
    Ok(out)
}

fn wav_err(what: &str, path: &Path, e: hound::Error) -> Error {
    Error::Io(std::io::Error::other(format!("{what} {}: {e}", path.display())))
}

/// 16-bit PCM mono at 16 kHz; samples clamp to [−1, 1] before quantization.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE_HZ as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| wav_err("creating", path, e))?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(|e| wav_err("writing", path, e))?;
    }
    writer.finalize().map_err(|e| wav_err("finalizing", path, e))
}

/// Read a waveform written by `write_wav` back to floats in [−1, 1].
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| wav_err("opening", path, e))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE_HZ as u32
        || spec.bits_per_sample != 16
    {
        return Err(Error::input(format!(
            "expected mono 16-bit {SAMPLE_RATE_HZ} Hz, got {} ch / {} bit / {} Hz",
            spec.channels, spec.bits_per_sample, spec.sample_rate
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| s.map(|q| q as f64 / 32767.0).map_err(|e| wav_err("reading", path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn sample_count_is_exactly_320_per_frame() {
        for frames in [1usize, 3, 14] {
            let mel = Tensor::rand_normal(&[frames, N_MELS], &mut rng_from_seed(frames as u64));
            let wav = toy_vocoder(&mel).unwrap();
            assert_eq!(wav.len(), HOP_SAMPLES * frames);
        }
    }

    #[test]
    fn zero_mel_renders_silence() {
        let wav = toy_vocoder(&Tensor::zeros(&[5, N_MELS])).unwrap();
        assert!(wav.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rendering_is_bit_deterministic() {
        let mel = Tensor::rand_normal(&[4, N_MELS], &mut rng_from_seed(2));
        assert_eq!(toy_vocoder(&mel).unwrap(), toy_vocoder(&mel).unwrap());
    }

    #[test]
    fn single_bin_matches_a_continuous_sinusoid_across_frames() {
        // constant amplitude in one bin over several frames: the waveform is
        // one uninterrupted sinusoid, so no frame-boundary jump exceeds the
        // per-sample slope bound 2·sin(π·f/sr)·amp
        let bin = 17;
        let amp = 0.8;
        let mut mel = Tensor::zeros(&[3, N_MELS]);
        for t in 0..3 {
            mel.set(t, bin, amp);
        }
        let wav = toy_vocoder(&mel).unwrap();
        let f = bin_frequencies()[bin];
        let bound = 2.0 * (std::f64::consts::PI * f / SAMPLE_RATE_HZ as f64).sin() * amp
            / N_MELS as f64;
        for n in 1..wav.len() {
            let step = (wav[n] - wav[n - 1]).abs();
            assert!(step <= bound + 1e-12, "jump {step} at sample {n} exceeds {bound}");
        }
        // and the samples agree with the closed form sin(2π·f·n/sr)
        for (n, &x) in wav.iter().enumerate() {
            let want = amp * (std::f64::consts::TAU * f * n as f64 / SAMPLE_RATE_HZ as f64).sin()
                / N_MELS as f64;
            assert!((x - want).abs() < 1e-6, "sample {n}: {x} vs {want}");
        }
    }

    #[test]
    fn frequencies_are_log_spaced_and_in_band() {
        let f = bin_frequencies();
        assert_eq!(f.len(), N_MELS);
        assert!((f[0] - F_LO_HZ).abs() < 1e-9);
        assert!((f[N_MELS - 1] - F_HI_HZ).abs() < 1e-9);
        let ratio = f[1] / f[0];
        for b in 2..N_MELS {
            assert!((f[b] / f[b - 1] - ratio).abs() < 1e-9, "bin {b} off the log grid");
        }
        assert!(f[N_MELS - 1] < SAMPLE_RATE_HZ as f64 / 2.0, "top bin above Nyquist");
    }

    #[test]
    fn wrong_mel_width_is_rejected() {
        assert!(toy_vocoder(&Tensor::zeros(&[3, N_MELS + 1])).is_err());
        let mut bad = Tensor::zeros(&[2, N_MELS]);
        bad.set(0, 0, f64::NAN);
        assert!(toy_vocoder(&bad).is_err());
    }

    #[test]
    fn wav_round_trip_preserves_length_and_values_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.wav");
        let mel = Tensor::rand_normal(&[2, N_MELS], &mut rng_from_seed(3));
        let wav = toy_vocoder(&mel).unwrap();
        write_wav(&path, &wav).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), wav.len());
        for (a, b) in wav.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 32767.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn wav_files_carry_the_standard_riff_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("header.wav");
        write_wav(&path, &[0.0, 0.5, -0.5, 1.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"RIFF");
        assert_eq!(&bytes[8..12], b"WAVE");
        // 4 samples · 2 bytes after the 44-byte canonical header
        assert_eq!(bytes.len(), 44 + 8);
    }
}
