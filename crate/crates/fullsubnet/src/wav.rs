//! Waveform file I/O: 16 kHz mono RIFF/WAVE, 16-bit PCM or 32-bit float.
//!
//! PCM16 samples map to [−1, 1) by dividing by 32768; writing inverts that
//! with round-half-away-from-zero and saturating clamping, so a PCM16 round
//! trip moves a sample by at most one quantization step. Float32 data round
//! trips exactly. Anything else — stereo, other rates, other codecs —
//! is refused with an error naming the offending file.

use std::path::Path;

use crate::{Error, Result, SAMPLE_RATE};

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    /// 16-bit signed integer PCM.
    Pcm16,
    /// 32-bit IEEE float.
    Float32,
}

fn decode_err(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::WavDecode(format!("{}: {what}", path.display()))
}

/// Reads a 16 kHz mono WAV file into normalized `f64` samples.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| decode_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(decode_err(
            path,
            format!("{} channels; only mono input is supported", spec.channels),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(decode_err(
            path,
            format!("sample rate {} Hz; input must be {} Hz", spec.sample_rate, SAMPLE_RATE),
        ));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0).map_err(|e| decode_err(path, e)))
            .collect(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64).map_err(|e| decode_err(path, e)))
            .collect(),
        (fmt, bits) => Err(decode_err(
            path,
            format!("{bits}-bit {fmt:?} codec; only 16-bit PCM and 32-bit float are supported"),
        )),
    }
}

/// Writes normalized samples as a 16 kHz mono WAV file in the chosen
/// encoding.
pub fn write_wav(path: &Path, samples: &[f64], format: WavFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| decode_err(path, e))?;
    match format {
        WavFormat::Pcm16 => {
            for &v in samples {
                // f64::round is round-half-away-from-zero; clamp saturates
                // out-of-range peaks instead of wrapping.
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q).map_err(|e| decode_err(path, e))?;
            }
        }
        WavFormat::Float32 => {
            for &v in samples {
                writer.write_sample(v as f32).map_err(|e| decode_err(path, e))?;
            }
        }
    }
    writer.finalize().map_err(|e| decode_err(path, e))?;
    Ok(())
}
