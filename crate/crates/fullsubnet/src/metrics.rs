//! Objective evaluation: scale-invariant signal-to-distortion ratio,
//! spectral error, and per-clip/aggregate report generation.
//!
//! SI-SDR projects the estimate onto the reference (α = ⟨est,ref⟩/‖ref‖²)
//! and reports the energy ratio of the projection to the residual in dB.
//! Values are capped to [−60, +100] so perfect reconstructions and total
//! misses stay finite and comparable. Signals here are zero-mean by
//! construction, so no mean removal is applied.

use std::io::Write;

use serde::Serialize;

use crate::dsp::{magnitude, stft, StftConfig};
use crate::{Error, Result};

/// Lower cap on reported SI-SDR, in dB.
pub const SI_SDR_FLOOR: f64 = -60.0;

/// Upper cap on reported SI-SDR, in dB.
pub const SI_SDR_CEIL: f64 = 100.0;

/// Scale-invariant signal-to-distortion ratio of `estimate` against
/// `reference`, in dB, capped to [−60, +100].
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut rr = 0.0f64;
    for (&e, &r) in estimate.iter().zip(reference) {
        dot += e * r;
        rr += r * r;
    }
    if rr <= 0.0 {
        return Err(Error::invalid("SI-SDR needs a nonzero reference"));
    }
    let alpha = dot / rr;
    let signal = alpha * alpha * rr;
    let mut distortion = 0.0f64;
    for (&e, &r) in estimate.iter().zip(reference) {
        let d = alpha * r - e;
        distortion += d * d;
    }
    // A silent (or orthogonal) estimate has no target component at all, so
    // the floor wins even though its distortion is also zero.
    if signal <= 0.0 {
        return Ok(SI_SDR_FLOOR);
    }
    if distortion <= 0.0 {
        return Ok(SI_SDR_CEIL);
    }
    Ok((10.0 * (signal / distortion).log10()).clamp(SI_SDR_FLOOR, SI_SDR_CEIL))
}

/// Mean squared magnitude-spectrogram error between two equal-length
/// waveforms.
pub fn spectral_mse(estimate: &[f64], reference: &[f64], cfg: &StftConfig) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let me = magnitude(&stft(estimate, cfg)?);
    let mr = magnitude(&stft(reference, cfg)?);
    let mut sum = 0.0f64;
    for (&a, &b) in me.data.iter().zip(&mr.data) {
        let d = a - b;
        sum += d * d;
    }
    Ok(sum / me.data.len() as f64)
}

/// One clip queued for evaluation.
#[derive(Debug, Clone)]
pub struct EvalClip {
    pub clip_id: String,
    pub reverberant: bool,
    /// The degraded input fed to the enhancer.
    pub noisy: Vec<f64>,
    /// The speech-image reference both metrics compare against.
    pub reference: Vec<f64>,
}

/// Per-clip metric row.
#[derive(Debug, Clone, Serialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub reverberant: bool,
    pub si_sdr: f64,
    pub noisy_si_sdr: f64,
    pub spectral_mse: f64,
}

/// Arithmetic means over a group of clips.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub si_sdr: f64,
    pub noisy_si_sdr: f64,
    pub spectral_mse: f64,
}

impl Aggregate {
    fn over(rows: &[&ClipScore]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(Self {
            count: rows.len(),
            si_sdr: rows.iter().map(|r| r.si_sdr).sum::<f64>() / n,
            noisy_si_sdr: rows.iter().map(|r| r.noisy_si_sdr).sum::<f64>() / n,
            spectral_mse: rows.iter().map(|r| r.spectral_mse).sum::<f64>() / n,
        })
    }
}

/// Full evaluation outcome: every clip row plus aggregates overall and split
/// by the reverberant flag.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub clips: Vec<ClipScore>,
    pub overall: Aggregate,
    pub with_reverb: Option<Aggregate>,
    pub without_reverb: Option<Aggregate>,
}

impl EvalReport {
    fn assemble(clips: Vec<ClipScore>) -> Result<Self> {
        let all: Vec<&ClipScore> = clips.iter().collect();
        let overall =
            Aggregate::over(&all).ok_or_else(|| Error::invalid("cannot evaluate an empty set"))?;
        let wet: Vec<&ClipScore> = clips.iter().filter(|c| c.reverberant).collect();
        let dry: Vec<&ClipScore> = clips.iter().filter(|c| !c.reverberant).collect();
        Ok(Self {
            with_reverb: Aggregate::over(&wet),
            without_reverb: Aggregate::over(&dry),
            overall,
            clips,
        })
    }

    /// One CSV row per clip under a fixed header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "clip_id,reverberant,si_sdr,noisy_si_sdr,spectral_mse")?;
        for c in &self.clips {
            writeln!(
                w,
                "{},{},{},{},{}",
                c.clip_id, c.reverberant, c.si_sdr, c.noisy_si_sdr, c.spectral_mse
            )?;
        }
        Ok(())
    }

    /// The aggregate block as pretty-printed JSON.
    pub fn aggregate_json(&self) -> String {
        #[derive(Serialize)]
        struct Block<'a> {
            overall: &'a Aggregate,
            with_reverb: &'a Option<Aggregate>,
            without_reverb: &'a Option<Aggregate>,
        }
        serde_json::to_string_pretty(&Block {
            overall: &self.overall,
            with_reverb: &self.with_reverb,
            without_reverb: &self.without_reverb,
        })
        .expect("aggregates serialize")
    }
}

/// Runs `enhance` on every clip and scores the outputs against the clip
/// references.
pub fn evaluate_set<F>(mut enhance: F, clips: &[EvalClip], cfg: &StftConfig) -> Result<EvalReport>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if clips.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    let mut rows = Vec::with_capacity(clips.len());
    for clip in clips {
        let enhanced = enhance(&clip.noisy)?;
        rows.push(ClipScore {
            clip_id: clip.clip_id.clone(),
            reverberant: clip.reverberant,
            si_sdr: si_sdr(&enhanced, &clip.reference)?,
            noisy_si_sdr: si_sdr(&clip.noisy, &clip.reference)?,
            spectral_mse: spectral_mse(&enhanced, &clip.reference, cfg)?,
        });
    }
    EvalReport::assemble(rows)
}
