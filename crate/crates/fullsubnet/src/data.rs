//! Desk-scale dataset synthesis: harmonic clean sources, exponential-decay
//! room responses, SNR-controlled dynamic mixing, and fixed-length sequence
//! chunking.
//!
//! Every item is reproducible from a seed. An epoch draws, per item: a clean
//! utterance, a noise take, a per-item seed, a reverberation coin (weight
//! 0.75), a decay time from a fixed list when reverberant, and an SNR
//! uniform on [−5, 20] dB — in exactly that order, so a reseeded run yields
//! bit-identical pairs. The training target is always computed against the
//! (possibly reverberant) speech image, never the dry source: the task is
//! denoising, and reverberation stays in the reference.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;

use crate::dsp::{magnitude, stft, Grid, StftConfig};
use crate::mask::{compress_crm, compute_cirm, Crm, CrmConfig};
use crate::{Error, Result};

/// Probability that an item's clean source is convolved with a room
/// response.
pub const REVERB_PROB: f64 = 0.75;

/// Decay times the mixer draws from, in seconds.
pub const T60_CHOICES: [f64; 6] = [0.16, 0.3, 0.36, 0.6, 0.61, 0.7];

/// Inclusive lower edge of the mixing SNR range, in dB.
pub const SNR_LO_DB: f64 = -5.0;

/// Exclusive upper edge of the mixing SNR range, in dB.
pub const SNR_HI_DB: f64 = 20.0;

/// Everything needed to re-render one mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSpec {
    /// Requested speech-image-to-noise ratio in dB.
    pub snr_db: f64,
    /// Whether the clean source was passed through a room response.
    pub reverberant: bool,
    /// Decay time of that response, when present.
    pub rir_t60: Option<f64>,
    /// Seed for the item's room-response noise.
    pub seed: u64,
}

/// One fixed-length training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Noisy magnitude spectrogram, `chunk_len x F`.
    pub noisy_mag: Grid,
    /// Compressed complex-mask target, `chunk_len x F` per channel.
    pub target: Crm,
    /// Leading frames that carry real data; the zero-padded remainder is
    /// excluded from the loss.
    pub valid_frames: usize,
    /// How the underlying mixture was made.
    pub spec: MixSpec,
}

/// The waveforms behind one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedMix {
    /// Speech image plus scaled noise.
    pub mixture: Vec<f64>,
    /// The (possibly reverberant) speech image — the training reference.
    pub image: Vec<f64>,
    /// Noise after looping/cropping and SNR gain.
    pub scaled_noise: Vec<f64>,
}

/// Amplitude decay `e^{-t * 3 ln10 / t60}`: down to 1e-3 (−60 dB in energy)
/// at `t = t60`.
fn decay_envelope(t: f64, t60: f64) -> f64 {
    (-t * 3.0 * std::f64::consts::LN_10 / t60).exp()
}

/// One standard-normal draw via Box–Muller.
fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Synthesizes a room impulse response: white noise shaped by an
/// exponential decay that falls 60 dB over `t60`, normalized to unit
/// energy.
pub fn synth_rir(t60: f64, fs: u32, length: usize, seed: u64) -> Result<Vec<f64>> {
    if !(t60 > 0.0) || !t60.is_finite() {
        return Err(Error::invalid(format!("decay time must be positive, got {t60}")));
    }
    if fs == 0 || length == 0 {
        return Err(Error::invalid("room response needs a positive rate and length"));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut h: Vec<f64> = (0..length)
        .map(|i| gaussian(&mut rng) * decay_envelope(i as f64 / fs as f64, t60))
        .collect();
    let energy: f64 = h.iter().map(|&v| v * v).sum();
    if energy <= 0.0 {
        return Err(Error::invalid("degenerate room response"));
    }
    let scale = 1.0 / energy.sqrt();
    for v in &mut h {
        *v *= scale;
    }
    Ok(h)
}

/// Estimates a response's decay time by backward-integrating its energy and
/// fitting the −5..−25 dB stretch of the decay curve.
pub fn schroeder_t60(rir: &[f64], fs: u32) -> Result<f64> {
    if rir.is_empty() || fs == 0 {
        return Err(Error::invalid("decay estimation needs samples and a rate"));
    }
    let mut tail = vec![0.0f64; rir.len()];
    let mut acc = 0.0;
    for i in (0..rir.len()).rev() {
        acc += rir[i] * rir[i];
        tail[i] = acc;
    }
    if acc <= 0.0 {
        return Err(Error::invalid("silent response has no decay curve"));
    }
    // Least-squares line through (t, level) points inside the fit window.
    let (mut n, mut st, mut sl, mut stt, mut stl) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for (i, &e) in tail.iter().enumerate() {
        let level = 10.0 * (e / acc).log10();
        if level <= -5.0 && level >= -25.0 {
            let t = i as f64 / fs as f64;
            n += 1.0;
            st += t;
            sl += level;
            stt += t * t;
            stl += t * level;
        }
    }
    if n < 2.0 {
        return Err(Error::invalid("too few samples inside the decay fit window"));
    }
    let denom = n * stt - st * st;
    if denom.abs() <= f64::EPSILON {
        return Err(Error::invalid("degenerate decay fit"));
    }
    let slope = (n * stl - st * sl) / denom;
    if slope >= 0.0 {
        return Err(Error::invalid("energy does not decay"));
    }
    Ok(-60.0 / slope)
}

/// Full linear convolution (length `a + b − 1`), via FFT.
pub fn convolve_full(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fb.resize(n, Complex64::new(0.0, 0.0));
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut fa);
    let scale = 1.0 / n as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Loops or crops `noise` to exactly `len` samples.
pub fn fit_length(noise: &[f64], len: usize) -> Result<Vec<f64>> {
    if noise.is_empty() {
        return Err(Error::invalid("cannot fit an empty noise take"));
    }
    Ok((0..len).map(|i| noise[i % noise.len()]).collect())
}

/// Scales noise so the mixture hits `snr_db`, then adds it to the speech.
/// Noise is looped/cropped to the speech length first. Returns the mixture
/// and the scaled noise.
pub fn mix_at_snr(speech: &[f64], noise: &[f64], snr_db: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if speech.is_empty() {
        return Err(Error::invalid("cannot mix empty speech"));
    }
    let fitted = fit_length(noise, speech.len())?;
    let p_s: f64 = speech.iter().map(|&v| v * v).sum();
    let p_n: f64 = fitted.iter().map(|&v| v * v).sum();
    if p_s <= 0.0 || p_n <= 0.0 {
        return Err(Error::invalid("zero-energy input cannot be mixed at an SNR"));
    }
    let g = (p_s / (p_n * 10.0f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = fitted.iter().map(|&v| g * v).collect();
    let mixture = speech.iter().zip(&scaled).map(|(&s, &n)| s + n).collect();
    Ok((mixture, scaled))
}

/// Energy ratio of two waveforms in dB.
pub fn energy_ratio_db(signal: &[f64], other: &[f64]) -> Result<f64> {
    let p_s: f64 = signal.iter().map(|&v| v * v).sum();
    let p_o: f64 = other.iter().map(|&v| v * v).sum();
    if p_s <= 0.0 || p_o <= 0.0 {
        return Err(Error::invalid("energy ratio needs two nonzero signals"));
    }
    Ok(10.0 * (p_s / p_o).log10())
}

/// Synthesizes a speech-like clean source: a harmonic stack with random
/// fundamental in [100, 300] Hz, per-harmonic phase, and slow amplitude
/// modulation. RMS-normalized to 0.1.
pub fn synth_voice(length: usize, fs: u32, rng: &mut impl Rng) -> Vec<f64> {
    if length == 0 || fs == 0 {
        return Vec::new();
    }
    let f0 = rng.gen_range(100.0..300.0);
    let n_harm = ((0.45 * fs as f64 / f0).floor() as usize).clamp(1, 24);
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let am_rate = rng.gen_range(2.0..8.0);
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let mut x = vec![0.0f64; length];
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / fs as f64;
        let env = 0.3 + 0.7 * 0.5 * (1.0 + (2.0 * PI * am_rate * t + am_phase).sin());
        let mut s = 0.0;
        for (k, &ph) in phases.iter().enumerate() {
            let h = (k + 1) as f64;
            s += (2.0 * PI * h * f0 * t + ph).sin() / h;
        }
        *v = env * s;
    }
    normalize_rms(&mut x, 0.1);
    x
}

/// Synthesizes a white-noise take, RMS-normalized to 0.1.
pub fn synth_noise(length: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut x: Vec<f64> = (0..length).map(|_| gaussian(rng)).collect();
    normalize_rms(&mut x, 0.1);
    x
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let p: f64 = x.iter().map(|&v| v * v).sum();
    if p <= 0.0 || x.is_empty() {
        return;
    }
    let scale = target / (p / x.len() as f64).sqrt();
    for v in x.iter_mut() {
        *v *= scale;
    }
}

/// Draws one epoch item: clean index, noise index, and the mix recipe.
/// The draw order is part of the determinism contract.
pub fn draw_item(rng: &mut impl Rng, n_clean: usize, n_noise: usize) -> Result<(usize, usize, MixSpec)> {
    if n_clean == 0 || n_noise == 0 {
        return Err(Error::invalid("dynamic mixing needs non-empty clean and noise sets"));
    }
    let clean_idx = rng.gen_range(0..n_clean);
    let noise_idx = rng.gen_range(0..n_noise);
    let seed = rng.gen::<u64>();
    let reverberant = rng.gen::<f64>() < REVERB_PROB;
    let rir_t60 = if reverberant {
        Some(T60_CHOICES[rng.gen_range(0..T60_CHOICES.len())])
    } else {
        None
    };
    let snr_db = rng.gen_range(SNR_LO_DB..SNR_HI_DB);
    Ok((clean_idx, noise_idx, MixSpec { snr_db, reverberant, rir_t60, seed }))
}

/// Renders the waveforms for one item: convolve when reverberant (full tail
/// kept, no delay compensation), then mix at the requested SNR against the
/// image's power.
pub fn render_mixture(speech: &[f64], noise: &[f64], spec: &MixSpec, fs: u32) -> Result<RenderedMix> {
    let image = if spec.reverberant {
        let t60 = spec
            .rir_t60
            .ok_or_else(|| Error::invalid("reverberant item without a decay time"))?;
        let rir_len = (t60 * fs as f64).ceil() as usize;
        let rir = synth_rir(t60, fs, rir_len, spec.seed)?;
        convolve_full(speech, &rir)
    } else {
        speech.to_vec()
    };
    let (mixture, scaled_noise) = mix_at_snr(&image, noise, spec.snr_db)?;
    Ok(RenderedMix { mixture, image, scaled_noise })
}

/// Splits one utterance's features into non-overlapping `chunk_len`-frame
/// pairs. A short remainder (or a whole short utterance) becomes one
/// zero-padded chunk whose pad frames are excluded from the loss via
/// `valid_frames`.
pub fn chunk_sequences(
    noisy_mag: &Grid,
    target: &Crm,
    chunk_len: usize,
    spec: MixSpec,
) -> Result<Vec<TrainingPair>> {
    if chunk_len == 0 {
        return Err(Error::invalid("chunk length must be positive"));
    }
    if noisy_mag.frames != target.frames || noisy_mag.bins != target.bins {
        return Err(Error::shape(format!(
            "features are {}x{} but targets are {}x{}",
            noisy_mag.frames, noisy_mag.bins, target.frames, target.bins
        )));
    }
    let frames = noisy_mag.frames;
    if frames == 0 {
        return Err(Error::invalid("cannot chunk an empty utterance"));
    }
    let bins = noisy_mag.bins;
    let n_chunks = frames.div_ceil(chunk_len);
    let mut out = Vec::with_capacity(n_chunks);
    for c in 0..n_chunks {
        let start = c * chunk_len;
        let valid = chunk_len.min(frames - start);
        let mut mag = Grid::zeros(chunk_len, bins);
        let mut tgt = Crm::zeros(chunk_len, bins);
        for t in 0..valid {
            mag.row_mut(t).copy_from_slice(noisy_mag.row(start + t));
            let src = (start + t) * bins;
            tgt.re[t * bins..(t + 1) * bins].copy_from_slice(&target.re[src..src + bins]);
            tgt.im[t * bins..(t + 1) * bins].copy_from_slice(&target.im[src..src + bins]);
        }
        out.push(TrainingPair { noisy_mag: mag, target: tgt, valid_frames: valid, spec });
    }
    Ok(out)
}

/// Computes features and compressed-mask targets for a rendered mixture and
/// chunks them.
pub fn pairs_from_mixture(
    mix: &RenderedMix,
    spec: MixSpec,
    stft_cfg: &StftConfig,
    crm_cfg: &CrmConfig,
    chunk_len: usize,
) -> Result<Vec<TrainingPair>> {
    let noisy = stft(&mix.mixture, stft_cfg)?;
    let clean = stft(&mix.image, stft_cfg)?;
    let mask = compute_cirm(&noisy, &clean, crm_cfg)?;
    let target = compress_crm(&mask, crm_cfg);
    chunk_sequences(&magnitude(&noisy), &target, chunk_len, spec)
}

/// Draws and renders `items` mixtures, yielding all their training chunks.
pub fn dynamic_mix_epoch(
    clean: &[Vec<f64>],
    noise: &[Vec<f64>],
    items: usize,
    stft_cfg: &StftConfig,
    crm_cfg: &CrmConfig,
    chunk_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingPair>> {
    if clean.is_empty() || noise.is_empty() {
        return Err(Error::invalid("dynamic mixing needs non-empty clean and noise sets"));
    }
    let mut out = Vec::new();
    for _ in 0..items {
        let (ci, ni, spec) = draw_item(rng, clean.len(), noise.len())?;
        let rendered = render_mixture(&clean[ci], &noise[ni], &spec, stft_cfg.sample_rate)?;
        out.extend(pairs_from_mixture(&rendered, spec, stft_cfg, crm_cfg, chunk_len)?);
    }
    Ok(out)
}

/// Reads a manifest: one waveform path per line, blanks skipped, relative
/// paths resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let p = Path::new(trimmed);
        out.push(if p.is_absolute() { p.to_path_buf() } else { base.join(p) });
    }
    Ok(out)
}
