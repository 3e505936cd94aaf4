//! Frame-by-frame real-time inference for the fusion model: a sliding
//! analysis window, per-frame normalization, recurrent state carried across
//! frames, a delay line holding spectra until their (delayed) masks arrive,
//! and weighted overlap-add synthesis.
//!
//! The arithmetic per frame is exactly the batch pipeline's, re-ordered from
//! layer-major to frame-major, so streaming and whole-clip inference agree
//! to within envelope rounding. Output trails input by
//! `(win_len − hop) + tau·hop` samples: one window of analysis buffering
//! plus `tau` hops of mask delay — 768 samples (48 ms) at the published
//! settings.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::data::synth_noise;
use crate::dsp::StftConfig;
use crate::features::{circular_bin, RunningMean};
use crate::mask::decompress_clamped;
use crate::model::{FullSubNet, OfflineStats};
use crate::nncore::{relu_mut, Mat, Scalar, StackState, StepScratch};
use crate::{Error, Result};

/// How a stream estimates its normalization means.
#[derive(Debug, Clone)]
pub enum NormMode {
    /// Whole-clip divisors computed in advance; needs a first pass over the
    /// clip (see [`FullSubNet::offline_stats`]) before streaming starts.
    Offline(OfflineStats),
    /// Running means over every frame seen so far; fully single-pass.
    Cumulative,
}

/// One live enhancement stream over a borrowed model.
pub struct StreamState<'m, T: Scalar> {
    model: &'m FullSubNet<T>,
    cfg: StftConfig,
    norm: NormMode,

    // Analysis.
    window: Vec<f64>,
    hop_buf: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    fbuf: Vec<Complex64>,

    // Model.
    fb_state: StackState<T>,
    sb_state: StackState<T>,
    fb_scratch: StepScratch<T>,
    sb_scratch: StepScratch<T>,
    embed: Mat<T>,
    pred: Mat<T>,
    norm_row: Vec<f64>,
    sub_row: Vec<f64>,
    full_acc: RunningMean,
    sub_acc: Vec<RunningMean>,

    // Delay line and synthesis.
    spectra: VecDeque<Vec<Complex64>>,
    tail: Vec<f64>,
    env: Vec<f64>,
    steps: u64,
    enhanced: u64,
    consumed: u64,
    emitted: u64,
    cap: Option<u64>,
}

impl<'m, T: Scalar> StreamState<'m, T> {
    pub fn new(model: &'m FullSubNet<T>, cfg: &StftConfig, norm: NormMode) -> Result<Self> {
        let bins = model.cfg.bins;
        if cfg.bins() != bins {
            return Err(Error::shape(format!(
                "transform yields {} bins, model expects {bins}",
                cfg.bins()
            )));
        }
        if let NormMode::Offline(stats) = &norm {
            if stats.div_sub.len() != bins {
                return Err(Error::shape(format!(
                    "{} per-frequency divisors for {bins} bins",
                    stats.div_sub.len()
                )));
            }
        }
        let feat = model.cfg.feature()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            norm,
            window: vec![0.0; cfg.win_len],
            hop_buf: Vec::with_capacity(cfg.hop),
            fft: planner.plan_fft_forward(cfg.fft_len),
            ifft: planner.plan_fft_inverse(cfg.fft_len),
            fbuf: vec![Complex64::new(0.0, 0.0); cfg.fft_len],
            fb_state: model.full.stack.new_state(1),
            sb_state: model.sub.stack.new_state(bins),
            fb_scratch: StepScratch::default(),
            sb_scratch: StepScratch::default(),
            embed: Mat::zeros(0, 0),
            pred: Mat::zeros(0, 0),
            norm_row: vec![0.0; bins],
            sub_row: vec![0.0; feat.input_width()],
            full_acc: RunningMean::new(),
            sub_acc: vec![RunningMean::new(); bins],
            spectra: VecDeque::new(),
            tail: vec![0.0; cfg.win_len],
            env: cfg.steady_envelope(),
            steps: 0,
            enhanced: 0,
            consumed: 0,
            emitted: 0,
            cap: None,
            model,
        })
    }

    /// Samples consumed so far.
    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    /// Samples emitted so far.
    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    /// What [`emitted`](Self::emitted) must equal given
    /// [`consumed`](Self::consumed): every full hop advances the model once,
    /// masks trail by `tau` frames, and the leading `win_len − hop` samples
    /// of synthesis cover only analysis padding.
    pub fn expected_emitted(&self) -> u64 {
        let hop = self.cfg.hop as u64;
        let pre = (self.cfg.win_len - self.cfg.hop) as u64;
        let frames_out = (self.consumed / hop).saturating_sub(self.model.cfg.tau as u64);
        (frames_out * hop).saturating_sub(pre)
    }

    /// Feeds samples in; returns whatever enhanced samples became ready.
    pub fn push_samples(&mut self, samples: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &s in samples {
            self.hop_buf.push(s);
            self.consumed += 1;
            if self.hop_buf.len() == self.cfg.hop {
                self.ingest_hop(&mut out)?;
            }
        }
        Ok(out)
    }

    /// Drains the stream: pads the signal out to full window coverage, runs
    /// the `tau` trailing zero-magnitude steps that flush the mask delay
    /// line, and truncates the result so total output length equals total
    /// input length.
    pub fn flush(mut self) -> Result<Vec<f64>> {
        if self.consumed == 0 {
            return Ok(Vec::new());
        }
        let hop = self.cfg.hop as u64;
        let frames = self.cfg.frames_for_len(self.consumed as usize) as u64;
        self.cap = Some(self.consumed);
        let pad = frames * hop - self.consumed;
        let mut out = self.push_samples(&vec![0.0; pad as usize])?;
        let zero_mag = vec![0.0; self.model.cfg.bins];
        for _ in 0..self.model.cfg.tau {
            self.model_step(&zero_mag, &mut out)?;
        }
        Ok(out)
    }

    fn ingest_hop(&mut self, out: &mut Vec<f64>) -> Result<()> {
        let win = self.cfg.win_len;
        let hop = self.cfg.hop;
        self.window.copy_within(hop.., 0);
        self.window[win - hop..].copy_from_slice(&self.hop_buf);
        self.hop_buf.clear();

        for i in 0..win {
            self.fbuf[i] = Complex64::new(self.window[i] * self.cfg.window[i], 0.0);
        }
        for b in self.fbuf.iter_mut().skip(win) {
            *b = Complex64::new(0.0, 0.0);
        }
        self.fft.process(&mut self.fbuf);
        let bins = self.model.cfg.bins;
        let frame: Vec<Complex64> = self.fbuf[..bins].to_vec();
        for (m, c) in self.norm_row.iter_mut().zip(&frame) {
            *m = c.norm();
        }
        self.spectra.push_back(frame);
        let mag = std::mem::take(&mut self.norm_row);
        let res = self.model_step(&mag, out);
        self.norm_row = mag;
        res
    }

    /// One model advance from a raw magnitude row; fires synthesis once the
    /// delay line holds a frame whose mask has now been produced.
    fn model_step(&mut self, mag: &[f64], out: &mut Vec<f64>) -> Result<()> {
        let bins = self.model.cfg.bins;
        let neighbors = self.model.cfg.neighbors;
        let width = self.sub_row.len();

        // Full-band normalization, then one stacked-LSTM step plus the
        // ReLU-gated head: the conditioning embedding for this frame.
        let mut row = mag.to_vec();
        match &self.norm {
            NormMode::Offline(stats) => {
                for v in &mut row {
                    *v /= stats.div_full;
                }
            }
            NormMode::Cumulative => {
                self.full_acc.push_slice(&row);
                let mu = self.full_acc.divisor();
                for v in &mut row {
                    *v /= mu;
                }
            }
        }
        let x = Mat::from_fn(bins, 1, |r, _| T::from_f64(row[r]));
        self.model.full.stack.forward_step(&x, &mut self.fb_state, &mut self.fb_scratch)?;
        let top = &self.fb_state.layers.last().expect("nonempty stack").h;
        self.model.full.head.forward(top, &mut self.embed)?;
        relu_mut(self.embed.as_mut_slice());

        // Per-frequency rows: the circular neighborhood of normalized
        // magnitudes plus the embedding, divided by that frequency's mean.
        let mut sb = Mat::zeros(width, bins);
        let n = neighbors as isize;
        for f in 0..bins {
            for j in 0..width - 1 {
                self.sub_row[j] = row[circular_bin(f, j as isize - n, bins)];
            }
            self.sub_row[width - 1] = self.embed.at(f, 0).to_f64();
            let div = match &self.norm {
                NormMode::Offline(stats) => stats.div_sub[f],
                NormMode::Cumulative => {
                    self.sub_acc[f].push_slice(&self.sub_row);
                    self.sub_acc[f].divisor()
                }
            };
            for j in 0..width {
                sb.set(j, f, T::from_f64(self.sub_row[j] / div));
            }
        }
        self.model.sub.stack.forward_step(&sb, &mut self.sb_state, &mut self.sb_scratch)?;
        let top = &self.sb_state.layers.last().expect("nonempty stack").h;
        self.model.sub.head.forward(top, &mut self.pred)?;
        self.steps += 1;

        // This step's mask belongs to the frame `tau` hops back.
        if self.steps > self.model.cfg.tau as u64 {
            let spec = self.spectra.pop_front().expect("delay line underflow");
            self.synthesize(&spec, out);
        }
        Ok(())
    }

    /// Applies the freshest mask to its delayed spectrum, inverse-transforms,
    /// overlap-adds, and emits the hop that just became final.
    fn synthesize(&mut self, spec: &[Complex64], out: &mut Vec<f64>) {
        let crm = self.model.crm;
        let half = self.cfg.fft_len / 2;
        for (f, x) in spec.iter().enumerate() {
            let m = Complex64::new(
                decompress_clamped(self.pred.at(0, f).to_f64(), &crm),
                decompress_clamped(self.pred.at(1, f).to_f64(), &crm),
            );
            self.fbuf[f] = m * x;
        }
        for f in 1..half {
            self.fbuf[self.cfg.fft_len - f] = self.fbuf[f].conj();
        }
        self.ifft.process(&mut self.fbuf);

        let win = self.cfg.win_len;
        let hop = self.cfg.hop;
        let scale = 1.0 / self.cfg.fft_len as f64;
        for i in 0..win {
            self.tail[i] += self.fbuf[i].re * scale * self.cfg.window[i];
        }
        let pre = (win - hop) as u64;
        let base = self.enhanced * hop as u64;
        for i in 0..hop {
            let pos = base + i as u64;
            if pos < pre {
                continue;
            }
            if let Some(cap) = self.cap {
                if self.emitted >= cap {
                    break;
                }
            }
            out.push(self.tail[i] / self.env[i]);
            self.emitted += 1;
        }
        self.tail.copy_within(hop.., 0);
        for v in &mut self.tail[win - hop..] {
            *v = 0.0;
        }
        self.enhanced += 1;
    }
}

/// Streams a whole clip in `chunk`-sample pushes (the full clip at once if
/// `chunk` is zero) and flushes; output length equals input length.
pub fn enhance_stream<T: Scalar>(
    model: &FullSubNet<T>,
    cfg: &StftConfig,
    norm: NormMode,
    samples: &[f64],
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut state = StreamState::new(model, cfg, norm)?;
    let mut out = Vec::with_capacity(samples.len());
    let step = if chunk == 0 { samples.len().max(1) } else { chunk };
    for piece in samples.chunks(step) {
        out.extend(state.push_samples(piece)?);
    }
    out.extend(state.flush()?);
    Ok(out)
}

/// Wall-clock statistics for the per-frame streaming path.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    /// Frames timed (pooled over repetitions, first frame of each dropped).
    pub frames: usize,
    /// Real-time budget: the hop duration in milliseconds.
    pub hop_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyReport {
    /// Builds the report from raw per-frame times in milliseconds.
    pub fn from_times(times: &[f64], hop_ms: f64) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("latency report needs at least one frame"));
        }
        let mut sorted = times.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let idx = ((sorted.len() as f64 * 0.95).ceil() as usize).clamp(1, sorted.len()) - 1;
        Ok(Self {
            frames: sorted.len(),
            hop_ms,
            mean_ms: mean,
            p95_ms: sorted[idx],
            max_ms: *sorted.last().expect("nonempty"),
        })
    }

    /// Machine-readable form of the report.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames: {}", self.frames)?;
        writeln!(f, "hop:    {:.2} ms", self.hop_ms)?;
        writeln!(f, "mean:   {:.3} ms", self.mean_ms)?;
        writeln!(f, "p95:    {:.3} ms", self.p95_ms)?;
        write!(f, "max:    {:.3} ms", self.max_ms)
    }
}

/// Times the per-frame streaming path on `seconds` of synthetic noise,
/// repeated `reps` times with a fresh stream each repetition. Cumulative
/// normalization, single stream, single thread; the first frame of every
/// repetition is dropped as warm-up.
pub fn bench_latency<T: Scalar>(
    model: &FullSubNet<T>,
    cfg: &StftConfig,
    seconds: f64,
    reps: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if !(seconds > 0.0) || reps == 0 {
        return Err(Error::invalid("benchmark needs positive duration and repetitions"));
    }
    let samples = (seconds * cfg.sample_rate as f64) as usize;
    let frames = samples / cfg.hop;
    if frames < 2 {
        return Err(Error::invalid(format!(
            "{seconds} s is under two hops at {} Hz",
            cfg.sample_rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal = synth_noise(frames * cfg.hop, &mut rng);
    let mut times = Vec::with_capacity(reps * (frames - 1));
    for _ in 0..reps {
        let mut state = StreamState::new(model, cfg, NormMode::Cumulative)?;
        for (i, piece) in signal.chunks(cfg.hop).enumerate() {
            let t0 = Instant::now();
            let _ = state.push_samples(piece)?;
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            if i > 0 {
                times.push(dt);
            }
        }
    }
    LatencyReport::from_times(&times, cfg.hop as f64 / cfg.sample_rate as f64 * 1e3)
}
