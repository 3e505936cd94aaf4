//! Analysis/synthesis front end: Hann windowing, STFT, inverse STFT with
//! weighted overlap-add, magnitude extraction.
//!
//! All arithmetic here is 64-bit. Analysis pre-pads the signal with
//! `win_len - hop` zeros and post-pads so that every original sample is
//! covered by the full complement of overlapping windows; synthesis applies
//! the analysis window a second time and normalizes by the per-sample sum of
//! squared windows, which gives perfect reconstruction for unmodified
//! spectrograms and smooth frame boundaries for masked ones.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// STFT framing parameters plus the analysis window.
#[derive(Debug, Clone)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub sample_rate: u32,
    pub window: Vec<f64>,
}

impl StftConfig {
    /// 512-sample periodic Hann, hop 256, 16 kHz — the configuration the
    /// full-scale model is specified for.
    pub fn default_16k() -> Self {
        Self::for_fft_len(512, 16_000).expect("512/256 hann config is valid")
    }

    /// Window = periodic Hann of `fft_len`, hop = `fft_len / 2`.
    pub fn for_fft_len(fft_len: usize, sample_rate: u32) -> Result<Self> {
        let window = hann_window(fft_len, true)?;
        Self::new(fft_len, fft_len / 2, fft_len, sample_rate, window)
    }

    pub fn new(
        win_len: usize,
        hop: usize,
        fft_len: usize,
        sample_rate: u32,
        window: Vec<f64>,
    ) -> Result<Self> {
        let cfg = Self { win_len, hop, fft_len, sample_rate, window };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.win_len % self.hop != 0 {
            return Err(Error::invalid(format!(
                "hop {} must divide win_len {}",
                self.hop, self.win_len
            )));
        }
        if self.fft_len < self.win_len {
            return Err(Error::invalid(format!(
                "fft_len {} must be >= win_len {}",
                self.fft_len, self.win_len
            )));
        }
        if self.window.len() != self.win_len {
            return Err(Error::shape(format!(
                "window length {} != win_len {}",
                self.window.len(),
                self.win_len
            )));
        }
        // Weighted OLA divides by the summed squared window; it must be
        // bounded away from zero at every steady-state offset.
        let env = self.steady_envelope();
        let peak = env.iter().cloned().fold(0.0, f64::max);
        if env.iter().any(|&e| e < 1e-6 * peak) {
            return Err(Error::invalid(
                "window/hop combination leaves near-zero overlap-add coverage",
            ));
        }
        Ok(())
    }

    /// Number of positive-frequency bins stored per frame.
    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples under the
    /// padding policy (pre-pad `win_len - hop`, post-pad to full coverage).
    pub fn frames_for_len(&self, len: usize) -> usize {
        if len == 0 {
            return 0;
        }
        (len + self.win_len - self.hop).div_ceil(self.hop)
    }

    /// Steady-state synthesis envelope: for an interior sample at offset
    /// `p` within a hop, the sum of squared window values from every
    /// overlapping frame. Periodic with period `hop`.
    pub fn steady_envelope(&self) -> Vec<f64> {
        let overlap = self.win_len / self.hop;
        (0..self.hop)
            .map(|p| (0..overlap).map(|j| self.window[p + j * self.hop].powi(2)).sum())
            .collect()
    }
}

/// T x F grid of complex STFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self { frames, bins, data: vec![Complex64::new(0.0, 0.0); frames * bins] }
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    /// One frame as a slice of `bins` complex values.
    #[inline]
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// T x F grid of nonnegative magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self { frames, bins, data: vec![0.0; frames * bins] }
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bins + f]
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    #[inline]
    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Hann window of length `n`; the periodic form tiles exactly under
/// power-of-two overlaps, the symmetric form uses the `n - 1` denominator.
pub fn hann_window(n: usize, periodic: bool) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("window length {n} < 2")));
    }
    let denom = if periodic { n } else { n - 1 } as f64;
    Ok((0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / denom).cos()))
        .collect())
}

/// Maximum relative deviation of the plain overlap-add sum
/// `sum_k w[s + k*hop]` from its mean, over all offsets `s` in a hop.
pub fn cola_deviation(window: &[f64], hop: usize) -> f64 {
    let overlap = window.len() / hop;
    let sums: Vec<f64> =
        (0..hop).map(|p| (0..overlap).map(|j| window[p + j * hop]).sum()).collect();
    let mean: f64 = sums.iter().sum::<f64>() / hop as f64;
    sums.iter().map(|s| (s - mean).abs() / mean.abs().max(1e-300)).fold(0.0, f64::max)
}

/// Forward STFT. Frames are windowed, zero-padded to `fft_len` and
/// transformed; only the `fft_len/2 + 1` nonnegative-frequency bins are kept.
pub fn stft(signal: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    if signal.is_empty() {
        return Err(Error::invalid("empty signal"));
    }
    let frames = cfg.frames_for_len(signal.len());
    let bins = cfg.bins();
    let pre = cfg.win_len - cfg.hop;
    let padded_len = (frames - 1) * cfg.hop + cfg.win_len;
    let mut padded = vec![0.0; padded_len];
    padded[pre..pre + signal.len()].copy_from_slice(signal);

    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_len);
    let mut spec = Spectrogram::zeros(frames, bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];
    for t in 0..frames {
        let start = t * cfg.hop;
        for i in 0..cfg.win_len {
            buf[i] = Complex64::new(padded[start + i] * cfg.window[i], 0.0);
        }
        for b in buf.iter_mut().skip(cfg.win_len) {
            *b = Complex64::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        spec.data[t * bins..(t + 1) * bins].copy_from_slice(&buf[..bins]);
    }
    Ok(spec)
}

/// Inverse STFT over the full frame span: windowed inverse transforms are
/// overlap-added and divided by the accumulated squared-window envelope.
/// Output length is `(frames - 1) * hop + win_len`; positions with no window
/// coverage come out as zero.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<Vec<f64>> {
    if spec.bins != cfg.bins() {
        return Err(Error::shape(format!(
            "spectrogram has {} bins, config expects {}",
            spec.bins,
            cfg.bins()
        )));
    }
    if spec.frames == 0 {
        return Ok(Vec::new());
    }
    let out_len = (spec.frames - 1) * cfg.hop + cfg.win_len;
    let mut acc = vec![0.0; out_len];
    let mut env = vec![0.0; out_len];

    let ifft = FftPlanner::new().plan_fft_inverse(cfg.fft_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];
    let half = cfg.fft_len / 2;
    let scale = 1.0 / cfg.fft_len as f64;
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        buf[..=half].copy_from_slice(frame);
        for f in 1..half {
            buf[cfg.fft_len - f] = frame[f].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for i in 0..cfg.win_len {
            acc[start + i] += buf[i].re * scale * cfg.window[i];
            env[start + i] += cfg.window[i] * cfg.window[i];
        }
    }
    for (a, e) in acc.iter_mut().zip(env.iter()) {
        if *e > 1e-12 {
            *a /= *e;
        } else {
            *a = 0.0;
        }
    }
    Ok(acc)
}

/// Inverse STFT aligned back to an original signal: strips the analysis
/// pre-pad and truncates to `original_len` samples.
pub fn istft_trimmed(spec: &Spectrogram, cfg: &StftConfig, original_len: usize) -> Result<Vec<f64>> {
    let full = istft(spec, cfg)?;
    let pre = cfg.win_len - cfg.hop;
    if pre + original_len > full.len() {
        return Err(Error::shape(format!(
            "spectrogram too short for {original_len} samples"
        )));
    }
    Ok(full[pre..pre + original_len].to_vec())
}

/// Element-wise modulus of a spectrogram.
pub fn magnitude(spec: &Spectrogram) -> Grid {
    Grid {
        frames: spec.frames,
        bins: spec.bins,
        data: spec.data.iter().map(|c| c.norm()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn white_noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den.max(1e-300)).sqrt()
    }

    #[test]
    fn hann_quarter_points() {
        let w = hann_window(4, true).unwrap();
        assert_eq!(w.len(), 4);
        for (got, want) in w.iter().zip([0.0, 0.5, 1.0, 0.5]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn hann_symmetric_endpoints() {
        let w = hann_window(5, false).unwrap();
        for (got, want) in w.iter().zip([0.0, 0.5, 1.0, 0.5, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn hann_degenerate_length_rejected() {
        assert!(matches!(hann_window(1, true), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn hann_512_is_cola_at_half_overlap() {
        let w = hann_window(512, true).unwrap();
        assert!(cola_deviation(&w, 256) < 1e-10);
    }

    #[test]
    fn zero_signal_zero_spectrogram() {
        let cfg = StftConfig::default_16k();
        let spec = stft(&vec![0.0; 16_000], &cfg).unwrap();
        assert_eq!(spec.frames, cfg.frames_for_len(16_000));
        // ceil((16000 + 512 - 256) / 256)
        assert_eq!(spec.frames, 64);
        assert_eq!(spec.bins, 257);
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn empty_signal_rejected() {
        let cfg = StftConfig::default_16k();
        assert!(matches!(stft(&[], &cfg), Err(Error::InvalidArgument(_))));
    }

    /// Direct DFT of one windowed frame is the oracle for the transform.
    #[test]
    fn cosine_at_bin_frequency_matches_direct_dft() {
        let cfg = StftConfig::default_16k();
        let bin = 8;
        let freq = bin as f64 * cfg.sample_rate as f64 / cfg.fft_len as f64;
        let n = 4 * cfg.win_len;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / cfg.sample_rate as f64).cos())
            .collect();
        let spec = stft(&x, &cfg).unwrap();

        // Oracle: direct Fourier sum over the windowed frame t=4 (fully
        // inside the signal, no pad influence).
        let t = 4;
        let start = t * cfg.hop;
        let offset = start as i64 - (cfg.win_len - cfg.hop) as i64;
        let frame: Vec<f64> = (0..cfg.win_len)
            .map(|i| {
                let s = offset + i as i64;
                if s < 0 || s as usize >= n {
                    0.0
                } else {
                    x[s as usize] * cfg.window[i]
                }
            })
            .collect();
        for f in 0..spec.bins {
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, &v) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * f as f64 * i as f64 / cfg.fft_len as f64;
                acc += Complex64::new(ang.cos(), ang.sin()) * v;
            }
            let got = spec.at(t, f);
            assert!((got - acc).norm() < 1e-9 * cfg.win_len as f64, "bin {f}");
        }

        // Energy concentrates in the window mainlobe around the driven bin;
        // everything outside is numerically zero relative to the peak.
        let peak = spec.at(t, bin).norm();
        for f in 0..spec.bins {
            if (f as i64 - bin as i64).abs() > 1 {
                assert!(spec.at(t, f).norm() < 1e-10 * peak, "leak at bin {f}");
            }
        }
    }

    #[test]
    fn roundtrip_white_noise_3s() {
        let cfg = StftConfig::default_16k();
        let x = white_noise(48_000, 7);
        let spec = stft(&x, &cfg).unwrap();
        let y = istft_trimmed(&spec, &cfg, x.len()).unwrap();
        assert!(rel_l2(&y, &x) < 1e-6, "rel err {}", rel_l2(&y, &x));
    }

    #[test]
    fn roundtrip_short_lengths() {
        // lengths that are not hop multiples still reconstruct exactly
        let cfg = StftConfig::for_fft_len(32, 16_000).unwrap();
        for len in [129, 200, 256, 1000] {
            let x = white_noise(len, len as u64);
            let spec = stft(&x, &cfg).unwrap();
            let y = istft_trimmed(&spec, &cfg, len).unwrap();
            assert!(rel_l2(&y, &x) < 1e-10, "len {len}: {}", rel_l2(&y, &x));
        }
    }

    #[test]
    fn zero_spectrogram_zero_signal() {
        let cfg = StftConfig::default_16k();
        let spec = Spectrogram::zeros(10, cfg.bins());
        let y = istft(&spec, &cfg).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn istft_shape_mismatch_rejected() {
        let cfg = StftConfig::default_16k();
        let spec = Spectrogram::zeros(10, 100);
        assert!(matches!(istft(&spec, &cfg), Err(Error::ShapeMismatch(_))));
    }

    /// One-frame synthesis equals the windowed inverse transform divided by
    /// the squared window, computed by hand.
    #[test]
    fn single_frame_ola_by_hand() {
        let cfg = StftConfig::for_fft_len(32, 16_000).unwrap();
        let z = white_noise(32, 3);
        // build the frame spectrum as fft(w .* z)
        let windowed: Vec<f64> = z.iter().zip(&cfg.window).map(|(v, w)| v * w).collect();
        let mut spec = Spectrogram::zeros(1, cfg.bins());
        for f in 0..cfg.bins() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, &v) in windowed.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * f as f64 * i as f64 / 32.0;
                acc += Complex64::new(ang.cos(), ang.sin()) * v;
            }
            spec.data[f] = acc;
        }
        let y = istft(&spec, &cfg).unwrap();
        assert_eq!(y.len(), 32);
        // hand OLA: y[i] = (w[i] * windowed[i]) / w[i]^2 = z[i] where w > 0
        for i in 0..32 {
            let w = cfg.window[i];
            let want = if w * w > 1e-12 { z[i] } else { 0.0 };
            assert!((y[i] - want).abs() < 1e-9, "i={i}");
        }
    }

    #[test]
    fn magnitude_basics() {
        let mut spec = Spectrogram::zeros(1, 2);
        spec.data[0] = Complex64::new(3.0, 4.0);
        let m = magnitude(&spec);
        assert_eq!(m.at(0, 0), 5.0);
        assert_eq!(m.at(0, 1), 0.0);
    }

    #[test]
    fn magnitude_squared_identity() {
        let cfg = StftConfig::default_16k();
        let spec = stft(&white_noise(8000, 11), &cfg).unwrap();
        let m = magnitude(&spec);
        for (c, v) in spec.data.iter().zip(&m.data) {
            let diff = (v * v - (c.re * c.re + c.im * c.im)).abs();
            assert!(diff <= 1e-12 * (1.0 + c.norm_sqr()));
        }
    }

    #[test]
    fn linearity() {
        let cfg = StftConfig::default_16k();
        let x = white_noise(4096, 1);
        let y = white_noise(4096, 2);
        let (a, b) = (1.7, -0.4);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let sm = stft(&mixed, &cfg).unwrap();
        let sx = stft(&x, &cfg).unwrap();
        let sy = stft(&y, &cfg).unwrap();
        for i in 0..sm.data.len() {
            let want = sx.data[i] * a + sy.data[i] * b;
            assert!((sm.data[i] - want).norm() < 1e-10 * cfg.win_len as f64);
        }
    }

    /// Spectrogram energy equals fft_len times the envelope-weighted signal
    /// energy — the scaling factor determined analytically from the window.
    #[test]
    fn parseval_consistency() {
        let cfg = StftConfig::default_16k();
        let x = white_noise(16_000, 5);
        let spec = stft(&x, &cfg).unwrap();

        // full-spectrum energy from the stored half spectrum
        let mut spec_energy = 0.0;
        for t in 0..spec.frames {
            for f in 0..spec.bins {
                let e = spec.at(t, f).norm_sqr();
                let double = f != 0 && f != spec.bins - 1;
                spec_energy += if double { 2.0 * e } else { e };
            }
        }

        let pre = cfg.win_len - cfg.hop;
        let padded_len = (spec.frames - 1) * cfg.hop + cfg.win_len;
        let mut padded = vec![0.0; padded_len];
        padded[pre..pre + x.len()].copy_from_slice(&x);
        let mut env = vec![0.0; padded_len];
        for t in 0..spec.frames {
            for i in 0..cfg.win_len {
                env[t * cfg.hop + i] += cfg.window[i] * cfg.window[i];
            }
        }
        let weighted: f64 = padded.iter().zip(&env).map(|(v, e)| v * v * e).sum();
        let want = cfg.fft_len as f64 * weighted;
        assert!((spec_energy - want).abs() < 1e-9 * want);
    }

    #[test]
    fn invalid_configs_rejected() {
        // hop does not divide win
        assert!(StftConfig::new(512, 200, 512, 16_000, hann_window(512, true).unwrap()).is_err());
        // fft shorter than window
        assert!(StftConfig::new(512, 256, 256, 16_000, hann_window(512, true).unwrap()).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn roundtrip_arbitrary_signals(seed in 0u64..1000, len in 128usize..2000) {
                let cfg = StftConfig::for_fft_len(32, 16_000).unwrap();
                prop_assume!(len >= 4 * cfg.win_len);
                let x = white_noise(len, seed);
                let spec = stft(&x, &cfg).unwrap();
                let y = istft_trimmed(&spec, &cfg, len).unwrap();
                prop_assert!(rel_l2(&y, &x) < 1e-6);
            }
        }
    }
}
