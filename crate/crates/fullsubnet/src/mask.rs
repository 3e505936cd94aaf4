//! Complex ratio mask: the training target and its compression.
//!
//! The mask at each bin is the complex quotient clean/noisy computed as
//! `S * conj(X) / (|X|^2 + eps)`, stored as separate real and imaginary
//! planes. Training squashes each channel through a scaled tanh so targets
//! live in a bounded range; inference inverts the squashing (with the input
//! clamped just inside the range so saturated network outputs stay finite).

use num_complex::Complex64;

use crate::dsp::Spectrogram;
use crate::{Error, Result};

/// Mask compression parameters: output range `(-k, k)`, slope `c`, and the
/// denominator guard for the complex division.
#[derive(Debug, Clone, Copy)]
pub struct CrmConfig {
    pub k: f64,
    pub c: f64,
    pub eps: f64,
}

impl Default for CrmConfig {
    fn default() -> Self {
        Self { k: 10.0, c: 0.1, eps: 1e-10 }
    }
}

impl CrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k <= 0.0 || self.c <= 0.0 || self.eps <= 0.0 {
            return Err(Error::invalid("crm config values must be positive"));
        }
        Ok(())
    }

    /// Largest value accepted by the inverse compression after clamping.
    pub fn clamp_limit(&self) -> f64 {
        self.k - 1e-6
    }
}

/// T x F complex mask stored as real/imaginary planes (row-major, frame
/// major).
#[derive(Debug, Clone, PartialEq)]
pub struct Crm {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Crm {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self { frames, bins, re: vec![0.0; frames * bins], im: vec![0.0; frames * bins] }
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        let i = t * self.bins + f;
        Complex64::new(self.re[i], self.im[i])
    }
}

/// Complex ratio mask of `clean` against `noisy`:
/// `M = S * conj(X) / (|X|^2 + eps)` per bin.
pub fn compute_cirm(noisy: &Spectrogram, clean: &Spectrogram, cfg: &CrmConfig) -> Result<Crm> {
    cfg.validate()?;
    if noisy.frames != clean.frames || noisy.bins != clean.bins {
        return Err(Error::shape(format!(
            "noisy {}x{} vs clean {}x{}",
            noisy.frames, noisy.bins, clean.frames, clean.bins
        )));
    }
    let mut out = Crm::zeros(noisy.frames, noisy.bins);
    for (i, (x, s)) in noisy.data.iter().zip(&clean.data).enumerate() {
        let denom = x.re * x.re + x.im * x.im + cfg.eps;
        out.re[i] = (x.re * s.re + x.im * s.im) / denom;
        out.im[i] = (x.re * s.im - x.im * s.re) / denom;
    }
    Ok(out)
}

/// Bounded compression `k * tanh(c*m/2)`; odd, strictly monotonic, range
/// `(-k, k)`.
pub fn compress(m: f64, cfg: &CrmConfig) -> f64 {
    cfg.k * (cfg.c * m / 2.0).tanh()
}

/// Inverse of [`compress`]; errors when the input is outside the open range.
pub fn decompress(m: f64, cfg: &CrmConfig) -> Result<f64> {
    if m.abs() >= cfg.k {
        return Err(Error::OutOfRange(format!("|{m}| >= compression range {}", cfg.k)));
    }
    Ok(-(1.0 / cfg.c) * ((cfg.k - m) / (cfg.k + m)).ln())
}

/// Inverse compression with the input clamped to `±(k - 1e-6)` first — the
/// call used on network outputs, which may saturate.
pub fn decompress_clamped(m: f64, cfg: &CrmConfig) -> f64 {
    let lim = cfg.clamp_limit();
    let m = m.clamp(-lim, lim);
    -(1.0 / cfg.c) * ((cfg.k - m) / (cfg.k + m)).ln()
}

/// Compress both channels of a mask.
pub fn compress_crm(mask: &Crm, cfg: &CrmConfig) -> Crm {
    Crm {
        frames: mask.frames,
        bins: mask.bins,
        re: mask.re.iter().map(|&v| compress(v, cfg)).collect(),
        im: mask.im.iter().map(|&v| compress(v, cfg)).collect(),
    }
}

/// Decompress both channels of a mask, clamping saturated entries.
pub fn decompress_crm(mask: &Crm, cfg: &CrmConfig) -> Crm {
    Crm {
        frames: mask.frames,
        bins: mask.bins,
        re: mask.re.iter().map(|&v| decompress_clamped(v, cfg)).collect(),
        im: mask.im.iter().map(|&v| decompress_clamped(v, cfg)).collect(),
    }
}

/// Per-bin complex multiplication `S_hat = M * X`.
pub fn apply_mask(noisy: &Spectrogram, mask: &Crm) -> Result<Spectrogram> {
    if noisy.frames != mask.frames || noisy.bins != mask.bins {
        return Err(Error::shape(format!(
            "spectrogram {}x{} vs mask {}x{}",
            noisy.frames, noisy.bins, mask.frames, mask.bins
        )));
    }
    let mut out = Spectrogram::zeros(noisy.frames, noisy.bins);
    for (i, x) in noisy.data.iter().enumerate() {
        let m = Complex64::new(mask.re[i], mask.im[i]);
        out.data[i] = m * x;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{istft_trimmed, stft, StftConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_spec(frames: usize, bins: usize, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Spectrogram::zeros(frames, bins);
        for v in &mut s.data {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        s
    }

    #[test]
    fn identical_signals_give_unit_mask() {
        let x = noise_spec(6, 9, 1);
        let m = compute_cirm(&x, &x, &CrmConfig::default()).unwrap();
        for t in 0..6 {
            for f in 0..9 {
                let v = m.at(t, f);
                // |X|^2 here is O(1), vastly above the 1e-10 guard
                assert!((v.re - 1.0).abs() < 1e-8, "re {}", v.re);
                assert!(v.im.abs() < 1e-8, "im {}", v.im);
            }
        }
    }

    #[test]
    fn quarter_turn_gives_imaginary_unit_mask() {
        let x = noise_spec(3, 5, 2);
        let mut s = x.clone();
        for v in &mut s.data {
            *v *= Complex64::new(0.0, 1.0);
        }
        let m = compute_cirm(&x, &s, &CrmConfig::default()).unwrap();
        for i in 0..m.re.len() {
            assert!(m.re[i].abs() < 1e-8);
            assert!((m.im[i] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn mask_times_noisy_recovers_clean() {
        let s = noise_spec(8, 16, 3);
        let n = noise_spec(8, 16, 4);
        let mut x = s.clone();
        for (xv, nv) in x.data.iter_mut().zip(&n.data) {
            *xv += nv;
        }
        let m = compute_cirm(&x, &s, &CrmConfig::default()).unwrap();
        let rec = apply_mask(&x, &m).unwrap();
        for i in 0..s.data.len() {
            if x.data[i].norm() > 1e-3 {
                let err = (rec.data[i] - s.data[i]).norm() / s.data[i].norm().max(1e-12);
                assert!(err < 1e-6, "bin {i}: rel err {err}");
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Spectrogram::zeros(2, 3);
        let b = Spectrogram::zeros(2, 4);
        assert!(matches!(
            compute_cirm(&a, &b, &CrmConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
        let m = Crm::zeros(2, 4);
        assert!(matches!(apply_mask(&a, &m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn compress_known_values() {
        let cfg = CrmConfig::default();
        assert_eq!(compress(0.0, &cfg), 0.0);
        let v = compress(1.0, &cfg);
        assert!((v - 10.0 * 0.05f64.tanh()).abs() < 1e-15);
        assert!((v - 0.4995837495788001).abs() < 1e-12, "{v}");
        // the asymptote: tanh saturates to 1.0 in f64 this far out
        assert!(compress(1e6, &cfg) > 9.999999);
        assert!(compress(1e6, &cfg) <= 10.0);
    }

    #[test]
    fn compress_is_odd_and_monotonic_and_bounded() {
        let cfg = CrmConfig::default();
        let mut prev = f64::NEG_INFINITY;
        for i in -500..=500 {
            let m = i as f64 * 0.5;
            let c = compress(m, &cfg);
            assert!(c > prev, "monotonicity at {m}");
            prev = c;
            assert!((compress(-m, &cfg) + c).abs() < 1e-12, "oddness at {m}");
            assert!(c.abs() < cfg.k);
        }
        // bounded even at the extremes of the finite range
        assert!(compress(f64::MAX, &cfg).abs() <= cfg.k);
        assert!(compress(f64::MIN, &cfg).abs() <= cfg.k);
    }

    #[test]
    fn decompress_inverts_compress() {
        let cfg = CrmConfig::default();
        assert_eq!(decompress(0.0, &cfg).unwrap(), 0.0);
        for m in [-40.0, -1.0, 0.3, 7.0, 40.0] {
            let round = decompress(compress(m, &cfg), &cfg).unwrap();
            assert!((round - m).abs() < 1e-9, "{m} -> {round}");
        }
        let inv = decompress(0.4995837, &cfg).unwrap();
        assert!((inv - 1.0).abs() < 1e-5, "{inv}");
    }

    #[test]
    fn decompress_range_checked_and_clamped_variant_finite() {
        let cfg = CrmConfig::default();
        assert!(matches!(decompress(10.0, &cfg), Err(Error::OutOfRange(_))));
        assert!(matches!(decompress(-11.0, &cfg), Err(Error::OutOfRange(_))));
        for v in [10.0, -10.0, 1e9, f64::INFINITY, f64::NEG_INFINITY] {
            let d = decompress_clamped(v, &cfg);
            assert!(d.is_finite(), "clamped decompress({v}) = {d}");
        }
        // clamp limit round-trips to a large but finite mask value
        let d = decompress_clamped(cfg.k, &cfg);
        assert!(d > 100.0);
    }

    #[test]
    fn identity_and_zero_masks() {
        let x = noise_spec(4, 6, 5);
        let mut ones = Crm::zeros(4, 6);
        ones.re.fill(1.0);
        assert_eq!(apply_mask(&x, &ones).unwrap(), x);
        let zeros = Crm::zeros(4, 6);
        let out = apply_mask(&x, &zeros).unwrap();
        assert!(out.data.iter().all(|c| c.norm() == 0.0));
    }

    /// End-to-end: the oracle mask on a synthetic mixture reconstructs the
    /// clean waveform almost perfectly.
    #[test]
    fn oracle_mask_reconstruction_si_sdr() {
        let cfg = StftConfig::default_16k();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 16_000;
        let clean: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                (2.0 * std::f64::consts::PI * 220.0 * t).sin()
                    + 0.5 * (2.0 * std::f64::consts::PI * 517.0 * t).sin()
            })
            .collect();
        let mix: Vec<f64> =
            clean.iter().map(|&s| s + 0.3 * rng.gen_range(-1.0..1.0)).collect();

        let xs = stft(&mix, &cfg).unwrap();
        let ss = stft(&clean, &cfg).unwrap();
        // near-zero guard: this is the oracle, division should be exact
        let crm_cfg = CrmConfig { eps: 1e-30, ..CrmConfig::default() };
        let m = compute_cirm(&xs, &ss, &crm_cfg).unwrap();
        let est_spec = apply_mask(&xs, &m).unwrap();
        let est = istft_trimmed(&est_spec, &cfg, n).unwrap();

        // inline scale-invariant SDR
        let dot: f64 = est.iter().zip(&clean).map(|(a, b)| a * b).sum();
        let ref_e: f64 = clean.iter().map(|v| v * v).sum();
        let alpha = dot / ref_e;
        let mut err_e = 0.0;
        for (e, r) in est.iter().zip(&clean) {
            let d = alpha * r - e;
            err_e += d * d;
        }
        let si_sdr = 10.0 * ((alpha * alpha * ref_e) / err_e).log10();
        assert!(si_sdr > 50.0, "oracle SI-SDR {si_sdr} dB");
    }

    /// compute_cirm then apply_mask is the identity on bins above the guard.
    #[test]
    fn cirm_apply_identity_property() {
        let cfg = CrmConfig::default();
        let s = noise_spec(10, 20, 7);
        let x = noise_spec(10, 20, 8);
        let m = compute_cirm(&x, &s, &cfg).unwrap();
        let rec = apply_mask(&x, &m).unwrap();
        for i in 0..s.data.len() {
            if x.data[i].norm() > 1e3 * cfg.eps {
                let err = (rec.data[i] - s.data[i]).norm() / s.data[i].norm().max(1e-12);
                assert!(err < 1e-5, "bin {i}");
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = CrmConfig { k: 0.0, ..CrmConfig::default() };
        assert!(bad.validate().is_err());
        let bad = CrmConfig { c: -1.0, ..CrmConfig::default() };
        assert!(bad.validate().is_err());
    }
}
