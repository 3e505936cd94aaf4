//! Model input assembly: full-band magnitude normalization, circular sub-band
//! unfolding, concatenation of the full-band embedding, and per-frequency
//! sequence normalization.
//!
//! A sub-band unit for frequency `f` is the magnitude at `f` together with `N`
//! neighbors on each side, indexed modulo `F` so the lowest and highest bins
//! wrap around. After the full-band element is appended each row is `2N + 2`
//! wide. Normalization always divides by a mean magnitude, either over the
//! whole clip (offline) or over everything seen so far (streaming); means
//! below [`MEAN_FLOOR`] are replaced by it so silent input never divides by
//! zero.

use crate::dsp::Grid;
use crate::{Error, Result};

/// Smallest mean ever used as a normalization divisor.
pub const MEAN_FLOOR: f64 = 1e-10;

/// Neighborhood layout for sub-band inputs over an `bins`-bin spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureConfig {
    /// Neighbor bins taken on each side of the center frequency.
    pub neighbors: usize,
    /// Number of frequency bins `F`.
    pub bins: usize,
}

impl FeatureConfig {
    pub fn new(neighbors: usize, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("feature config needs at least one bin"));
        }
        if 2 * neighbors + 1 > bins {
            return Err(Error::invalid(format!(
                "sub-band width {} exceeds {} bins",
                2 * neighbors + 1,
                bins
            )));
        }
        Ok(Self { neighbors, bins })
    }

    /// Width of a bare sub-band unit, `2N + 1`.
    pub fn unit_width(&self) -> usize {
        2 * self.neighbors + 1
    }

    /// Width after the full-band element is appended, `2N + 2`.
    pub fn input_width(&self) -> usize {
        2 * self.neighbors + 2
    }
}

/// One frequency's input sequence: `frames` rows of `width` values.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSeq {
    /// Center bin this sequence describes.
    pub freq: usize,
    pub frames: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl SubbandSeq {
    pub fn zeros(freq: usize, frames: usize, width: usize) -> Self {
        Self { freq, frames, width, data: vec![0.0; frames * width] }
    }

    #[inline]
    pub fn at(&self, t: usize, j: usize) -> f64 {
        self.data[t * self.width + j]
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Replaces a vanishing mean by [`MEAN_FLOOR`] before it becomes a divisor.
#[inline]
pub fn guard_mean(mu: f64) -> f64 {
    if mu < MEAN_FLOOR {
        MEAN_FLOOR
    } else {
        mu
    }
}

/// Bin index `offset` steps away from `f`, wrapped modulo `bins`.
#[inline]
pub fn circular_bin(f: usize, offset: isize, bins: usize) -> usize {
    (f as isize + offset).rem_euclid(bins as isize) as usize
}

/// Arithmetic mean over every entry of the magnitude grid.
pub fn full_band_mean(mag: &Grid) -> Result<f64> {
    if mag.frames == 0 || mag.bins == 0 {
        return Err(Error::invalid("mean of an empty magnitude grid"));
    }
    let sum: f64 = mag.data.iter().sum();
    Ok(sum / (mag.frames * mag.bins) as f64)
}

/// Divides the whole grid by its guarded mean; returns the divisor used.
pub fn normalize_full_band(mag: &mut Grid) -> Result<f64> {
    let mu = guard_mean(full_band_mean(mag)?);
    for v in &mut mag.data {
        *v /= mu;
    }
    Ok(mu)
}

/// Divides each frame by the guarded running mean over all entries up to and
/// including that frame, the causal counterpart of [`normalize_full_band`].
pub fn normalize_full_band_cumulative(mag: &mut Grid) -> Result<()> {
    if mag.frames == 0 || mag.bins == 0 {
        return Err(Error::invalid("mean of an empty magnitude grid"));
    }
    let mut acc = RunningMean::new();
    for t in 0..mag.frames {
        let row = mag.row_mut(t);
        acc.push_slice(row);
        let mu = acc.divisor();
        for v in row {
            *v /= mu;
        }
    }
    Ok(())
}

/// Streaming mean over everything pushed so far.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningMean {
    sum: f64,
    count: u64,
}

impl RunningMean {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.sum += x;
        self.count += 1;
    }

    #[inline]
    pub fn push_slice(&mut self, xs: &[f64]) {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        self.sum += s;
        self.count += xs.len() as u64;
    }

    /// Mean of everything pushed so far; 0 before the first push.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    /// Guarded mean, safe to divide by.
    pub fn divisor(&self) -> f64 {
        guard_mean(self.mean())
    }
}

/// Writes frequency `f`'s width-`2N+1` unit for one spectral row into `out`.
#[inline]
pub fn unit_row(mag_row: &[f64], f: usize, neighbors: usize, out: &mut [f64]) {
    let bins = mag_row.len();
    let n = neighbors as isize;
    for (j, slot) in out.iter_mut().enumerate().take(2 * neighbors + 1) {
        *slot = mag_row[circular_bin(f, j as isize - n, bins)];
    }
}

/// Splits a magnitude grid into `F` per-frequency sequences of width `2N+1`,
/// wrapping neighbor indices modulo `F`.
pub fn subband_unfold(mag: &Grid, neighbors: usize) -> Result<Vec<SubbandSeq>> {
    let width = 2 * neighbors + 1;
    if width > mag.bins {
        return Err(Error::invalid(format!(
            "sub-band width {} exceeds {} bins",
            width, mag.bins
        )));
    }
    if mag.frames == 0 {
        return Err(Error::invalid("unfold of an empty magnitude grid"));
    }
    let mut seqs = Vec::with_capacity(mag.bins);
    for f in 0..mag.bins {
        let mut seq = SubbandSeq::zeros(f, mag.frames, width);
        for t in 0..mag.frames {
            unit_row(mag.row(t), f, neighbors, seq.row_mut(t));
        }
        seqs.push(seq);
    }
    Ok(seqs)
}

/// Appends the matching component of the full-band output to every row:
/// sequence `f` at frame `t` gains `fb_out[t][f]` as its last element.
pub fn concat_full_band(units: &[SubbandSeq], fb_out: &Grid) -> Result<Vec<SubbandSeq>> {
    if units.len() != fb_out.bins {
        return Err(Error::shape(format!(
            "{} sub-band sequences vs {} full-band outputs",
            units.len(),
            fb_out.bins
        )));
    }
    let mut out = Vec::with_capacity(units.len());
    for (f, unit) in units.iter().enumerate() {
        if unit.frames != fb_out.frames {
            return Err(Error::shape(format!(
                "sequence {} has {} frames, full-band output has {}",
                f, unit.frames, fb_out.frames
            )));
        }
        let mut seq = SubbandSeq::zeros(unit.freq, unit.frames, unit.width + 1);
        for t in 0..unit.frames {
            let dst = seq.row_mut(t);
            dst[..unit.width].copy_from_slice(unit.row(t));
            dst[unit.width] = fb_out.at(t, f);
        }
        out.push(seq);
    }
    Ok(out)
}

/// Arithmetic mean over every entry of one frequency's sequence.
pub fn subband_mean(seq: &SubbandSeq) -> Result<f64> {
    if seq.frames == 0 || seq.width == 0 {
        return Err(Error::invalid("mean of an empty sub-band sequence"));
    }
    let sum: f64 = seq.data.iter().sum();
    Ok(sum / (seq.frames * seq.width) as f64)
}

/// Divides the whole sequence by its guarded mean; returns the divisor used.
pub fn normalize_subband(seq: &mut SubbandSeq) -> Result<f64> {
    let mu = guard_mean(subband_mean(seq)?);
    for v in &mut seq.data {
        *v /= mu;
    }
    Ok(mu)
}

/// Divides each row by the guarded running mean over all entries up to and
/// including that row, the causal counterpart of [`normalize_subband`].
pub fn normalize_subband_cumulative(seq: &mut SubbandSeq) -> Result<()> {
    if seq.frames == 0 || seq.width == 0 {
        return Err(Error::invalid("mean of an empty sub-band sequence"));
    }
    let mut acc = RunningMean::new();
    for t in 0..seq.frames {
        let row = seq.row_mut(t);
        acc.push_slice(row);
        let mu = acc.divisor();
        for v in row {
            *v /= mu;
        }
    }
    Ok(())
}
