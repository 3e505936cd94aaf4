//! The full-band/sub-band fusion network, its two single-path ablation
//! baselines, parameter accounting, and batch inference.
//!
//! Every network maps a normalized magnitude sequence to one compressed
//! complex-mask prediction per step, laid out as a `[2 x F]` column-major
//! matrix (row 0 real, row 1 imaginary). Predictions are delayed: the value
//! emitted at step `t` estimates the mask for frame `t - tau`, so inference
//! appends `tau` silent steps to flush estimates for the final frames, and
//! training discards the first `tau` emitted steps.
//!
//! The fusion forward runs in four stages: the full-band net embeds the whole
//! spectrum per frame; the features module unfolds circular sub-band units
//! and appends the matching embedding component; each frequency's sequence is
//! divided by its mean; the shared sub-band net processes all `F` sequences
//! as one batch. Backpropagation follows the same graph exactly, including
//! the path through the per-frequency means (the embedding shifts the mean of
//! its own sequence, and the mean divides every element).

pub mod io;

use std::collections::HashMap;

use rand::Rng;

use crate::dsp::{istft_trimmed, magnitude, stft, Grid, Spectrogram, StftConfig};
use crate::features::{
    concat_full_band, full_band_mean, guard_mean, normalize_full_band_cumulative,
    normalize_subband_cumulative, subband_unfold, FeatureConfig, SubbandSeq, MEAN_FLOOR,
};
use crate::mask::{apply_mask, decompress_crm, Crm, CrmConfig};
use crate::nncore::{
    relu_backward, relu_mut, Linear, LinearGrads, LstmStack, Mat, Scalar, StackGrads, StackTape,
};
use crate::{Error, Result};
use io::NamedTensor;

/// Hyperparameters shared by the fusion model and both baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Frequency bins `F`.
    pub bins: usize,
    /// Neighbor bins per side in a sub-band unit.
    pub neighbors: usize,
    /// Hidden width of the full-band LSTM layers.
    pub full_hidden: usize,
    /// Hidden width of the sub-band LSTM layers.
    pub sub_hidden: usize,
    /// Output delay in frames.
    pub tau: usize,
}

impl Default for ModelConfig {
    /// The real-time configuration: 257 bins, 15 neighbors per side, hidden
    /// widths 512/384, two frames of output delay.
    fn default() -> Self {
        Self { bins: 257, neighbors: 15, full_hidden: 512, sub_hidden: 384, tau: 2 }
    }
}

impl ModelConfig {
    pub fn feature(&self) -> Result<FeatureConfig> {
        FeatureConfig::new(self.neighbors, self.bins)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature()?;
        if self.full_hidden == 0 || self.sub_hidden == 0 {
            return Err(Error::invalid("hidden widths must be nonzero"));
        }
        Ok(())
    }
}

/// Input scaling strategy for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Whole-clip means computed up front (non-causal).
    Offline,
    /// Running means over the frames seen so far (causal).
    Cumulative,
}

/// Whole-clip normalization divisors, the values a streaming session in
/// offline mode must be handed up front.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineStats {
    pub div_full: f64,
    pub div_sub: Vec<f64>,
}

/// Spectrum-wide recurrent path: two LSTM layers and a ReLU-gated linear
/// head mapping the hidden state back to one value per bin.
#[derive(Debug, Clone)]
pub struct FullBandNet<T> {
    pub stack: LstmStack<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> FullBandNet<T> {
    pub fn zeros(bins: usize, hidden: usize) -> Self {
        Self {
            stack: LstmStack::zeros(bins, &[hidden, hidden]),
            head: Linear::zeros(hidden, bins),
        }
    }

    pub fn init(bins: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            stack: LstmStack::init(bins, &[hidden, hidden], rng),
            head: Linear::init(hidden, bins, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.stack.param_count() + self.head.param_count()
    }

    /// Embedding sequence `relu(head(stack(xs)))`, with the stack tape when
    /// requested.
    fn embed(&self, xs: &[Mat<T>], taped: bool) -> Result<(Vec<Mat<T>>, Option<StackTape<T>>)> {
        let mut state = self.stack.new_state(xs[0].cols());
        let (tops, tape) = if taped {
            let (tops, tape) = self.stack.forward_sequence_taped(xs, &mut state)?;
            (tops, Some(tape))
        } else {
            (self.stack.forward_sequence(xs, &mut state)?, None)
        };
        let mut embed = self.head.forward_seq(&tops)?;
        for m in &mut embed {
            relu_mut(m.as_mut_slice());
        }
        Ok((embed, tape))
    }
}

/// Per-frequency recurrent path, one parameter set shared across all bins:
/// two LSTM layers and a linear head emitting the two mask channels, no
/// output activation.
#[derive(Debug, Clone)]
pub struct SubBandNet<T> {
    pub stack: LstmStack<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> SubBandNet<T> {
    pub fn zeros(input_width: usize, hidden: usize) -> Self {
        Self { stack: LstmStack::zeros(input_width, &[hidden, hidden]), head: Linear::zeros(hidden, 2) }
    }

    pub fn init(input_width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            stack: LstmStack::init(input_width, &[hidden, hidden], rng),
            head: Linear::init(hidden, 2, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.stack.param_count() + self.head.param_count()
    }

    /// Runs all sequences in `xs` (one batch column per frequency) through
    /// the stack and head.
    fn forward(&self, xs: &[Mat<T>], taped: bool) -> Result<(Vec<Mat<T>>, Option<StackTape<T>>)> {
        let mut state = self.stack.new_state(xs[0].cols());
        let (tops, tape) = if taped {
            let (tops, tape) = self.stack.forward_sequence_taped(xs, &mut state)?;
            (tops, Some(tape))
        } else {
            (self.stack.forward_sequence(xs, &mut state)?, None)
        };
        Ok((self.head.forward_seq(&tops)?, tape))
    }
}

/// The fusion model: full-band embedding conditioning a shared sub-band
/// mask estimator.
#[derive(Debug, Clone)]
pub struct FullSubNet<T> {
    pub cfg: ModelConfig,
    pub crm: CrmConfig,
    pub full: FullBandNet<T>,
    pub sub: SubBandNet<T>,
}

/// Reverse-mode state for one fusion forward pass.
#[derive(Debug)]
pub struct FullSubTape<T> {
    fb_xs: Vec<Mat<T>>,
    fb_tape: StackTape<T>,
    /// Post-activation embeddings, one `[F x 1]` column per step.
    embed: Vec<Mat<T>>,
    sb_xs: Vec<Mat<T>>,
    sb_tape: StackTape<T>,
    /// Raw per-frequency sequence means, before the divisor guard.
    mu_sub: Vec<f64>,
    /// Guarded divisors actually applied.
    div_sub: Vec<f64>,
}

/// Parameter gradients for [`FullSubNet`], in canonical tensor order.
#[derive(Debug, Clone)]
pub struct FullSubGrads<T> {
    pub full_stack: StackGrads<T>,
    pub full_head: LinearGrads<T>,
    pub sub_stack: StackGrads<T>,
    pub sub_head: LinearGrads<T>,
}

impl<T: Scalar> FullSubGrads<T> {
    pub fn zeros_like(net: &FullSubNet<T>) -> Self {
        Self {
            full_stack: StackGrads::zeros_like(&net.full.stack),
            full_head: LinearGrads::zeros_like(&net.full.head),
            sub_stack: StackGrads::zeros_like(&net.sub.stack),
            sub_head: LinearGrads::zeros_like(&net.sub.head),
        }
    }
}

impl<T: Scalar> FullSubNet<T> {
    pub fn zeros(cfg: ModelConfig, crm: CrmConfig) -> Result<Self> {
        cfg.validate()?;
        crm.validate()?;
        let feat = cfg.feature()?;
        Ok(Self {
            cfg,
            crm,
            full: FullBandNet::zeros(cfg.bins, cfg.full_hidden),
            sub: SubBandNet::zeros(feat.input_width(), cfg.sub_hidden),
        })
    }

    /// Random initialization; the full-band net consumes the generator first,
    /// then the sub-band net, so seeds reproduce exact weights.
    pub fn init(cfg: ModelConfig, crm: CrmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        crm.validate()?;
        let feat = cfg.feature()?;
        Ok(Self {
            cfg,
            crm,
            full: FullBandNet::init(cfg.bins, cfg.full_hidden, rng),
            sub: SubBandNet::init(feat.input_width(), cfg.sub_hidden, rng),
        })
    }

    fn check_bins(&self, g: &Grid) -> Result<()> {
        if g.bins != self.cfg.bins {
            return Err(Error::shape(format!("{} bins, model expects {}", g.bins, self.cfg.bins)));
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        norm_mag: &Grid,
        taped: bool,
    ) -> Result<(Vec<Mat<T>>, Option<FullSubTape<T>>)> {
        self.check_bins(norm_mag)?;
        let fb_xs = column_steps(norm_mag);
        let (embed, fb_tape) = self.full.embed(&fb_xs, taped)?;
        let e_grid = grid_from_columns(&embed);
        let units = subband_unfold(norm_mag, self.cfg.neighbors)?;
        let seqs = concat_full_band(&units, &e_grid)?;
        let mu_sub: Vec<f64> = seqs
            .iter()
            .map(|s| crate::features::subband_mean(s))
            .collect::<Result<_>>()?;
        let div_sub: Vec<f64> = mu_sub.iter().map(|&m| guard_mean(m)).collect();
        let sb_xs = sb_inputs::<T>(&seqs, &div_sub);
        let (preds, sb_tape) = self.sub.forward(&sb_xs, taped)?;
        let tape = if taped {
            Some(FullSubTape {
                fb_xs,
                fb_tape: fb_tape.expect("taping was requested"),
                embed,
                sb_xs,
                sb_tape: sb_tape.expect("taping was requested"),
                mu_sub,
                div_sub,
            })
        } else {
            None
        };
        Ok((preds, tape))
    }

    /// First pass over a clip: the whole-clip divisors offline-mode streaming
    /// needs up front. Runs the full-band net, since the per-frequency
    /// divisors average the embedding too.
    pub fn offline_stats(&self, mag: &Grid) -> Result<OfflineStats> {
        self.check_bins(mag)?;
        let div_full = guard_mean(full_band_mean(mag)?);
        let mut norm = mag.clone();
        for v in &mut norm.data {
            *v /= div_full;
        }
        let fb_xs = column_steps(&norm);
        let (embed, _) = self.full.embed(&fb_xs, false)?;
        let e_grid = grid_from_columns(&embed);
        let units = subband_unfold(&norm, self.cfg.neighbors)?;
        let seqs = concat_full_band(&units, &e_grid)?;
        Ok(OfflineStats { div_full, div_sub: subband_divisors(&seqs, mag.frames) })
    }
}

fn predict_fullsub<T: Scalar>(
    net: &FullSubNet<T>,
    spec: &Spectrogram,
    norm: NormKind,
) -> Result<Crm> {
    let mag = magnitude(spec);
    net.check_bins(&mag)?;
    let tau = net.cfg.tau;
    match norm {
        NormKind::Offline => {
            let stats = net.offline_stats(&mag)?;
            let ext = extended_grid(&mag, tau, Some(stats.div_full));
            let fb_xs = column_steps(&ext);
            let (embed, _) = net.full.embed(&fb_xs, false)?;
            let e_grid = grid_from_columns(&embed);
            let units = subband_unfold(&ext, net.cfg.neighbors)?;
            let seqs = concat_full_band(&units, &e_grid)?;
            let sb_xs = sb_inputs::<T>(&seqs, &stats.div_sub);
            let (preds, _) = net.sub.forward(&sb_xs, false)?;
            Ok(assemble_masks(&preds, tau, mag.frames, mag.bins))
        }
        NormKind::Cumulative => {
            let mut ext = extended_grid(&mag, tau, None);
            normalize_full_band_cumulative(&mut ext)?;
            let fb_xs = column_steps(&ext);
            let (embed, _) = net.full.embed(&fb_xs, false)?;
            let e_grid = grid_from_columns(&embed);
            let units = subband_unfold(&ext, net.cfg.neighbors)?;
            let mut seqs = concat_full_band(&units, &e_grid)?;
            for seq in &mut seqs {
                normalize_subband_cumulative(seq)?;
            }
            let ones = vec![1.0; mag.bins];
            let sb_xs = sb_inputs::<T>(&seqs, &ones);
            let (preds, _) = net.sub.forward(&sb_xs, false)?;
            Ok(assemble_masks(&preds, tau, mag.frames, mag.bins))
        }
    }
}

/// Spectrum-wide ablation: three LSTM layers and a linear head emitting both
/// mask channels for every bin at once.
#[derive(Debug, Clone)]
pub struct FullBandBaseline<T> {
    pub cfg: ModelConfig,
    pub crm: CrmConfig,
    pub stack: LstmStack<T>,
    pub head: Linear<T>,
}

/// Reverse-mode state for one [`FullBandBaseline`] pass.
#[derive(Debug)]
pub struct FullBandTape<T> {
    xs: Vec<Mat<T>>,
    stack: StackTape<T>,
}

/// Parameter gradients for [`FullBandBaseline`].
#[derive(Debug, Clone)]
pub struct FullBandGrads<T> {
    pub stack: StackGrads<T>,
    pub head: LinearGrads<T>,
}

impl<T: Scalar> FullBandBaseline<T> {
    pub fn zeros(cfg: ModelConfig, crm: CrmConfig) -> Result<Self> {
        cfg.validate()?;
        crm.validate()?;
        let h = cfg.full_hidden;
        Ok(Self {
            cfg,
            crm,
            stack: LstmStack::zeros(cfg.bins, &[h, h, h]),
            head: Linear::zeros(h, 2 * cfg.bins),
        })
    }

    pub fn init(cfg: ModelConfig, crm: CrmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        crm.validate()?;
        let h = cfg.full_hidden;
        Ok(Self {
            cfg,
            crm,
            stack: LstmStack::init(cfg.bins, &[h, h, h], rng),
            head: Linear::init(h, 2 * cfg.bins, rng),
        })
    }

    fn check_bins(&self, g: &Grid) -> Result<()> {
        if g.bins != self.cfg.bins {
            return Err(Error::shape(format!("{} bins, model expects {}", g.bins, self.cfg.bins)));
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        norm_mag: &Grid,
        taped: bool,
    ) -> Result<(Vec<Mat<T>>, Option<FullBandTape<T>>)> {
        self.check_bins(norm_mag)?;
        let xs = column_steps(norm_mag);
        let mut state = self.stack.new_state(1);
        let (tops, tape) = if taped {
            let (tops, tape) = self.stack.forward_sequence_taped(&xs, &mut state)?;
            (tops, Some(tape))
        } else {
            (self.stack.forward_sequence(&xs, &mut state)?, None)
        };
        let ys = self.head.forward_seq(&tops)?;
        let bins = self.cfg.bins;
        let preds = ys
            .iter()
            .map(|y| Mat::from_fn(2, bins, |ch, f| y.at(2 * f + ch, 0)))
            .collect();
        Ok((preds, tape.map(|stack| FullBandTape { xs, stack })))
    }
}

fn predict_full_band<T: Scalar>(
    net: &FullBandBaseline<T>,
    spec: &Spectrogram,
    norm: NormKind,
) -> Result<Crm> {
    let mag = magnitude(spec);
    net.check_bins(&mag)?;
    let tau = net.cfg.tau;
    let mut ext = match norm {
        NormKind::Offline => {
            let div = guard_mean(full_band_mean(&mag)?);
            extended_grid(&mag, tau, Some(div))
        }
        NormKind::Cumulative => extended_grid(&mag, tau, None),
    };
    if norm == NormKind::Cumulative {
        normalize_full_band_cumulative(&mut ext)?;
    }
    let (preds, _) = net.forward_impl(&ext, false)?;
    Ok(assemble_masks(&preds, tau, mag.frames, mag.bins))
}

/// Per-frequency ablation: the shared sub-band net alone, fed bare
/// `2N + 1`-wide units with no full-band conditioning.
#[derive(Debug, Clone)]
pub struct SubBandBaseline<T> {
    pub cfg: ModelConfig,
    pub crm: CrmConfig,
    pub net: SubBandNet<T>,
}

/// Reverse-mode state for one [`SubBandBaseline`] pass.
#[derive(Debug)]
pub struct SubBandTape<T> {
    xs: Vec<Mat<T>>,
    stack: StackTape<T>,
}

/// Parameter gradients for [`SubBandBaseline`].
#[derive(Debug, Clone)]
pub struct SubBandGrads<T> {
    pub stack: StackGrads<T>,
    pub head: LinearGrads<T>,
}

impl<T: Scalar> SubBandBaseline<T> {
    pub fn zeros(cfg: ModelConfig, crm: CrmConfig) -> Result<Self> {
        cfg.validate()?;
        crm.validate()?;
        let feat = cfg.feature()?;
        Ok(Self { cfg, crm, net: SubBandNet::zeros(feat.unit_width(), cfg.sub_hidden) })
    }

    pub fn init(cfg: ModelConfig, crm: CrmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        crm.validate()?;
        let feat = cfg.feature()?;
        Ok(Self { cfg, crm, net: SubBandNet::init(feat.unit_width(), cfg.sub_hidden, rng) })
    }

    fn check_bins(&self, g: &Grid) -> Result<()> {
        if g.bins != self.cfg.bins {
            return Err(Error::shape(format!("{} bins, model expects {}", g.bins, self.cfg.bins)));
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        norm_mag: &Grid,
        taped: bool,
    ) -> Result<(Vec<Mat<T>>, Option<SubBandTape<T>>)> {
        self.check_bins(norm_mag)?;
        let units = subband_unfold(norm_mag, self.cfg.neighbors)?;
        let div = subband_divisors(&units, norm_mag.frames);
        let xs = sb_inputs::<T>(&units, &div);
        let (preds, tape) = self.net.forward(&xs, taped)?;
        Ok((preds, tape.map(|stack| SubBandTape { xs, stack })))
    }
}

fn predict_sub_band<T: Scalar>(
    net: &SubBandBaseline<T>,
    spec: &Spectrogram,
    norm: NormKind,
) -> Result<Crm> {
    let mag = magnitude(spec);
    net.check_bins(&mag)?;
    let tau = net.cfg.tau;
    match norm {
        NormKind::Offline => {
            let div_full = guard_mean(full_band_mean(&mag)?);
            let ext = extended_grid(&mag, tau, Some(div_full));
            let units = subband_unfold(&ext, net.cfg.neighbors)?;
            let div = subband_divisors(&units, mag.frames);
            let xs = sb_inputs::<T>(&units, &div);
            let (preds, _) = net.net.forward(&xs, false)?;
            Ok(assemble_masks(&preds, tau, mag.frames, mag.bins))
        }
        NormKind::Cumulative => {
            let mut ext = extended_grid(&mag, tau, None);
            normalize_full_band_cumulative(&mut ext)?;
            let mut units = subband_unfold(&ext, net.cfg.neighbors)?;
            for u in &mut units {
                normalize_subband_cumulative(u)?;
            }
            let ones = vec![1.0; mag.bins];
            let xs = sb_inputs::<T>(&units, &ones);
            let (preds, _) = net.net.forward(&xs, false)?;
            Ok(assemble_masks(&preds, tau, mag.frames, mag.bins))
        }
    }
}

/// Gradient containers expose their tensors in the owning model's canonical
/// parameter order.
pub trait GradTensors<T> {
    fn tensors(&self) -> Vec<&[T]>;
}

impl<T: Scalar> GradTensors<T> for FullSubGrads<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        stack_grad_tensors(&self.full_stack, &mut out);
        head_grad_tensors(&self.full_head, &mut out);
        stack_grad_tensors(&self.sub_stack, &mut out);
        head_grad_tensors(&self.sub_head, &mut out);
        out
    }
}

impl<T: Scalar> GradTensors<T> for FullBandGrads<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        stack_grad_tensors(&self.stack, &mut out);
        head_grad_tensors(&self.head, &mut out);
        out
    }
}

impl<T: Scalar> GradTensors<T> for SubBandGrads<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        stack_grad_tensors(&self.stack, &mut out);
        head_grad_tensors(&self.head, &mut out);
        out
    }
}

/// A trainable mask estimator: normalized magnitudes in, one `[2 x F]`
/// compressed-mask column set per step out.
pub trait MaskEstimator<T: Scalar> {
    type Tape;
    type Grads: GradTensors<T>;

    fn bins(&self) -> usize;
    fn tau(&self) -> usize;
    fn crm(&self) -> CrmConfig;
    fn param_count(&self) -> usize;
    /// Parameter tensors in canonical order.
    fn params(&self) -> Vec<&[T]>;
    /// Mutable parameter tensors in canonical order.
    fn params_mut(&mut self) -> Vec<&mut [T]>;
    /// Forward pass over a normalized magnitude sequence.
    fn forward(&self, norm_mag: &Grid) -> Result<Vec<Mat<T>>>;
    /// Forward pass recording everything [`backward`](Self::backward) needs.
    fn forward_taped(&self, norm_mag: &Grid) -> Result<(Vec<Mat<T>>, Self::Tape)>;
    /// Reverse pass from per-step prediction gradients to parameter
    /// gradients.
    fn backward(&self, tape: &Self::Tape, d_preds: &[Mat<T>]) -> Result<Self::Grads>;
    /// Whole-clip inference: compressed masks aligned to the clip's frames,
    /// the τ-step delay already compensated.
    fn predict_masks(&self, spec: &Spectrogram, norm: NormKind) -> Result<Crm>;
    /// All weights as named tensors for serialization.
    fn export_tensors(&self) -> Vec<NamedTensor>;
    /// Installs named tensors, rejecting missing/mismatched/unknown entries.
    fn import_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()>;
}

impl<T: Scalar> MaskEstimator<T> for FullSubNet<T> {
    type Tape = FullSubTape<T>;
    type Grads = FullSubGrads<T>;

    fn bins(&self) -> usize {
        self.cfg.bins
    }

    fn tau(&self) -> usize {
        self.cfg.tau
    }

    fn crm(&self) -> CrmConfig {
        self.crm
    }

    fn param_count(&self) -> usize {
        self.full.param_count() + self.sub.param_count()
    }

    fn params(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        stack_params(&self.full.stack, &mut out);
        head_params(&self.full.head, &mut out);
        stack_params(&self.sub.stack, &mut out);
        head_params(&self.sub.head, &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        stack_params_mut(&mut self.full.stack, &mut out);
        head_params_mut(&mut self.full.head, &mut out);
        stack_params_mut(&mut self.sub.stack, &mut out);
        head_params_mut(&mut self.sub.head, &mut out);
        out
    }

    fn forward(&self, norm_mag: &Grid) -> Result<Vec<Mat<T>>> {
        Ok(self.forward_impl(norm_mag, false)?.0)
    }

    fn forward_taped(&self, norm_mag: &Grid) -> Result<(Vec<Mat<T>>, FullSubTape<T>)> {
        let (preds, tape) = self.forward_impl(norm_mag, true)?;
        Ok((preds, tape.expect("taping was requested")))
    }

    fn backward(&self, tape: &FullSubTape<T>, d_preds: &[Mat<T>]) -> Result<FullSubGrads<T>> {
        let tlen = tape.sb_xs.len();
        if d_preds.len() != tlen {
            return Err(Error::shape(format!(
                "{} prediction gradients for {} steps",
                d_preds.len(),
                tlen
            )));
        }
        let bins = self.cfg.bins;
        let width = self.cfg.feature()?.input_width();
        let mut grads = FullSubGrads::zeros_like(self);

        let sb_tops = &tape.sb_tape.layers.last().expect("nonempty stack").outs;
        let d_tops =
            self.sub.head.backward_seq(sb_tops, d_preds, &mut grads.sub_head)?;
        let d_xs = self.sub.stack.backward(&tape.sb_xs, &tape.sb_tape, d_tops, &mut grads.sub_stack)?;

        // Gradient into each frequency's divisor: every element of sequence f
        // was divided by div_sub[f], and the embedding contributes to the
        // mean behind that divisor (unless the guard pinned it).
        let count = (tlen * width) as f64;
        let mut coupling = vec![0.0f64; bins];
        for t in 0..tlen {
            let dx = &d_xs[t];
            let x = &tape.sb_xs[t];
            for j in 0..width {
                let dr = dx.row(j);
                let xr = x.row(j);
                for f in 0..bins {
                    coupling[f] += dr[f].to_f64() * xr[f].to_f64();
                }
            }
        }
        let mut d_embed: Vec<Mat<T>> = (0..tlen)
            .map(|t| {
                Mat::from_fn(bins, 1, |f, _| {
                    let div = tape.div_sub[f];
                    let mut g = d_xs[t].at(width - 1, f).to_f64() / div;
                    if tape.mu_sub[f] >= MEAN_FLOOR {
                        g -= coupling[f] / (div * count);
                    }
                    T::from_f64(g)
                })
            })
            .collect();
        for (d, post) in d_embed.iter_mut().zip(&tape.embed) {
            relu_backward(post.as_slice(), d.as_mut_slice());
        }

        let fb_tops = &tape.fb_tape.layers.last().expect("nonempty stack").outs;
        let d_fb_tops =
            self.full.head.backward_seq(fb_tops, &d_embed, &mut grads.full_head)?;
        self.full.stack.backward(&tape.fb_xs, &tape.fb_tape, d_fb_tops, &mut grads.full_stack)?;
        Ok(grads)
    }

    fn predict_masks(&self, spec: &Spectrogram, norm: NormKind) -> Result<Crm> {
        predict_fullsub(self, spec, norm)
    }

    fn export_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        export_stack("full", &self.full.stack, &mut out);
        export_head("full", &self.full.head, &mut out);
        export_stack("sub", &self.sub.stack, &mut out);
        export_head("sub", &self.sub.head, &mut out);
        out
    }

    fn import_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let mut map = tensor_map(tensors)?;
        import_stack("full", &mut self.full.stack, &mut map)?;
        import_head("full", &mut self.full.head, &mut map)?;
        import_stack("sub", &mut self.sub.stack, &mut map)?;
        import_head("sub", &mut self.sub.head, &mut map)?;
        reject_leftovers(map)
    }
}

impl<T: Scalar> MaskEstimator<T> for FullBandBaseline<T> {
    type Tape = FullBandTape<T>;
    type Grads = FullBandGrads<T>;

    fn bins(&self) -> usize {
        self.cfg.bins
    }

    fn tau(&self) -> usize {
        self.cfg.tau
    }

    fn crm(&self) -> CrmConfig {
        self.crm
    }

    fn param_count(&self) -> usize {
        self.stack.param_count() + self.head.param_count()
    }

    fn params(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        stack_params(&self.stack, &mut out);
        head_params(&self.head, &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        stack_params_mut(&mut self.stack, &mut out);
        head_params_mut(&mut self.head, &mut out);
        out
    }

    fn forward(&self, norm_mag: &Grid) -> Result<Vec<Mat<T>>> {
        Ok(self.forward_impl(norm_mag, false)?.0)
    }

    fn forward_taped(&self, norm_mag: &Grid) -> Result<(Vec<Mat<T>>, FullBandTape<T>)> {
        let (preds, tape) = self.forward_impl(norm_mag, true)?;
        Ok((preds, tape.expect("taping was requested")))
    }

    fn backward(&self, tape: &FullBandTape<T>, d_preds: &[Mat<T>]) -> Result<FullBandGrads<T>> {
        let bins = self.cfg.bins;
        if d_preds.len() != tape.xs.len() {
            return Err(Error::shape(format!(
                "{} prediction gradients for {} steps",
                d_preds.len(),
                tape.xs.len()
            )));
        }
        let mut grads =
            FullBandGrads { stack: StackGrads::zeros_like(&self.stack), head: LinearGrads::zeros_like(&self.head) };
        let d_ys: Vec<Mat<T>> = d_preds
            .iter()
            .map(|d| Mat::from_fn(2 * bins, 1, |r, _| d.at(r % 2, r / 2)))
            .collect();
        let tops = &tape.stack.layers.last().expect("nonempty stack").outs;
        let d_tops = self.head.backward_seq(tops, &d_ys, &mut grads.head)?;
        self.stack.backward(&tape.xs, &tape.stack, d_tops, &mut grads.stack)?;
        Ok(grads)
    }

    fn predict_masks(&self, spec: &Spectrogram, norm: NormKind) -> Result<Crm> {
        predict_full_band(self, spec, norm)
    }

    fn export_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        export_stack("fb", &self.stack, &mut out);
        export_head("fb", &self.head, &mut out);
        out
    }

    fn import_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let mut map = tensor_map(tensors)?;
        import_stack("fb", &mut self.stack, &mut map)?;
        import_head("fb", &mut self.head, &mut map)?;
        reject_leftovers(map)
    }
}

impl<T: Scalar> MaskEstimator<T> for SubBandBaseline<T> {
    type Tape = SubBandTape<T>;
    type Grads = SubBandGrads<T>;

    fn bins(&self) -> usize {
        self.cfg.bins
    }

    fn tau(&self) -> usize {
        self.cfg.tau
    }

    fn crm(&self) -> CrmConfig {
        self.crm
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn params(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        stack_params(&self.net.stack, &mut out);
        head_params(&self.net.head, &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        stack_params_mut(&mut self.net.stack, &mut out);
        head_params_mut(&mut self.net.head, &mut out);
        out
    }

    fn forward(&self, norm_mag: &Grid) -> Result<Vec<Mat<T>>> {
        Ok(self.forward_impl(norm_mag, false)?.0)
    }

    fn forward_taped(&self, norm_mag: &Grid) -> Result<(Vec<Mat<T>>, SubBandTape<T>)> {
        let (preds, tape) = self.forward_impl(norm_mag, true)?;
        Ok((preds, tape.expect("taping was requested")))
    }

    fn backward(&self, tape: &SubBandTape<T>, d_preds: &[Mat<T>]) -> Result<SubBandGrads<T>> {
        if d_preds.len() != tape.xs.len() {
            return Err(Error::shape(format!(
                "{} prediction gradients for {} steps",
                d_preds.len(),
                tape.xs.len()
            )));
        }
        let mut grads = SubBandGrads {
            stack: StackGrads::zeros_like(&self.net.stack),
            head: LinearGrads::zeros_like(&self.net.head),
        };
        let tops = &tape.stack.layers.last().expect("nonempty stack").outs;
        let d_tops = self.net.head.backward_seq(tops, d_preds, &mut grads.head)?;
        self.net.stack.backward(&tape.xs, &tape.stack, d_tops, &mut grads.stack)?;
        Ok(grads)
    }

    fn predict_masks(&self, spec: &Spectrogram, norm: NormKind) -> Result<Crm> {
        predict_sub_band(self, spec, norm)
    }

    fn export_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        export_stack("sb", &self.net.stack, &mut out);
        export_head("sb", &self.net.head, &mut out);
        out
    }

    fn import_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let mut map = tensor_map(tensors)?;
        import_stack("sb", &mut self.net.stack, &mut map)?;
        import_head("sb", &mut self.net.head, &mut map)?;
        reject_leftovers(map)
    }
}

/// Full offline enhancement: analyze, predict, decompress, apply,
/// resynthesize at the input's length.
pub fn enhance_waveform<T: Scalar, M: MaskEstimator<T>>(
    model: &M,
    cfg: &StftConfig,
    norm: NormKind,
    samples: &[f64],
) -> Result<Vec<f64>> {
    let spec = stft(samples, cfg)?;
    let compressed = model.predict_masks(&spec, norm)?;
    let mask = decompress_crm(&compressed, &model.crm());
    let clean = apply_mask(&spec, &mask)?;
    istft_trimmed(&clean, cfg, samples.len())
}

/// Copies every parameter into one flat `f64` vector, in canonical order.
pub fn flatten_params<T: Scalar, M: MaskEstimator<T>>(m: &M) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.param_count());
    for s in m.params() {
        for v in s {
            out.push(v.to_f64());
        }
    }
    out
}

/// Installs a flat vector produced by [`flatten_params`].
pub fn load_flat_params<T: Scalar, M: MaskEstimator<T>>(m: &mut M, flat: &[f64]) -> Result<()> {
    if flat.len() != m.param_count() {
        return Err(Error::shape(format!(
            "{} flat parameters for a {}-parameter model",
            flat.len(),
            m.param_count()
        )));
    }
    let mut i = 0;
    for s in m.params_mut() {
        for v in s.iter_mut() {
            *v = T::from_f64(flat[i]);
            i += 1;
        }
    }
    Ok(())
}

/// Flattens a gradient container to `f64`, in the same order as
/// [`flatten_params`].
pub fn flatten_grads<T: Scalar, G: GradTensors<T>>(g: &G) -> Vec<f64> {
    let mut out = Vec::new();
    for s in g.tensors() {
        for v in s {
            out.push(v.to_f64());
        }
    }
    out
}

/// Converts grid rows into per-step feature-major `[bins x 1]` columns.
fn column_steps<T: Scalar>(g: &Grid) -> Vec<Mat<T>> {
    (0..g.frames)
        .map(|t| {
            let row = g.row(t);
            Mat::from_fn(g.bins, 1, |r, _| T::from_f64(row[r]))
        })
        .collect()
}

/// Collects per-step `[bins x 1]` columns back into a grid.
fn grid_from_columns<T: Scalar>(cols: &[Mat<T>]) -> Grid {
    let frames = cols.len();
    let bins = cols[0].rows();
    let mut g = Grid::zeros(frames, bins);
    for (t, c) in cols.iter().enumerate() {
        let row = g.row_mut(t);
        for (f, slot) in row.iter_mut().enumerate() {
            *slot = c.at(f, 0).to_f64();
        }
    }
    g
}

/// The clip's magnitudes plus `tau` trailing zero rows, optionally divided by
/// a whole-clip divisor.
fn extended_grid(mag: &Grid, tau: usize, div: Option<f64>) -> Grid {
    let mut ext = Grid::zeros(mag.frames + tau, mag.bins);
    for t in 0..mag.frames {
        ext.row_mut(t).copy_from_slice(mag.row(t));
    }
    if let Some(d) = div {
        for v in &mut ext.data {
            *v /= d;
        }
    }
    ext
}

/// Guarded per-frequency divisors over the first `frames` rows of each
/// sequence.
fn subband_divisors(seqs: &[SubbandSeq], frames: usize) -> Vec<f64> {
    seqs.iter()
        .map(|s| {
            let mut sum = 0.0;
            for t in 0..frames {
                for &v in s.row(t) {
                    sum += v;
                }
            }
            guard_mean(sum / (frames * s.width) as f64)
        })
        .collect()
}

/// Per-step feature-major inputs: column `f` of step `t` is sequence `f`'s
/// row `t` divided by `div[f]`.
fn sb_inputs<T: Scalar>(seqs: &[SubbandSeq], div: &[f64]) -> Vec<Mat<T>> {
    let frames = seqs[0].frames;
    let width = seqs[0].width;
    (0..frames)
        .map(|t| Mat::from_fn(width, seqs.len(), |j, f| T::from_f64(seqs[f].at(t, j) / div[f])))
        .collect()
}

/// Drops the first `tau` steps and packs the rest as the compressed mask for
/// frames `0..frames`.
fn assemble_masks<T: Scalar>(preds: &[Mat<T>], tau: usize, frames: usize, bins: usize) -> Crm {
    let mut crm = Crm::zeros(frames, bins);
    for u in 0..frames {
        let p = &preds[u + tau];
        for f in 0..bins {
            crm.re[u * bins + f] = p.at(0, f).to_f64();
            crm.im[u * bins + f] = p.at(1, f).to_f64();
        }
    }
    crm
}

fn stack_params<'a, T: Scalar>(s: &'a LstmStack<T>, out: &mut Vec<&'a [T]>) {
    for l in &s.layers {
        out.push(l.w.as_slice());
        out.push(l.u.as_slice());
        out.push(&l.b);
    }
}

fn stack_params_mut<'a, T: Scalar>(s: &'a mut LstmStack<T>, out: &mut Vec<&'a mut [T]>) {
    for l in &mut s.layers {
        out.push(l.w.as_mut_slice());
        out.push(l.u.as_mut_slice());
        out.push(&mut l.b);
    }
}

fn head_params<'a, T: Scalar>(h: &'a Linear<T>, out: &mut Vec<&'a [T]>) {
    out.push(h.w.as_slice());
    out.push(&h.b);
}

fn head_params_mut<'a, T: Scalar>(h: &'a mut Linear<T>, out: &mut Vec<&'a mut [T]>) {
    out.push(h.w.as_mut_slice());
    out.push(&mut h.b);
}

fn stack_grad_tensors<'a, T: Scalar>(s: &'a StackGrads<T>, out: &mut Vec<&'a [T]>) {
    for l in &s.layers {
        out.push(l.w.as_slice());
        out.push(l.u.as_slice());
        out.push(&l.b);
    }
}

fn head_grad_tensors<'a, T: Scalar>(h: &'a LinearGrads<T>, out: &mut Vec<&'a [T]>) {
    out.push(h.w.as_slice());
    out.push(&h.b);
}

fn tensor_of<T: Scalar>(name: String, dims: Vec<usize>, data: &[T]) -> NamedTensor {
    NamedTensor {
        name,
        dims,
        data: data.iter().map(|v| v.to_f64() as f32).collect(),
    }
}

fn export_stack<T: Scalar>(prefix: &str, s: &LstmStack<T>, out: &mut Vec<NamedTensor>) {
    for (i, l) in s.layers.iter().enumerate() {
        let n = i + 1;
        out.push(tensor_of(
            format!("{prefix}.lstm{n}.W"),
            vec![l.w.rows(), l.w.cols()],
            l.w.as_slice(),
        ));
        out.push(tensor_of(
            format!("{prefix}.lstm{n}.U"),
            vec![l.u.rows(), l.u.cols()],
            l.u.as_slice(),
        ));
        out.push(tensor_of(format!("{prefix}.lstm{n}.b"), vec![l.b.len()], &l.b));
    }
}

fn export_head<T: Scalar>(prefix: &str, h: &Linear<T>, out: &mut Vec<NamedTensor>) {
    out.push(tensor_of(format!("{prefix}.head.w"), vec![h.w.rows(), h.w.cols()], h.w.as_slice()));
    out.push(tensor_of(format!("{prefix}.head.b"), vec![h.b.len()], &h.b));
}

fn tensor_map(tensors: &[NamedTensor]) -> Result<HashMap<&str, &NamedTensor>> {
    let mut map = HashMap::with_capacity(tensors.len());
    for t in tensors {
        if map.insert(t.name.as_str(), t).is_some() {
            return Err(Error::CorruptWeights(format!("duplicate tensor {}", t.name)));
        }
    }
    Ok(map)
}

fn take_tensor<'a>(
    map: &mut HashMap<&'a str, &'a NamedTensor>,
    name: &str,
    dims: &[usize],
) -> Result<&'a NamedTensor> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::CorruptWeights(format!("missing tensor {name}")))?;
    if t.dims != dims {
        return Err(Error::CorruptWeights(format!(
            "tensor {name}: file has dims {:?}, model expects {:?}",
            t.dims, dims
        )));
    }
    Ok(t)
}

fn copy_from_f32<T: Scalar>(src: &[f32], dst: &mut [T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = T::from_f64(s as f64);
    }
}

fn import_stack<'a, T: Scalar>(
    prefix: &str,
    s: &mut LstmStack<T>,
    map: &mut HashMap<&'a str, &'a NamedTensor>,
) -> Result<()> {
    for (i, l) in s.layers.iter_mut().enumerate() {
        let n = i + 1;
        let w = take_tensor(map, &format!("{prefix}.lstm{n}.W"), &[l.w.rows(), l.w.cols()])?;
        copy_from_f32(&w.data, l.w.as_mut_slice());
        let u = take_tensor(map, &format!("{prefix}.lstm{n}.U"), &[l.u.rows(), l.u.cols()])?;
        copy_from_f32(&u.data, l.u.as_mut_slice());
        let b = take_tensor(map, &format!("{prefix}.lstm{n}.b"), &[l.b.len()])?;
        copy_from_f32(&b.data, &mut l.b);
    }
    Ok(())
}

fn import_head<'a, T: Scalar>(
    prefix: &str,
    h: &mut Linear<T>,
    map: &mut HashMap<&'a str, &'a NamedTensor>,
) -> Result<()> {
    let w = take_tensor(map, &format!("{prefix}.head.w"), &[h.w.rows(), h.w.cols()])?;
    copy_from_f32(&w.data, h.w.as_mut_slice());
    let b = take_tensor(map, &format!("{prefix}.head.b"), &[h.b.len()])?;
    copy_from_f32(&b.data, &mut h.b);
    Ok(())
}

fn reject_leftovers(map: HashMap<&str, &NamedTensor>) -> Result<()> {
    if let Some(name) = map.keys().min() {
        return Err(Error::CorruptWeights(format!("unexpected tensor {name}")));
    }
    Ok(())
}
