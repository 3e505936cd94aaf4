//! Loss, training loop, validation, and checkpointing, shared by the fusion
//! model and both baselines.
//!
//! The loss is mean squared error on the compressed complex mask, both
//! channels weighted equally, with the output delay folded in: the
//! prediction at step `t` is scored against the target at frame `t − τ`, so
//! the first `τ` steps carry no loss, and zero-padded chunk frames are
//! masked out through the frame mask. Each optimizer step averages the
//! gradients of a small batch of utterance chunks; every chunk runs its `F`
//! per-frequency sequences jointly, so the effective batch is already wide.
//!
//! Everything is deterministic under a fixed seed in single-threaded mode:
//! data synthesis, initialization, and update order all flow from explicit
//! generators.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::TrainingPair;
use crate::dsp::{magnitude, stft, Grid, StftConfig};
use crate::features::guard_mean;
use crate::mask::{compress_crm, compute_cirm, Crm};
use crate::metrics::si_sdr;
use crate::model::{enhance_waveform, flatten_grads, io, MaskEstimator, NormKind};
use crate::nncore::{Adam, AdamConfig, Mat, Scalar};
use crate::{Error, Result};

/// Which network a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// Full-band + sub-band fusion.
    FullSub,
    /// Spectrum-wide three-layer baseline.
    FullBand,
    /// Shared per-frequency baseline without conditioning.
    SubBand,
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelVariant::FullSub => "fullsub",
            ModelVariant::FullBand => "fullband",
            ModelVariant::SubBand => "subband",
        })
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fullsub" => Ok(ModelVariant::FullSub),
            "fullband" => Ok(ModelVariant::FullBand),
            "subband" => Ok(ModelVariant::SubBand),
            other => Err(Error::invalid(format!(
                "unknown model variant {other:?}; expected fullsub, fullband, or subband"
            ))),
        }
    }
}

/// Training-run hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Optimizer learning rate.
    pub lr: f64,
    /// Frames per training chunk.
    pub seq_len: usize,
    /// Output delay in frames.
    pub tau: usize,
    /// Passes over the (re-synthesized) training set.
    pub epochs: usize,
    /// Utterance chunks averaged per optimizer step.
    pub batch_size: usize,
    /// Root seed for everything derived in the run.
    pub seed: u64,
    /// Network to train.
    pub variant: ModelVariant,
}

impl Default for TrainConfig {
    /// Published settings: lr 0.001, 192-frame sequences, two-frame delay.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            seq_len: 192,
            tau: 2,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            variant: ModelVariant::FullSub,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {} is not usable", self.lr)));
        }
        if self.seq_len <= self.tau {
            return Err(Error::invalid(format!(
                "sequence length {} must exceed the delay {}",
                self.seq_len, self.tau
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    /// An optimizer matched to this config.
    pub fn optimizer<T: Scalar>(&self) -> Adam<T> {
        Adam::new(AdamConfig { lr: self.lr, ..AdamConfig::default() })
    }
}

/// `true` for the first `valid` frames, `false` for the padded remainder.
pub fn valid_mask(valid: usize, total: usize) -> Vec<bool> {
    (0..total).map(|u| u < valid).collect()
}

fn check_loss_shapes<T: Scalar>(preds: &[Mat<T>], target: &Crm, frame_mask: &[bool]) -> Result<()> {
    if preds.len() != target.frames {
        return Err(Error::shape(format!(
            "{} prediction steps for {} target frames",
            preds.len(),
            target.frames
        )));
    }
    if frame_mask.len() != target.frames {
        return Err(Error::shape(format!(
            "mask covers {} frames, target has {}",
            frame_mask.len(),
            target.frames
        )));
    }
    for p in preds {
        if p.rows() != 2 || p.cols() != target.bins {
            return Err(Error::shape(format!(
                "prediction step is {}x{}, expected 2x{}",
                p.rows(),
                p.cols(),
                target.bins
            )));
        }
    }
    Ok(())
}

/// Delay-aligned masked MSE: prediction step `t` against target frame
/// `t − tau`, counting only unmasked target frames, both channels.
pub fn masked_mse<T: Scalar>(
    preds: &[Mat<T>],
    target: &Crm,
    frame_mask: &[bool],
    tau: usize,
) -> Result<f64> {
    check_loss_shapes(preds, target, frame_mask)?;
    let bins = target.bins;
    let mut counted = 0usize;
    let mut sum = 0.0f64;
    for t in tau..preds.len() {
        let u = t - tau;
        if !frame_mask[u] {
            continue;
        }
        counted += 1;
        for f in 0..bins {
            let er = preds[t].at(0, f).to_f64() - target.re[u * bins + f];
            let ei = preds[t].at(1, f).to_f64() - target.im[u * bins + f];
            sum += er * er + ei * ei;
        }
    }
    if counted == 0 {
        return Err(Error::invalid("every frame is masked; the loss is undefined"));
    }
    Ok(sum / (counted * 2 * bins) as f64)
}

/// [`masked_mse`] plus its gradient with respect to the predictions, scaled
/// by `grad_scale` (callers pass 1/batch for gradient averaging).
pub fn masked_mse_grad<T: Scalar>(
    preds: &[Mat<T>],
    target: &Crm,
    frame_mask: &[bool],
    tau: usize,
    grad_scale: f64,
) -> Result<(f64, Vec<Mat<T>>)> {
    check_loss_shapes(preds, target, frame_mask)?;
    let bins = target.bins;
    let counted = (tau..preds.len()).filter(|&t| frame_mask[t - tau]).count();
    if counted == 0 {
        return Err(Error::invalid("every frame is masked; the loss is undefined"));
    }
    let count = (counted * 2 * bins) as f64;
    let gscale = 2.0 * grad_scale / count;
    let mut sum = 0.0f64;
    let mut d: Vec<Mat<T>> = preds.iter().map(|_| Mat::zeros(2, bins)).collect();
    for t in tau..preds.len() {
        let u = t - tau;
        if !frame_mask[u] {
            continue;
        }
        for f in 0..bins {
            let er = preds[t].at(0, f).to_f64() - target.re[u * bins + f];
            let ei = preds[t].at(1, f).to_f64() - target.im[u * bins + f];
            sum += er * er + ei * ei;
            d[t].set(0, f, T::from_f64(gscale * er));
            d[t].set(1, f, T::from_f64(gscale * ei));
        }
    }
    Ok((sum / count, d))
}

/// Divides a chunk's magnitudes by the guarded mean of its real (unpadded)
/// frames. Padded rows are zero, so the quotient leaves them zero.
pub fn normalize_chunk(mag: &Grid, valid_frames: usize) -> Result<(Grid, f64)> {
    if valid_frames == 0 || valid_frames > mag.frames {
        return Err(Error::invalid(format!(
            "{valid_frames} valid frames in a {}-frame chunk",
            mag.frames
        )));
    }
    let mut sum = 0.0f64;
    for t in 0..valid_frames {
        for &v in mag.row(t) {
            sum += v;
        }
    }
    let div = guard_mean(sum / (valid_frames * mag.bins) as f64);
    let mut out = mag.clone();
    for v in &mut out.data {
        *v /= div;
    }
    Ok((out, div))
}

/// Loss/step counters for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub batches: usize,
    pub mean_loss: f64,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// One pass over `pairs`: forward, masked loss, backpropagation through
/// time, one averaged optimizer step per batch. Aborts on a non-finite
/// loss, reporting the batch position and the seeds that produced it.
pub fn train_epoch<T: Scalar, M: MaskEstimator<T>>(
    model: &mut M,
    opt: &mut Adam<T>,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("cannot train on an empty pair set"));
    }
    let mut stats = EpochStats { batches: 0, mean_loss: 0.0, first_loss: 0.0, last_loss: 0.0 };
    let mut loss_sum = 0.0f64;
    for (bi, batch) in pairs.chunks(cfg.batch_size).enumerate() {
        let inv = 1.0 / batch.len() as f64;
        let mut acc = vec![0.0f64; model.param_count()];
        let mut batch_loss = 0.0f64;
        for pair in batch {
            let (norm, _) = normalize_chunk(&pair.noisy_mag, pair.valid_frames)?;
            let (preds, tape) = model.forward_taped(&norm)?;
            let mask = valid_mask(pair.valid_frames, pair.target.frames);
            let (l, d_preds) = masked_mse_grad(&preds, &pair.target, &mask, cfg.tau, inv)?;
            batch_loss += l * inv;
            let grads = model.backward(&tape, &d_preds)?;
            for (a, g) in acc.iter_mut().zip(flatten_grads(&grads)) {
                *a += g;
            }
        }
        if !batch_loss.is_finite() {
            let seeds: Vec<u64> = batch.iter().map(|p| p.spec.seed).collect();
            return Err(Error::invalid(format!(
                "non-finite loss {batch_loss} at batch {bi} (root seed {}, item seeds {seeds:?})",
                cfg.seed
            )));
        }
        let acc_t: Vec<T> = acc.iter().map(|&v| T::from_f64(v)).collect();
        let mut params = model.params_mut();
        let mut grad_slices = Vec::with_capacity(params.len());
        let mut off = 0;
        for p in &params {
            grad_slices.push(&acc_t[off..off + p.len()]);
            off += p.len();
        }
        opt.step(&mut params, &grad_slices)?;

        if stats.batches == 0 {
            stats.first_loss = batch_loss;
        }
        stats.last_loss = batch_loss;
        stats.batches += 1;
        loss_sum += batch_loss;
    }
    stats.mean_loss = loss_sum / stats.batches as f64;
    Ok(stats)
}

/// Runs `cfg.epochs` epochs, asking `data` for each epoch's pair set (fresh
/// dynamic mixes, typically) and reporting per-epoch stats to `on_epoch`.
pub fn fit<T, M, D, C>(
    model: &mut M,
    opt: &mut Adam<T>,
    cfg: &TrainConfig,
    mut data: D,
    mut on_epoch: C,
) -> Result<Vec<EpochStats>>
where
    T: Scalar,
    M: MaskEstimator<T>,
    D: FnMut(usize) -> Result<Vec<TrainingPair>>,
    C: FnMut(usize, &EpochStats),
{
    cfg.validate()?;
    let mut all = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let pairs = data(epoch)?;
        let stats = train_epoch(model, opt, &pairs, cfg)?;
        on_epoch(epoch, &stats);
        all.push(stats);
    }
    Ok(all)
}

/// One held-out mixture with its speech-image reference.
#[derive(Debug, Clone)]
pub struct HeldOutClip {
    pub noisy: Vec<f64>,
    pub reference: Vec<f64>,
}

/// Held-out quality summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    /// Mean masked-MSE loss over the clips.
    pub loss: f64,
    /// Mean SI-SDR of the enhanced waveforms, dB.
    pub si_sdr: f64,
    /// Mean SI-SDR of the unprocessed mixtures, dB.
    pub noisy_si_sdr: f64,
}

/// Scores held-out clips: the masked loss on full utterances plus SI-SDR
/// through the complete enhancement chain (normalize, forward, decompress,
/// apply, resynthesize).
pub fn validate<T: Scalar, M: MaskEstimator<T>>(
    model: &M,
    clips: &[HeldOutClip],
    stft_cfg: &StftConfig,
) -> Result<ValidationReport> {
    if clips.is_empty() {
        return Err(Error::invalid("cannot validate on an empty set"));
    }
    let crm_cfg = model.crm();
    let tau = model.tau();
    let mut loss_sum = 0.0f64;
    let mut si_sum = 0.0f64;
    let mut noisy_sum = 0.0f64;
    for clip in clips {
        let noisy_spec = stft(&clip.noisy, stft_cfg)?;
        let clean_spec = stft(&clip.reference, stft_cfg)?;
        let target = compress_crm(&compute_cirm(&noisy_spec, &clean_spec, &crm_cfg)?, &crm_cfg);
        let mag = magnitude(&noisy_spec);
        let (norm, _) = normalize_chunk(&mag, mag.frames)?;
        let preds = model.forward(&norm)?;
        let mask = valid_mask(target.frames, target.frames);
        loss_sum += masked_mse(&preds, &target, &mask, tau)?;

        let enhanced = enhance_waveform(model, stft_cfg, NormKind::Offline, &clip.noisy)?;
        si_sum += si_sdr(&enhanced, &clip.reference)?;
        noisy_sum += si_sdr(&clip.noisy, &clip.reference)?;
    }
    let n = clips.len() as f64;
    Ok(ValidationReport {
        loss: loss_sum / n,
        si_sdr: si_sum / n,
        noisy_si_sdr: noisy_sum / n,
    })
}

/// Sidecar path for a weight file: the same name with `.txt` appended.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut os = weights.as_os_str().to_owned();
    os.push(".txt");
    PathBuf::from(os)
}

/// Writes the weight file plus a flat-text sidecar recording the run config
/// and step count.
pub fn save_checkpoint<T: Scalar, M: MaskEstimator<T>>(
    model: &M,
    weights: &Path,
    cfg: &TrainConfig,
    step: u64,
) -> Result<()> {
    io::save_weights(weights, &model.export_tensors())?;
    let text = format!(
        "variant = {}\nlr = {}\nseq_len = {}\ntau = {}\nepochs = {}\nbatch_size = {}\nseed = {}\nstep = {}\n",
        cfg.variant, cfg.lr, cfg.seq_len, cfg.tau, cfg.epochs, cfg.batch_size, cfg.seed, step
    );
    std::fs::write(sidecar_path(weights), text)?;
    Ok(())
}

/// Loads a weight file into an existing model of the matching shape.
pub fn load_checkpoint<T: Scalar, M: MaskEstimator<T>>(model: &mut M, weights: &Path) -> Result<()> {
    let tensors = io::load_weights(weights)?;
    model.import_tensors(&tensors)
}

/// Parses a checkpoint sidecar back into the config and step count.
pub fn read_sidecar(path: &Path) -> Result<(TrainConfig, u64)> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = TrainConfig::default();
    let mut step = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("sidecar line {line:?} is not key = value")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: &dyn fmt::Display| Error::invalid(format!("sidecar {key}: {e}"));
        match key {
            "variant" => cfg.variant = value.parse()?,
            "lr" => cfg.lr = value.parse().map_err(|e| bad(&e))?,
            "seq_len" => cfg.seq_len = value.parse().map_err(|e| bad(&e))?,
            "tau" => cfg.tau = value.parse().map_err(|e| bad(&e))?,
            "epochs" => cfg.epochs = value.parse().map_err(|e| bad(&e))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|e| bad(&e))?,
            "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
            "step" => step = Some(value.parse().map_err(|e| bad(&e))?),
            other => return Err(Error::invalid(format!("unknown sidecar key {other:?}"))),
        }
    }
    let step = step.ok_or_else(|| Error::invalid("sidecar is missing the step count"))?;
    Ok((cfg, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dynamic_mix_epoch, synth_noise, synth_voice};
    use crate::mask::{compress, CrmConfig};
    use crate::model::{flatten_params, FullSubNet, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FS: u32 = 16_000;

    fn toy_model_cfg() -> ModelConfig {
        ModelConfig { bins: 9, neighbors: 2, full_hidden: 8, sub_hidden: 6, tau: 2 }
    }

    fn toy_train_cfg() -> TrainConfig {
        TrainConfig { seq_len: 12, tau: 2, batch_size: 2, ..TrainConfig::default() }
    }

    fn toy_stft() -> StftConfig {
        StftConfig::for_fft_len(16, FS).unwrap()
    }

    fn random_crm(frames: usize, bins: usize, rng: &mut impl Rng) -> Crm {
        let mut c = Crm::zeros(frames, bins);
        for v in c.re.iter_mut().chain(c.im.iter_mut()) {
            *v = rng.gen_range(-2.0..2.0);
        }
        c
    }

    fn aligned_preds(target: &Crm, tau: usize, offset: f64) -> Vec<Mat<f64>> {
        (0..target.frames)
            .map(|t| {
                Mat::from_fn(2, target.bins, |ch, f| {
                    if t < tau {
                        0.0
                    } else {
                        let u = t - tau;
                        let v = if ch == 0 {
                            target.re[u * target.bins + f]
                        } else {
                            target.im[u * target.bins + f]
                        };
                        v + offset
                    }
                })
            })
            .collect()
    }

    #[test]
    fn perfectly_aligned_predictions_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = random_crm(10, 4, &mut rng);
        let preds = aligned_preds(&target, 2, 0.0);
        let mask = valid_mask(10, 10);
        assert_eq!(masked_mse(&preds, &target, &mask, 2).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_costs_its_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = random_crm(10, 4, &mut rng);
        let preds = aligned_preds(&target, 2, 0.5);
        let mask = valid_mask(10, 10);
        assert_eq!(masked_mse(&preds, &target, &mask, 2).unwrap(), 0.25);
    }

    #[test]
    fn masking_half_equals_mse_on_the_kept_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = 16;
        let bins = 5;
        let tau = 2;
        let target = random_crm(frames, bins, &mut rng);
        let preds: Vec<Mat<f64>> = (0..frames)
            .map(|_| Mat::from_fn(2, bins, |_, _| rng.gen_range(-2.0..2.0)))
            .collect();
        let mask = valid_mask(frames / 2, frames);
        let got = masked_mse(&preds, &target, &mask, tau).unwrap();

        let mut sum = 0.0;
        let mut n = 0usize;
        for u in 0..frames / 2 {
            let t = u + tau;
            for f in 0..bins {
                let er = preds[t].at(0, f) - target.re[u * bins + f];
                let ei = preds[t].at(1, f) - target.im[u * bins + f];
                sum += er * er + ei * ei;
                n += 2;
            }
        }
        assert_eq!(got, sum / n as f64);
    }

    #[test]
    fn loss_rejects_bad_shapes_and_total_masking() {
        let target = Crm::zeros(6, 3);
        let preds: Vec<Mat<f64>> = (0..6).map(|_| Mat::zeros(2, 3)).collect();
        assert!(masked_mse(&preds[..5], &target, &valid_mask(6, 6), 1).is_err());
        assert!(masked_mse(&preds, &target, &valid_mask(5, 5), 1).is_err());
        assert!(masked_mse(&preds, &target, &valid_mask(0, 6), 1).is_err());
        let bad: Vec<Mat<f64>> = (0..6).map(|_| Mat::zeros(3, 3)).collect();
        assert!(masked_mse(&bad, &target, &valid_mask(6, 6), 1).is_err());
    }

    #[test]
    fn delayed_targets_with_zero_tau_replicate_delayed_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = 12;
        let bins = 9;
        let tau = 2;
        let model = FullSubNet::<f64>::init(toy_model_cfg(), CrmConfig::default(), &mut rng).unwrap();
        let mut mag = Grid::zeros(frames, bins);
        for v in &mut mag.data {
            *v = rng.gen_range(0.05..1.5);
        }
        let target = random_crm(frames, bins, &mut rng);
        let (norm, _) = normalize_chunk(&mag, frames).unwrap();
        let (preds, tape) = model.forward_taped(&norm).unwrap();

        // Path A: delay handled by the loss.
        let mask_a = valid_mask(frames, frames);
        let (loss_a, d_a) = masked_mse_grad(&preds, &target, &mask_a, tau, 1.0).unwrap();

        // Path B: targets delayed by two frames up front, zero delay in the
        // loss, first two frames masked out.
        let mut shifted = Crm::zeros(frames, bins);
        for u in tau..frames {
            let src = (u - tau) * bins;
            shifted.re[u * bins..(u + 1) * bins].copy_from_slice(&target.re[src..src + bins]);
            shifted.im[u * bins..(u + 1) * bins].copy_from_slice(&target.im[src..src + bins]);
        }
        let mut mask_b = vec![true; frames];
        mask_b[0] = false;
        mask_b[1] = false;
        let (loss_b, d_b) = masked_mse_grad(&preds, &shifted, &mask_b, 0, 1.0).unwrap();

        assert_eq!(loss_a, loss_b);
        for (x, y) in d_a.iter().zip(&d_b) {
            assert_eq!(x.as_slice(), y.as_slice());
        }

        // Identical gradients drive identical updates.
        let mut ma = model.clone();
        let mut mb = model.clone();
        let cfg = toy_train_cfg();
        let mut oa = cfg.optimizer::<f64>();
        let mut ob = cfg.optimizer::<f64>();
        let ga = flatten_grads(&ma.backward(&tape, &d_a).unwrap());
        let gb = flatten_grads(&mb.backward(&tape, &d_b).unwrap());
        assert_eq!(ga, gb);
        step_flat(&mut ma, &mut oa, &ga).unwrap();
        step_flat(&mut mb, &mut ob, &gb).unwrap();
        assert_eq!(flatten_params(&ma), flatten_params(&mb));
    }

    fn step_flat<M: MaskEstimator<f64>>(m: &mut M, opt: &mut Adam<f64>, flat: &[f64]) -> Result<()> {
        let mut params = m.params_mut();
        let mut slices = Vec::new();
        let mut off = 0;
        for p in &params {
            slices.push(&flat[off..off + p.len()]);
            off += p.len();
        }
        opt.step(&mut params, &slices)
    }

    fn toy_pairs(n: usize, seed: u64) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean: Vec<Vec<f64>> = (0..3).map(|_| synth_voice(1200, FS, &mut rng)).collect();
        let noise: Vec<Vec<f64>> = (0..2).map(|_| synth_noise(900, &mut rng)).collect();
        dynamic_mix_epoch(&clean, &noise, n, &toy_stft(), &CrmConfig::default(), 12, &mut rng)
            .unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model =
            FullSubNet::<f64>::init(toy_model_cfg(), CrmConfig::default(), &mut rng).unwrap();
        let before = flatten_params(&model);
        let cfg = TrainConfig { lr: 0.0, ..toy_train_cfg() };
        let mut opt = cfg.optimizer();
        let pairs = toy_pairs(2, 6);
        train_epoch(&mut model, &mut opt, &pairs, &cfg).unwrap();
        assert_eq!(flatten_params(&model), before);
    }

    #[test]
    fn same_seed_training_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut model =
                FullSubNet::<f64>::init(toy_model_cfg(), CrmConfig::default(), &mut rng).unwrap();
            let cfg = toy_train_cfg();
            let mut opt = cfg.optimizer();
            for seed in [10, 11] {
                let pairs = toy_pairs(3, seed);
                train_epoch(&mut model, &mut opt, &pairs, &cfg).unwrap();
            }
            flatten_params(&model)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn repeated_steps_on_one_batch_reduce_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model =
            FullSubNet::<f64>::init(toy_model_cfg(), CrmConfig::default(), &mut rng).unwrap();
        let cfg = TrainConfig { lr: 3e-3, ..toy_train_cfg() };
        let mut opt = cfg.optimizer();
        let pairs = toy_pairs(2, 9);
        let first = train_epoch(&mut model, &mut opt, &pairs, &cfg).unwrap().mean_loss;
        let mut last = first;
        for _ in 0..15 {
            last = train_epoch(&mut model, &mut opt, &pairs, &cfg).unwrap().mean_loss;
        }
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn poisoned_weights_abort_with_diagnostics() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model =
            FullSubNet::<f64>::init(toy_model_cfg(), CrmConfig::default(), &mut rng).unwrap();
        model.params_mut()[0][0] = f64::NAN;
        let cfg = toy_train_cfg();
        let mut opt = cfg.optimizer();
        let pairs = toy_pairs(2, 11);
        match train_epoch(&mut model, &mut opt, &pairs, &cfg) {
            Err(Error::InvalidArgument(msg)) => {
                assert!(msg.contains("non-finite"), "{msg}");
                assert!(msg.contains("batch 0"), "{msg}");
                assert!(msg.contains("seed"), "{msg}");
            }
            other => panic!("expected an abort, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        assert!(TrainConfig { seq_len: 2, tau: 2, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn held_out_clips(n: usize, seed: u64) -> Vec<HeldOutClip> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let reference = synth_voice(1600, FS, &mut rng);
                let noise = synth_noise(1600, &mut rng);
                let (noisy, _) = crate::data::mix_at_snr(&reference, &noise, 6.0).unwrap();
                HeldOutClip { noisy, reference }
            })
            .collect()
    }

    #[test]
    fn zero_mask_model_scores_the_floor() {
        let model = FullSubNet::<f64>::zeros(toy_model_cfg(), CrmConfig::default()).unwrap();
        let report = validate(&model, &held_out_clips(2, 12), &toy_stft()).unwrap();
        assert_eq!(report.si_sdr, crate::metrics::SI_SDR_FLOOR);
    }

    #[test]
    fn identity_mask_model_matches_noisy_metrics() {
        let crm_cfg = CrmConfig::default();
        let mut model = FullSubNet::<f64>::zeros(toy_model_cfg(), crm_cfg).unwrap();
        // Zero recurrent weights leave the heads' biases as the constant
        // output; bias (compress(1), 0) makes every mask the identity.
        model.sub.head.b[0] = compress(1.0, &crm_cfg);
        model.sub.head.b[1] = 0.0;
        let clips = held_out_clips(3, 13);
        let report = validate(&model, &clips, &toy_stft()).unwrap();
        assert!(
            (report.si_sdr - report.noisy_si_sdr).abs() < 1e-6,
            "{} vs {}",
            report.si_sdr,
            report.noisy_si_sdr
        );
    }

    #[test]
    fn oracle_model_clears_fifty_decibels_through_validate() {
        let stft_cfg = toy_stft();
        let crm_cfg = CrmConfig::default();
        for clip in held_out_clips(3, 14) {
            let noisy_spec = stft(&clip.noisy, &stft_cfg).unwrap();
            let clean_spec = stft(&clip.reference, &stft_cfg).unwrap();
            let crm =
                compress_crm(&compute_cirm(&noisy_spec, &clean_spec, &crm_cfg).unwrap(), &crm_cfg);
            let oracle = OracleModel { crm, cfg: crm_cfg, tau: 2 };
            let report = validate(&oracle, &[clip], &stft_cfg).unwrap();
            assert!(report.si_sdr > 50.0, "oracle scored {}", report.si_sdr);
            assert!(report.loss < 1e-20, "oracle loss {}", report.loss);
        }
    }

    /// Test stand-in that answers with a stored mask regardless of input.
    struct OracleModel {
        crm: Crm,
        cfg: CrmConfig,
        tau: usize,
    }

    struct NoGrads;

    impl crate::model::GradTensors<f64> for NoGrads {
        fn tensors(&self) -> Vec<&[f64]> {
            Vec::new()
        }
    }

    impl MaskEstimator<f64> for OracleModel {
        type Tape = ();
        type Grads = NoGrads;

        fn bins(&self) -> usize {
            self.crm.bins
        }
        fn tau(&self) -> usize {
            self.tau
        }
        fn crm(&self) -> CrmConfig {
            self.cfg
        }
        fn param_count(&self) -> usize {
            0
        }
        fn params(&self) -> Vec<&[f64]> {
            Vec::new()
        }
        fn params_mut(&mut self) -> Vec<&mut [f64]> {
            Vec::new()
        }
        fn forward(&self, norm_mag: &Grid) -> Result<Vec<Mat<f64>>> {
            Ok((0..norm_mag.frames)
                .map(|t| {
                    Mat::from_fn(2, self.crm.bins, |ch, f| {
                        if t < self.tau {
                            0.0
                        } else {
                            let u = t - self.tau;
                            if ch == 0 {
                                self.crm.re[u * self.crm.bins + f]
                            } else {
                                self.crm.im[u * self.crm.bins + f]
                            }
                        }
                    })
                })
                .collect())
        }
        fn forward_taped(&self, norm_mag: &Grid) -> Result<(Vec<Mat<f64>>, ())> {
            Ok((self.forward(norm_mag)?, ()))
        }
        fn backward(&self, _: &(), _: &[Mat<f64>]) -> Result<NoGrads> {
            Ok(NoGrads)
        }
        fn predict_masks(&self, _: &crate::dsp::Spectrogram, _: NormKind) -> Result<Crm> {
            Ok(self.crm.clone())
        }
        fn export_tensors(&self) -> Vec<io::NamedTensor> {
            Vec::new()
        }
        fn import_tensors(&mut self, _: &[io::NamedTensor]) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn checkpoint_round_trips_config_weights_and_step() {
        let dir = tempfile::tempdir().unwrap();
        let weights = dir.path().join("toy.fsnw");
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = FullSubNet::<f64>::init(toy_model_cfg(), CrmConfig::default(), &mut rng).unwrap();
        let cfg = TrainConfig { seed: 42, variant: ModelVariant::FullSub, ..toy_train_cfg() };
        save_checkpoint(&model, &weights, &cfg, 137).unwrap();

        let (back_cfg, step) = read_sidecar(&sidecar_path(&weights)).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(step, 137);

        let mut restored = FullSubNet::<f64>::zeros(toy_model_cfg(), CrmConfig::default()).unwrap();
        load_checkpoint(&mut restored, &weights).unwrap();
        // The weight file stores 32-bit floats, so the round trip is exact
        // at f32 precision.
        let want: Vec<f64> = flatten_params(&model).iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(flatten_params(&restored), want);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [ModelVariant::FullSub, ModelVariant::FullBand, ModelVariant::SubBand] {
            assert_eq!(v.to_string().parse::<ModelVariant>().unwrap(), v);
        }
        assert!("resnet".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn fit_runs_the_requested_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut model =
            FullSubNet::<f64>::init(toy_model_cfg(), CrmConfig::default(), &mut rng).unwrap();
        let cfg = TrainConfig { epochs: 3, ..toy_train_cfg() };
        let mut opt = cfg.optimizer();
        let mut seen = Vec::new();
        let stats = fit(
            &mut model,
            &mut opt,
            &cfg,
            |e| Ok(toy_pairs(2, 20 + e as u64)),
            |e, s| seen.push((e, s.batches)),
        )
        .unwrap();
        assert_eq!(stats.len(), 3);
        assert_eq!(seen.len(), 3);
    }
}
