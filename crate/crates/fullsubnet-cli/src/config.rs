//! Flat `key = value` run configuration shared by every subcommand.
//!
//! Defaults reproduce the published real-time setup: 512-sample window with
//! 256-sample hop at 16 kHz, 15 neighbor bins per side, hidden widths
//! 512/384, two frames of output delay, learning rate 0.001, 192-frame
//! training sequences. A config file overrides the defaults, and `--set`
//! flags on the command line override the file; unknown keys are rejected
//! with the closest valid spellings.

use std::path::{Path, PathBuf};

use fullsubnet::dsp::StftConfig;
use fullsubnet::model::ModelConfig;
use fullsubnet::train::{ModelVariant, TrainConfig};

/// Configuration mistakes are usage errors; plain strings keep the exit-code
/// mapping in `main` honest.
type Result<T> = std::result::Result<T, String>;

/// Every accepted configuration key.
pub const KEYS: &[&str] = &[
    "stft.win_len",
    "stft.hop",
    "stft.fft_len",
    "stft.sample_rate",
    "feature.N",
    "model.full_hidden",
    "model.sub_hidden",
    "model.variant",
    "train.lr",
    "train.seq_len",
    "train.epochs",
    "train.batch_size",
    "train.items",
    "train.seed",
    "stream.tau",
    "paths.weights",
    "paths.input",
    "paths.output",
    "paths.clean",
    "paths.noise",
    "paths.report",
];

/// The resolved settings for one command invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub sample_rate: u32,
    pub neighbors: usize,
    pub full_hidden: usize,
    pub sub_hidden: usize,
    pub variant: ModelVariant,
    pub lr: f64,
    pub seq_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub items: usize,
    pub seed: u64,
    pub tau: usize,
    pub weights: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub clean: Option<PathBuf>,
    pub noise: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            win_len: 512,
            hop: 256,
            fft_len: 512,
            sample_rate: 16_000,
            neighbors: 15,
            full_hidden: 512,
            sub_hidden: 384,
            variant: ModelVariant::FullSub,
            lr: 1e-3,
            seq_len: 192,
            epochs: 20,
            batch_size: 4,
            items: 200,
            seed: 0,
            tau: 2,
            weights: None,
            input: None,
            output: None,
            clean: None,
            noise: None,
            report: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("{key}: cannot parse {value:?} ({e})"))
}

/// Edit distance between two key spellings, for typo suggestions.
fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// The valid keys closest to a misspelling, nearest first.
pub fn nearest_keys(key: &str, n: usize) -> Vec<&'static str> {
    let mut scored: Vec<(usize, &'static str)> =
        KEYS.iter().map(|&k| (edit_distance(key, k), k)).collect();
    scored.sort();
    scored.into_iter().take(n).map(|(_, k)| k).collect()
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "stft.win_len" => self.win_len = parse(key, value)?,
            "stft.hop" => self.hop = parse(key, value)?,
            "stft.fft_len" => self.fft_len = parse(key, value)?,
            "stft.sample_rate" => self.sample_rate = parse(key, value)?,
            "feature.N" => self.neighbors = parse(key, value)?,
            "model.full_hidden" => self.full_hidden = parse(key, value)?,
            "model.sub_hidden" => self.sub_hidden = parse(key, value)?,
            "model.variant" => self.variant = value.parse().map_err(|e| format!("{e}"))?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.seq_len" => self.seq_len = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.items" => self.items = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "stream.tau" => self.tau = parse(key, value)?,
            "paths.weights" => self.weights = Some(PathBuf::from(value)),
            "paths.input" => self.input = Some(PathBuf::from(value)),
            "paths.output" => self.output = Some(PathBuf::from(value)),
            "paths.clean" => self.clean = Some(PathBuf::from(value)),
            "paths.noise" => self.noise = Some(PathBuf::from(value)),
            "paths.report" => self.report = Some(PathBuf::from(value)),
            other => {
                let near = nearest_keys(other, 3).join(", ");
                return Err(format!(
                    "unknown config key {other:?}; nearest valid keys: {near}"
                ));
            }
        }
        Ok(())
    }

    /// Applies a config file's assignments; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: {line:?} is not key = value", lineno + 1))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Reads and applies a config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Applies `key=value` command-line overrides.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| format!("--set {s:?} is not key=value"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The analysis/synthesis transform these settings describe.
    pub fn stft(&self) -> Result<StftConfig> {
        let window =
            fullsubnet::dsp::hann_window(self.win_len, true).map_err(|e| e.to_string())?;
        StftConfig::new(self.win_len, self.hop, self.fft_len, self.sample_rate, window)
            .map_err(|e| e.to_string())
    }

    /// The network shape these settings describe.
    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            bins: self.fft_len / 2 + 1,
            neighbors: self.neighbors,
            full_hidden: self.full_hidden,
            sub_hidden: self.sub_hidden,
            tau: self.tau,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// The training hyperparameters these settings describe.
    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr,
            seq_len: self.seq_len,
            tau: self.tau,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            variant: self.variant,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}
