//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys not listed in a
//! file keep their defaults; unknown or repeated keys are errors. The
//! canonical dump lists every key in a fixed order and is what the config
//! hash is computed over.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::blocks::{DenseBlockSpec, DenseVariant, KernelGroup, ModelConfig, NormKind};
use crate::error::{Error, Result};
use crate::losses::{LossMode, LossWeights};
use crate::spectral::{SpectroConfig, Window};
use crate::trainer::{ToyTaskSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Source of all randomness: initialization, data and batching.
    pub seed: u64,
    pub model: ModelConfig,
    pub stft: SpectroConfig,
    pub loss: LossWeights,
    pub loss_mode: LossMode,
    pub train: TrainConfig,
    /// `sample_rate` and `seed` mirror the run-level values.
    pub task: ToyTaskSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            stft: SpectroConfig::default(),
            loss: LossWeights::default(),
            loss_mode: LossMode::New,
            train: TrainConfig::default(),
            task: ToyTaskSpec::default(),
        };
        cfg.sync();
        cfg
    }
}

impl ModelConfig {
    /// Model size matched to the published parameter budget: two
    /// time/frequency pairs and a 12x feed-forward expansion at C = 64.
    pub fn full() -> Self {
        let mut cfg = ModelConfig::default();
        cfg.gpfca.ffn_expansion = 12;
        cfg
    }

    /// Small model for desk-scale training and gradient checks.
    pub fn tiny() -> Self {
        let mut cfg = ModelConfig::default();
        cfg.dense = DenseBlockSpec::new(2, 8, 3, DenseVariant::Dsddb);
        cfg.gpfca.channels = 8;
        cfg.gpfca.ffn_expansion = 2;
        cfg.ts_block_count = 1;
        cfg
    }
}

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as a number"))
}

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

impl RunConfig {
    pub fn full() -> Self {
        RunConfig {
            model: ModelConfig::full(),
            ..Default::default()
        }
    }

    pub fn tiny() -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            ..Default::default()
        }
    }

    fn sync(&mut self) {
        self.task.sample_rate = self.stft.sample_rate;
        self.task.seed = self.seed;
    }

    /// Sets the run seed and everything derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stft.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.task.sample_rate != self.stft.sample_rate || self.task.seed != self.seed {
            return Err(Error::Config("toy task is out of sync with the run settings".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let s = &self.stft;
        let l = &self.loss;
        let t = &self.train;
        let k = &self.task;
        vec![
            ("seed", self.seed.to_string()),
            ("model.channels", m.channels().to_string()),
            ("model.ts_block_count", m.ts_block_count.to_string()),
            ("model.mask_max", m.mask_max.to_string()),
            ("model.phase_residual", m.phase_residual.to_string()),
            ("dense.depth", m.dense.depth.to_string()),
            ("dense.kernel", m.dense.kernel.to_string()),
            ("dense.dilations", list(&m.dense.dilations)),
            ("dense.variant", m.dense.variant.name().to_string()),
            ("gpfca.kernel_group", list(&m.gpfca.kernel_group.0)),
            ("gpfca.ffn_expansion", m.gpfca.ffn_expansion.to_string()),
            (
                "gpfca.norm",
                match m.gpfca.norm {
                    NormKind::Channel => "channel",
                    NormKind::None => "none",
                }
                .to_string(),
            ),
            ("gpfca.shared_dwc", m.gpfca.shared_dwc.to_string()),
            ("stft.fft_size", s.fft_size.to_string()),
            ("stft.win_length", s.win_length.to_string()),
            ("stft.hop", s.hop.to_string()),
            ("stft.window", s.window.name().to_string()),
            ("stft.sample_rate", s.sample_rate.to_string()),
            ("stft.segment_seconds", s.segment_seconds.to_string()),
            ("stft.compression", s.compression.to_string()),
            ("stft.center", s.center.to_string()),
            ("loss.mode", self.loss_mode.name().to_string()),
            ("loss.metric", l.metric.to_string()),
            ("loss.magnitude", l.magnitude.to_string()),
            ("loss.phase", l.phase.to_string()),
            ("loss.complex", l.complex.to_string()),
            ("loss.time", l.time.to_string()),
            ("loss.consistency", l.consistency.to_string()),
            ("train.lr", t.optimizer.lr.to_string()),
            ("train.beta1", t.optimizer.beta1.to_string()),
            ("train.beta2", t.optimizer.beta2.to_string()),
            ("train.eps", t.optimizer.eps.to_string()),
            ("train.weight_decay", t.optimizer.weight_decay.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.steps", t.steps.to_string()),
            ("task.segment_seconds", k.segment_seconds.to_string()),
            ("task.tones_min", k.tones_min.to_string()),
            ("task.tones_max", k.tones_max.to_string()),
            ("task.freq_min", k.freq_min.to_string()),
            ("task.freq_max", k.freq_max.to_string()),
            ("task.snr_min_db", k.snr_min_db.to_string()),
            ("task.snr_max_db", k.snr_max_db.to_string()),
            ("task.train_size", k.train_size.to_string()),
            ("task.heldout_size", k.heldout_size.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse_num(v)?,
            "model.channels" => {
                let c = parse_num(v)?;
                m.dense.channels = c;
                m.gpfca.channels = c;
            }
            "model.ts_block_count" => m.ts_block_count = parse_num(v)?,
            "model.mask_max" => m.mask_max = parse_f64(v)?,
            "model.phase_residual" => m.phase_residual = parse_bool(v)?,
            "dense.depth" => m.dense.depth = parse_num(v)?,
            "dense.kernel" => m.dense.kernel = parse_num(v)?,
            "dense.dilations" => m.dense.dilations = parse_list(v)?,
            "dense.variant" => {
                m.dense.variant = DenseVariant::parse(v).ok_or_else(|| format!("expected ddb or dsddb, got `{v}`"))?
            }
            "gpfca.kernel_group" => {
                let k = parse_list(v)?;
                let k: [usize; 4] = k.try_into().map_err(|k: Vec<usize>| format!("expected 4 kernels, got {}", k.len()))?;
                m.gpfca.kernel_group = KernelGroup(k);
            }
            "gpfca.ffn_expansion" => m.gpfca.ffn_expansion = parse_num(v)?,
            "gpfca.norm" => {
                m.gpfca.norm = match v {
                    "channel" => NormKind::Channel,
                    "none" => NormKind::None,
                    _ => return Err(format!("expected channel or none, got `{v}`")),
                }
            }
            "gpfca.shared_dwc" => m.gpfca.shared_dwc = parse_bool(v)?,
            "stft.fft_size" => self.stft.fft_size = parse_num(v)?,
            "stft.win_length" => self.stft.win_length = parse_num(v)?,
            "stft.hop" => self.stft.hop = parse_num(v)?,
            "stft.window" => {
                self.stft.window = Window::parse(v).ok_or_else(|| format!("unknown window `{v}`"))?
            }
            "stft.sample_rate" => self.stft.sample_rate = parse_num(v)?,
            "stft.segment_seconds" => self.stft.segment_seconds = parse_f64(v)?,
            "stft.compression" => self.stft.compression = parse_f64(v)?,
            "stft.center" => self.stft.center = parse_bool(v)?,
            "loss.mode" => self.loss_mode = LossMode::parse(v).ok_or_else(|| format!("expected old or new, got `{v}`"))?,
            "loss.metric" => self.loss.metric = parse_f64(v)?,
            "loss.magnitude" => self.loss.magnitude = parse_f64(v)?,
            "loss.phase" => self.loss.phase = parse_f64(v)?,
            "loss.complex" => self.loss.complex = parse_f64(v)?,
            "loss.time" => self.loss.time = parse_f64(v)?,
            "loss.consistency" => self.loss.consistency = parse_f64(v)?,
            "train.lr" => self.train.optimizer.lr = parse_f64(v)?,
            "train.beta1" => self.train.optimizer.beta1 = parse_f64(v)?,
            "train.beta2" => self.train.optimizer.beta2 = parse_f64(v)?,
            "train.eps" => self.train.optimizer.eps = parse_f64(v)?,
            "train.weight_decay" => self.train.optimizer.weight_decay = parse_f64(v)?,
            "train.clip_norm" => self.train.clip_norm = parse_f64(v)?,
            "train.batch" => self.train.batch = parse_num(v)?,
            "train.steps" => self.train.steps = parse_num(v)?,
            "task.segment_seconds" => self.task.segment_seconds = parse_f64(v)?,
            "task.tones_min" => self.task.tones_min = parse_num(v)?,
            "task.tones_max" => self.task.tones_max = parse_num(v)?,
            "task.freq_min" => self.task.freq_min = parse_f64(v)?,
            "task.freq_max" => self.task.freq_max = parse_f64(v)?,
            "task.snr_min_db" => self.task.snr_min_db = parse_f64(v)?,
            "task.snr_max_db" => self.task.snr_max_db = parse_f64(v)?,
            "task.train_size" => self.task.train_size = parse_num(v)?,
            "task.heldout_size" => self.task.heldout_size = parse_num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `text` on top of `base`, then validates the result.
    pub fn parse_with_base(text: &str, base: RunConfig) -> Result<Self> {
        let mut cfg = base;
        let mut seen: Vec<&str> = Vec::new();
        let mut depth_line = None;
        let mut dilations_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::ConfigParse { line: line_no, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(err(format!("key `{key}` given twice")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
            seen.push(key);
            match key {
                "dense.depth" => depth_line = Some(line_no),
                "dense.dilations" => dilations_set = true,
                _ => {}
            }
        }
        if depth_line.is_some() && !dilations_set {
            let d = &cfg.model.dense;
            cfg.model.dense = DenseBlockSpec::new(d.depth, d.channels, d.kernel, d.variant);
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` over the default configuration.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, RunConfig::default())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; parsing it reproduces `self` exactly.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of the canonical dump.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.dump().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
