//! Optimizer, synthetic task, checkpoints and the toy training loop.

mod adamw;
mod checkpoint;
mod toy;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, check_gradients, clip_global_norm, global_norm, AdamWConfig, OptState};
pub use checkpoint::Checkpoint;
pub use toy::{si_snr, si_snr_single, Split, ToyExample, ToyTaskSpec, SI_SNR_CAP};

use crate::blocks::{Model, Module};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{objective, LossBreakdown, Targets};
use crate::spectral::Stft;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub batch: usize,
    pub steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            clip_norm: 5.0,
            batch: 2,
            steps: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.clip_norm > 0.0) || self.batch == 0 {
            return Err(Error::Config("clip_norm and batch must be positive".into()));
        }
        Ok(())
    }
}

/// File names inside a training output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.pkck";
pub const LOSS_LOG_FILE: &str = "loss.log";

#[derive(Debug)]
pub struct TrainReport {
    pub model: Model,
    pub losses: Vec<LossBreakdown>,
    pub checkpoint: Option<PathBuf>,
}

/// Mean of the first and of the last `window` values (or fewer, if shorter).
pub fn endpoint_averages(values: &[f64], window: usize) -> Option<(f64, f64)> {
    if values.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(values.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..w]), mean(&values[values.len() - w..])))
}

/// Training example indices of step `step`; a pure function of the seed.
pub fn batch_indices(cfg: &RunConfig, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x6261_7463_6800_0000);
    rng.set_word_pos((step as u128) * 16 * cfg.train.batch as u128);
    (0..cfg.train.batch).map(|_| rng.random_range(0..cfg.task.train_size)).collect()
}

/// Loss and gradients of one batch.
pub fn loss_and_grads(
    model: &Model,
    stft: &Stft,
    cfg: &RunConfig,
    clean: &Tensor,
    noisy: &Tensor,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let noisy_spec = stft.stft(noisy)?.compress()?;
    let clean_spec = stft.stft(clean)?.compress()?;
    let tape = Tape::new();
    let out = model.forward(&tape, &noisy_spec.magnitude, &noisy_spec.phase)?;
    let targets = Targets {
        noisy_magnitude: &noisy_spec.magnitude,
        clean: &clean_spec,
        clean_wave: clean,
    };
    let (total, breakdown) = objective(stft, &out.mask, &out.phase, &targets, &cfg.loss, cfg.loss_mode)?;
    if !breakdown.total.is_finite() {
        return Ok((breakdown, BTreeMap::new()));
    }
    total.backward()?;
    Ok((breakdown, tape.param_grads().into_iter().collect()))
}

struct Outputs {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let log = OpenOptions::new().create(true).append(true).open(dir.join(LOSS_LOG_FILE))?;
        Ok(Outputs { dir: dir.to_path_buf(), log: BufWriter::new(log) })
    }

    fn checkpoint(&self, cfg: &RunConfig, step: usize, model: &Model) -> Result<PathBuf> {
        let path = self.dir.join(CHECKPOINT_FILE);
        Checkpoint::from_model(cfg, step, model).save(&path)?;
        Ok(path)
    }
}

/// Trains a freshly initialized model on the toy task for `cfg.train.steps`
/// steps. With an output directory, the initial and final checkpoints and a
/// per-step loss log are written there. A non-finite loss or gradient aborts
/// with the last good checkpoint.
pub fn train_toy(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let stft = Stft::new(&cfg.stft)?;
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    let mut state = OptState::new(cfg.train.optimizer)?;
    let mut outputs = out_dir.map(Outputs::open).transpose()?;
    let mut checkpoint = match &outputs {
        Some(o) => Some(o.checkpoint(cfg, 0, &model)?),
        None => None,
    };
    let mut losses = Vec::with_capacity(cfg.train.steps);

    for step in 0..cfg.train.steps {
        let (clean, noisy) = cfg.task.batch(Split::Train, &batch_indices(cfg, step));
        let (breakdown, mut grads) = loss_and_grads(&model, &stft, cfg, &clean, &noisy)?;
        let finite = breakdown.total.is_finite() && check_gradients(grads.iter().map(|(n, g)| (n.as_str(), g))).is_ok();
        if !finite {
            if let Some(o) = &outputs {
                checkpoint = Some(o.checkpoint(cfg, step, &model)?);
            }
            log::error!("step {step}: non-finite loss or gradient ({breakdown})");
            return Err(Error::Diverged { step, checkpoint });
        }
        let norm = clip_global_norm(&mut grads, cfg.train.clip_norm);
        adamw_step(&mut model.params_mut(), &grads, &mut state)?;
        if let Some(o) = &mut outputs {
            writeln!(o.log, "step={} {breakdown} grad_norm={norm:.6e}", step + 1)?;
        }
        if step % 100 == 0 {
            log::info!("step {}: {breakdown}", step + 1);
        }
        losses.push(breakdown);
    }
    if let Some(o) = &mut outputs {
        o.log.flush()?;
        checkpoint = Some(o.checkpoint(cfg, cfg.train.steps, &model)?);
    }
    Ok(TrainReport { model, losses, checkpoint })
}

/// Mean SI-SNR of the noisy inputs and of the enhanced outputs over the
/// held-out split.
pub fn evaluate_heldout(model: &Model, cfg: &RunConfig) -> Result<(f64, f64)> {
    let stft = Stft::new(&cfg.stft)?;
    let (mut before, mut after) = (0.0, 0.0);
    let n = cfg.task.heldout_size;
    for start in (0..n).step_by(8) {
        let idx: Vec<usize> = (start..(start + 8).min(n)).collect();
        let (clean, noisy) = cfg.task.batch(Split::Heldout, &idx);
        let enhanced = model.enhance(&stft, &noisy)?;
        before += si_snr(&noisy, &clean)? * idx.len() as f64;
        after += si_snr(&enhanced, &clean)? * idx.len() as f64;
    }
    Ok((before / n as f64, after / n as f64))
}
