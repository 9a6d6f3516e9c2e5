//! Training loop.
//!
//! The batch, slot draws, Gumbel noise and dropout masks of step `k` all come
//! from a ChaCha stream keyed by `(seed, k)`, so a run is reproducible step by
//! step regardless of how it was interrupted.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{window_tensor, LossOptions, Steve};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::{schedule_scale, LrSchedule, TemperatureSchedule};
use crate::synthgen::VideoClip;

pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// One row of the scalar log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub dvae: f64,
    pub tau: f64,
    pub lr_encoder: f64,
}

/// Schedules in effect for a run, after desk-scale stretching.
#[derive(Debug, Clone, Copy)]
pub struct Schedules {
    pub tau: TemperatureSchedule,
    pub lr: LrSchedule,
}

impl Schedules {
    pub fn for_model(model: &Steve) -> Self {
        let f = schedule_scale(&model.cfg.train);
        Self {
            tau: TemperatureSchedule::from_config(&model.cfg.dvae).scaled(f),
            lr: LrSchedule::from_config(&model.cfg.train).scaled(f),
        }
    }
}

/// Clip indices and window starts for step `step`.
pub fn batch_plan(clips: &[VideoClip], batch: usize, len: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if clips.is_empty() {
        return Err(Error::Dataset {
            context: "training set".into(),
            message: "no clips".into(),
        });
    }
    let mut idx = Vec::with_capacity(batch);
    let mut starts = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = rng.gen_range(0..clips.len());
        let c = &clips[i];
        if c.num_frames < len {
            return Err(Error::Dataset {
                context: c.id.clone(),
                message: format!("{} frames, episode length is {len}", c.num_frames),
            });
        }
        idx.push(i);
        starts.push(rng.gen_range(0..=c.num_frames - len));
    }
    Ok((idx, starts))
}

pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Where a run writes its artefacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub final_step: usize,
}

pub struct Trainer<'a> {
    pub model: &'a mut Steve,
    opt: Adam,
    schedules: Schedules,
    pub step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Steve) -> Self {
        let t = &model.cfg.train;
        let opt = Adam::new(AdamConfig {
            beta1: t.adam_beta1,
            beta2: t.adam_beta2,
            eps: t.adam_eps,
        });
        let schedules = Schedules::for_model(model);
        Self {
            model,
            opt,
            schedules,
            step: 0,
        }
    }

    pub fn schedules(&self) -> Schedules {
        self.schedules
    }

    /// Learning rate of a parameter group at `step`.
    pub fn lr(&self, group: &str, step: usize) -> Option<f64> {
        let t = &self.model.cfg.train;
        let peak = match group {
            "dvae" => t.lr_dvae,
            "encoder" => t.lr_encoder,
            "decoder" | "mixture" => t.lr_decoder,
            _ => return None,
        };
        Some(self.schedules.lr.at(step, peak))
    }

    /// One optimisation step on the batch determined by `(seed, step)`.
    pub fn train_step(&mut self, clips: &[VideoClip]) -> Result<LogRow> {
        let cfg = self.model.cfg.train.clone();
        let step = self.step;
        let mut rng = step_rng(cfg.seed, step);
        let (idx, starts) = batch_plan(clips, cfg.batch_size, cfg.episode_length, &mut rng)?;
        let refs: Vec<&VideoClip> = idx.iter().map(|&i| &clips[i]).collect();
        let frames = window_tensor(&refs, &starts, cfg.episode_length, self.model.dtype())?;
        let tau = self.schedules.tau.at(step);
        let inputs = self
            .model
            .sample_step_inputs(cfg.batch_size, cfg.episode_length, tau, &mut rng)?;
        let out = self.model.loss(&frames, inputs, LossOptions::default())?;
        let total = out.total_value()?;
        for (what, v) in [("total loss", total), ("L_CE", out.ce), ("L_dVAE", out.dvae)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: what.into(),
                });
            }
        }
        if total > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss: total });
        }
        let grads = out.total.backward()?;
        // resolved up front: the optimiser borrows self mutably below
        let lr_table: Vec<(&str, Option<f64>)> = ["dvae", "encoder", "decoder", "mixture"]
            .iter()
            .map(|g| (*g, self.lr(g, step)))
            .collect();
        let lookup = |g: &str| lr_table.iter().find(|(n, _)| *n == g).and_then(|(_, v)| *v);
        self.opt.step(&self.model.ps, &grads, lookup, cfg.grad_clip)?;
        self.step += 1;
        Ok(LogRow {
            step,
            total,
            ce: out.ce,
            dvae: if out.mixture != 0.0 { out.mixture } else { out.dvae },
            tau,
            lr_encoder: self.lr("encoder", step).unwrap_or(0.0),
        })
    }

    /// Runs the configured number of steps, logging and checkpointing into `out`.
    pub fn run(&mut self, clips: &[VideoClip], out: &TrainOutput, mut progress: impl FnMut(&LogRow)) -> Result<TrainReport> {
        let cfg = self.model.cfg.train.clone();
        let mut writer = match &out.dir {
            Some(dir) => {
                let path = dir.join("log.csv");
                Some(csv::Writer::from_path(&path).map_err(|e| with_path(e, &path))?)
            }
            None => None,
        };
        let mut log = Vec::new();
        while self.step < cfg.steps {
            let row = self.train_step(clips)?;
            let done = self.step;
            if row.step % cfg.log_every.max(1) == 0 || done == cfg.steps {
                if let Some(w) = writer.as_mut() {
                    w.serialize(row)?;
                    w.flush().map_err(|e| Error::io("log.csv", e))?;
                }
                progress(&row);
                log.push(row);
            }
            if let Some(dir) = &out.dir {
                if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                    let path = dir.join(format!("checkpoint_{done:07}.ckpt"));
                    checkpoint::save(&path, &self.model.ps, &self.model.cfg, self.model.checkpoint_kind(), done)?;
                }
            }
        }
        if let Some(dir) = &out.dir {
            checkpoint::save(
                &dir.join("model.ckpt"),
                &self.model.ps,
                &self.model.cfg,
                self.model.checkpoint_kind(),
                self.step,
            )?;
        }
        Ok(TrainReport {
            log,
            final_step: self.step,
        })
    }
}

fn with_path(e: csv::Error, path: &Path) -> Error {
    Error::Dataset {
        context: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Loads a model from a checkpoint written by [`Trainer::run`].
pub fn load_model(path: &Path, dtype: candle_core::DType) -> Result<Steve> {
    let ck = checkpoint::load(path)?;
    let cfg = ck.config()?;
    let model = Steve::new(&cfg, dtype)?;
    ck.load_into(&model.ps, &[]).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(model)
}
