//! Probe of slot content: a mixture decoder trained on the slots of a frozen
//! model. Its decoding masks give a second segmentation to compare with the
//! encoder's attention masks.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, DatasetReport, EvalSettings, MaskSource};
use crate::mixture::{mixture_loss, MixtureDecoder};
use crate::model::{window_tensor, Steve};
use crate::ops;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::synthgen::VideoClip;
use crate::train::{batch_plan, step_rng};

pub const PREFIX: &str = "diagnostic";

#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub ps: ParamStore,
    pub decoder: MixtureDecoder,
}

impl Diagnostic {
    pub fn new(cfg: &RunConfig, dtype: DType) -> Result<Self> {
        let mut ps = ParamStore::new(cfg.train.seed ^ 0xD1A6, dtype);
        let decoder = MixtureDecoder::new(
            &mut ps,
            PREFIX,
            &cfg.decoder.mixture,
            cfg.encoder.slot_dim,
            cfg.data.image_size,
        )?;
        Ok(Self { ps, decoder })
    }

    pub fn load(path: &Path, dtype: DType) -> Result<(Self, RunConfig)> {
        let ck = checkpoint::load(path)?;
        if ck.header.kind != "diagnostic" {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected a diagnostic checkpoint, found {:?}", ck.header.kind),
            });
        }
        let cfg = ck.config()?;
        let d = Self::new(&cfg, dtype)?;
        ck.load_into(&d.ps, &[])?;
        Ok((d, cfg))
    }

    pub fn save(&self, path: &Path, cfg: &RunConfig, step: usize) -> Result<()> {
        checkpoint::save(path, &self.ps, cfg, "diagnostic", step)
    }
}

/// Pre-interaction slots of a batch, cut from the encoder's graph.
pub fn frozen_slots(model: &Steve, frames: &Tensor, init_noise: &Tensor) -> Result<Tensor> {
    let s0 = model.encoder.init_slots_from_noise(init_noise)?;
    let enc = model.encoder.encode_video(frames, &s0)?;
    Ok(enc.pre_stacked()?.detach())
}

#[derive(Debug, Clone)]
pub struct DiagnosticRun {
    pub diagnostic: Diagnostic,
    pub losses: Vec<f64>,
}

/// Trains a fresh diagnostic decoder for `steps` steps on frozen slots.
///
/// Only the diagnostic parameter store is handed to the optimiser, so the
/// model is never written.
pub fn train_diagnostic(model: &Steve, clips: &[VideoClip], steps: usize, mut progress: impl FnMut(usize, f64)) -> Result<DiagnosticRun> {
    let cfg = &model.cfg;
    let t = &cfg.train;
    let diag = Diagnostic::new(cfg, model.dtype())?;
    let mut opt = Adam::new(AdamConfig {
        beta1: t.adam_beta1,
        beta2: t.adam_beta2,
        eps: t.adam_eps,
    });
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        // separate stream family from the main run
        let mut rng = step_rng(t.seed ^ 0x5EED_D1A6, step);
        let (idx, starts) = batch_plan(clips, t.batch_size, t.episode_length, &mut rng)?;
        let refs: Vec<&VideoClip> = idx.iter().map(|&i| &clips[i]).collect();
        let frames = window_tensor(&refs, &starts, t.episode_length, model.dtype())?;
        let noise = model
            .encoder
            .sample_init_noise(t.batch_size, cfg.encoder.num_slots, &mut rng, model.dtype())?;
        let slots = frozen_slots(model, &frames, &noise)?;
        let (b, tt, c, h, w) = frames.dims5()?;
        let target = frames.reshape((b * tt, c, h, w))?;
        let out = diag.decoder.forward(&slots)?;
        let loss = mixture_loss(&out.composite, &target, b)?;
        let value = ops::scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "diagnostic mixture loss".into(),
            });
        }
        let grads = loss.backward()?;
        opt.step(&diag.ps, &grads, |g| (g == PREFIX).then_some(t.lr_diagnostic), t.grad_clip)?;
        losses.push(value);
        progress(step, value);
    }
    Ok(DiagnosticRun {
        diagnostic: diag,
        losses,
    })
}

/// Decoding-mask and attention-mask reports on the same clips and slot draws.
pub fn compare_masks(model: &Steve, diag: &Diagnostic, clips: &[VideoClip], settings: EvalSettings) -> Result<(DatasetReport, DatasetReport)> {
    let decoding = eval::evaluate_dataset(model, clips, MaskSource::Decoding(&diag.decoder), settings)?;
    let attention = eval::evaluate_dataset(model, clips, MaskSource::Attention, settings)?;
    Ok((decoding, attention))
}
