//! Seeded comparison run: STEVE with small and large patches and the
//! end-to-end mixture baseline, scored on held-out clips against a
//! random-slot baseline.

use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::config::{DecoderKind, RunConfig, Split};
use crate::error::Result;
use crate::eval::{self, Aggregate, EvalSettings, MaskSource};
use crate::model::Steve;
use crate::synthgen::{generate_clips, VideoClip};
use crate::train::{TrainOutput, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SteveSmallPatch,
    SteveLargePatch,
    Mixture,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SteveSmallPatch, Variant::Mixture, Variant::SteveLargePatch];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SteveSmallPatch => "steve_small_patch",
            Variant::SteveLargePatch => "steve_large_patch",
            Variant::Mixture => "mixture",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub small_patch: usize,
    pub large_patch: usize,
    pub train_clips: usize,
    pub eval_clips: usize,
}

impl ExperimentConfig {
    /// Model and data sizes that let nine runs finish on one CPU core.
    pub fn desk() -> Self {
        let mut base = RunConfig::default();
        let d = &mut base.data;
        d.image_size = 32;
        d.object_size_min = 4;
        d.object_size_max = 8;
        d.texture_period_min = 2;
        d.texture_period_max = 4;
        d.ood_texture_period_min = 5;
        d.ood_texture_period_max = 7;
        d.max_speed = 1.0;
        base.dvae.vocab_size = 64;
        base.dvae.hidden = 32;
        let e = &mut base.encoder;
        e.slot_dim = 64;
        e.mlp_hidden = 64;
        e.cnn_first_stride = 2;
        base.decoder.hidden = 64;
        base.decoder.blocks = 2;
        base.decoder.mixture.grid = Some(8);
        base.decoder.mixture.channels = 16;
        base.decoder.mixture.kernel = 3;
        base.train.batch_size = 8;
        base.train.steps = 400;
        base.train.log_every = 50;
        base.train.checkpoint_every = 0;
        Self {
            base,
            seeds: vec![0, 1, 2],
            small_patch: 4,
            large_patch: 32,
            train_clips: 200,
            eval_clips: 50,
        }
    }

    pub fn run_config(&self, variant: Variant, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.train.seed = seed;
        match variant {
            Variant::SteveSmallPatch => cfg.dvae.patch_size = self.small_patch,
            Variant::SteveLargePatch => cfg.dvae.patch_size = self.large_patch,
            Variant::Mixture => cfg.decoder.kind = DecoderKind::Mixture,
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub final_loss: f64,
    pub first_loss: f64,
    pub seconds: f64,
    pub eval: Aggregate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub random: Aggregate,
    pub runs: Vec<RunResult>,
}

impl ExperimentReport {
    pub fn video(&self, variant: Variant, seed: u64) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
            .and_then(|r| r.eval.video_fgari)
    }

    /// Mean video FG-ARI of a variant over seeds.
    pub fn mean_video(&self, variant: Variant) -> Option<f64> {
        let v: Vec<f64> = self.config.seeds.iter().filter_map(|&s| self.video(variant, s)).collect();
        (v.len() == self.config.seeds.len() && !v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Number of seeds where `a` scores at least as high as `b`.
    pub fn wins(&self, a: Variant, b: Variant) -> usize {
        self.config
            .seeds
            .iter()
            .filter(|&&s| matches!((self.video(a, s), self.video(b, s)), (Some(x), Some(y)) if x >= y))
            .count()
    }
}

pub struct Data {
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
}

pub fn data(cfg: &ExperimentConfig) -> Result<Data> {
    let d = &cfg.base.data;
    Ok(Data {
        train: generate_clips(&d.scene(Split::Train), cfg.train_clips)?,
        test: generate_clips(&d.scene(Split::Iid), cfg.eval_clips)?,
    })
}

/// Trains one variant for one seed and scores it on the test clips with the
/// variant's own mask source.
pub fn run_one(cfg: &ExperimentConfig, data: &Data, variant: Variant, seed: u64, progress: &mut dyn FnMut(&str)) -> Result<RunResult> {
    let rc = cfg.run_config(variant, seed);
    let mut model = Steve::new(&rc, DType::F32)?;
    let start = Instant::now();
    let tag = format!("{} seed {seed}", variant.name());
    let report = Trainer::new(&mut model).run(&data.train, &TrainOutput::default(), |row| {
        progress(&format!("{tag} step {} loss {:.2}", row.step, row.total));
    })?;
    let eval = eval::aggregate(&eval::evaluate_dataset(
        &model,
        &data.test,
        MaskSource::default_for(&model),
        EvalSettings::for_model(&model),
    )?);
    progress(&format!("{tag} video fg-ari {:?}", eval.video_fgari));
    Ok(RunResult {
        variant,
        seed,
        first_loss: report.log.first().map_or(f64::NAN, |r| r.total),
        final_loss: report.log.last().map_or(f64::NAN, |r| r.total),
        seconds: start.elapsed().as_secs_f64(),
        eval,
    })
}

pub fn run(cfg: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<ExperimentReport> {
    cfg.base.validate()?;
    let data = data(cfg)?;
    let random = eval::aggregate(&eval::random_baseline(
        &data.test,
        cfg.base.encoder.num_slots,
        cfg.base.eval.seed,
    )?);
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for variant in Variant::ALL {
            runs.push(run_one(cfg, &data, variant, seed, &mut progress)?);
        }
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        random,
        runs,
    })
}
