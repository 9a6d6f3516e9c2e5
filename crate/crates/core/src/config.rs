//! Run configuration: one JSON document with sections
//! `data`, `dvae`, `encoder`, `decoder`, `train`, `eval`.
//!
//! Every section rejects unknown keys. Missing keys take the defaults below,
//! which follow the 64×64 model configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{SceneConfig, TextureKind, PATCH_SIZES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Iid,
    OodCount,
    OodTexture,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "iid" => Some(Split::Iid),
            "ood-count" => Some(Split::OodCount),
            "ood-texture" => Some(Split::OodTexture),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Iid => "iid",
            Split::OodCount => "ood-count",
            Split::OodTexture => "ood-texture",
        }
    }

    /// Offset added to the base seed so splits never share clips.
    fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Iid => 1_000_000,
            Split::OodCount => 2_000_000,
            Split::OodTexture => 3_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub num_objects_min: usize,
    pub num_objects_max: usize,
    pub num_frames: usize,
    pub textures: Vec<TextureKind>,
    pub texture_period_min: i64,
    pub texture_period_max: i64,
    /// Period range for the `ood-texture` split; must not overlap the train range.
    pub ood_texture_period_min: i64,
    pub ood_texture_period_max: i64,
    /// The `ood-count` split draws `[num_objects_max + 1, num_objects_max + ood_extra_objects]`.
    pub ood_extra_objects: usize,
    pub object_size_min: i64,
    pub object_size_max: i64,
    pub max_speed: f64,
    pub background_textured: bool,
    pub camera_pan: bool,
    pub max_pan: i64,
    pub static_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_objects_min: 2,
            num_objects_max: 3,
            num_frames: 24,
            textures: vec![
                TextureKind::Stripes,
                TextureKind::Checker,
                TextureKind::Dots,
                TextureKind::Flat,
            ],
            texture_period_min: 3,
            texture_period_max: 6,
            ood_texture_period_min: 8,
            ood_texture_period_max: 11,
            ood_extra_objects: 2,
            object_size_min: 6,
            object_size_max: 12,
            max_speed: 2.0,
            background_textured: true,
            camera_pan: false,
            max_pan: 1,
            static_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DataConfig {
    /// Generator parameters for a split.
    pub fn scene(&self, split: Split) -> SceneConfig {
        let mut scene = SceneConfig {
            image_size: self.image_size,
            num_objects: (self.num_objects_min, self.num_objects_max),
            num_frames: self.num_frames,
            textures: self.textures.clone(),
            texture_period: (self.texture_period_min, self.texture_period_max),
            object_size: (self.object_size_min, self.object_size_max),
            max_speed: self.max_speed,
            background_textured: self.background_textured,
            camera_pan: self.camera_pan,
            max_pan: self.max_pan,
            static_fraction: self.static_fraction,
            seed: self.seed.wrapping_add(split.seed_offset()),
        };
        match split {
            Split::Train | Split::Iid => {}
            Split::OodCount => {
                scene.num_objects = (
                    self.num_objects_max + 1,
                    self.num_objects_max + self.ood_extra_objects.max(1),
                );
            }
            Split::OodTexture => {
                scene.texture_period = (self.ood_texture_period_min, self.ood_texture_period_max);
            }
        }
        scene
    }

    pub fn validate(&self) -> Result<()> {
        for split in [Split::Train, Split::OodCount, Split::OodTexture] {
            self.scene(split).validate()?;
        }
        let overlap = self.ood_texture_period_min <= self.texture_period_max
            && self.texture_period_min <= self.ood_texture_period_max;
        if overlap {
            return Err(Error::config("ood texture period range overlaps the train range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauCurve {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DvaeConfig {
    pub patch_size: usize,
    pub vocab_size: usize,
    pub hidden: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_decay_steps: usize,
    pub tau_curve: TauCurve,
}

impl Default for DvaeConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            vocab_size: 4096,
            hidden: 64,
            tau_start: 1.0,
            tau_end: 0.1,
            tau_decay_steps: 30000,
            tau_curve: TauCurve::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_slots: usize,
    pub slot_dim: usize,
    pub corrector_iters: usize,
    pub mlp_hidden: usize,
    pub predictor_blocks: usize,
    pub predictor_heads: usize,
    pub cnn_channels: usize,
    pub cnn_first_stride: usize,
    /// Initial log standard deviation of the slot prior.
    pub init_log_sigma: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_slots: 4,
            slot_dim: 192,
            corrector_iters: 2,
            mlp_hidden: 192,
            predictor_blocks: 1,
            predictor_heads: 4,
            cnn_channels: 32,
            cnn_first_stride: 1,
            init_log_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Autoregressive slot-transformer over dVAE tokens.
    Transformer,
    /// End-to-end mixture decoder trained on pixel reconstruction.
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    CrossAttention,
    Prefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureVariant {
    Broadcast,
    Deconv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub variant: MixtureVariant,
    /// Side of the broadcast grid; `None` means the image size.
    pub grid: Option<usize>,
    pub channels: usize,
    pub kernel: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            variant: MixtureVariant::Broadcast,
            grid: None,
            channels: 32,
            kernel: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub conditioning: Conditioning,
    pub blocks: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub mixture: MixtureConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::Transformer,
            conditioning: Conditioning::CrossAttention,
            blocks: 4,
            heads: 4,
            hidden: 192,
            dropout: 0.1,
            mixture: MixtureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub episode_length: usize,
    pub steps: usize,
    pub lr_dvae: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub warmup_steps: usize,
    pub decay_halflife: usize,
    /// Schedules are stretched by `min(1, steps / schedule_reference_steps)`.
    pub schedule_reference_steps: usize,
    pub scale_schedules: bool,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub diagnostic_steps: usize,
    pub lr_diagnostic: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            episode_length: 3,
            steps: 5000,
            lr_dvae: 3e-4,
            lr_encoder: 1e-4,
            lr_decoder: 3e-4,
            warmup_steps: 30000,
            decay_halflife: 250000,
            schedule_reference_steps: 200000,
            scale_schedules: true,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 10,
            checkpoint_every: 1000,
            diagnostic_steps: 1000,
            lr_diagnostic: 3e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub past_frames: Vec<usize>,
    pub video_lengths: Vec<usize>,
    /// Extra slots for out-of-distribution evaluation; `None` derives it from
    /// the gap between the test and train maximum object counts.
    pub ood_extra_slots: Option<usize>,
    pub upsample: Upsample,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            past_frames: (0..=6).collect(),
            video_lengths: vec![3, 6, 12, 24],
            ood_extra_slots: None,
            upsample: Upsample::Bilinear,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub dvae: DvaeConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is always serialisable")
    }

    /// Token grid side for the configured image and patch size.
    pub fn token_side(&self) -> usize {
        self.data.image_size / self.dvae.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.token_side() * self.token_side()
    }

    /// Backbone feature map side.
    pub fn feature_side(&self) -> usize {
        self.data.image_size / self.encoder.cnn_first_stride
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let d = &self.dvae;
        if !PATCH_SIZES.contains(&d.patch_size) {
            return Err(Error::config(format!(
                "dvae.patch_size {} not in {PATCH_SIZES:?}",
                d.patch_size
            )));
        }
        if self.data.image_size % d.patch_size != 0 {
            return Err(Error::config("image_size not divisible by patch_size"));
        }
        if d.vocab_size < 2 || d.hidden == 0 {
            return Err(Error::config("dvae.vocab_size must be >= 2 and hidden > 0"));
        }
        if !(d.tau_start > 0.0 && d.tau_end > 0.0 && d.tau_end <= d.tau_start) {
            return Err(Error::config("temperatures must satisfy 0 < tau_end <= tau_start"));
        }
        let e = &self.encoder;
        if e.num_slots < 1 || e.slot_dim == 0 || e.corrector_iters < 1 || e.cnn_channels == 0 {
            return Err(Error::config(
                "encoder needs num_slots >= 1, slot_dim > 0, corrector_iters >= 1",
            ));
        }
        if e.cnn_first_stride == 0 || self.data.image_size % e.cnn_first_stride != 0 {
            return Err(Error::config("cnn_first_stride must divide image_size"));
        }
        if e.slot_dim % e.predictor_heads.max(1) != 0 || e.predictor_heads == 0 {
            return Err(Error::config("slot_dim must be divisible by predictor_heads"));
        }
        let dec = &self.decoder;
        if dec.heads == 0 || dec.hidden % dec.heads != 0 {
            return Err(Error::config("decoder.hidden must be divisible by decoder.heads"));
        }
        if !(0.0..1.0).contains(&dec.dropout) {
            return Err(Error::config("decoder.dropout must lie in [0, 1)"));
        }
        let m = &dec.mixture;
        let grid = m.grid.unwrap_or(self.data.image_size);
        if grid == 0
            || self.data.image_size % grid != 0
            || !(self.data.image_size / grid).is_power_of_two()
        {
            return Err(Error::config("mixture.grid must divide image_size by a power of two"));
        }
        if m.kernel % 2 == 0 || m.channels == 0 {
            return Err(Error::config("mixture.kernel must be odd and channels > 0"));
        }
        let t = &self.train;
        if t.lr_dvae <= 0.0 || t.lr_encoder <= 0.0 || t.lr_decoder <= 0.0 || t.lr_diagnostic <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if t.warmup_steps < 1 || t.decay_halflife < 1 || t.batch_size < 1 || t.episode_length < 1 {
            return Err(Error::config(
                "warmup_steps, decay_halflife, batch_size, episode_length must be >= 1",
            ));
        }
        if t.episode_length > self.data.num_frames {
            return Err(Error::config("episode_length exceeds data.num_frames"));
        }
        if self.eval.video_lengths.contains(&0) {
            return Err(Error::config("eval.video_lengths must be positive"));
        }
        Ok(())
    }
}
