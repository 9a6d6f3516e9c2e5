//! The full model: dVAE tokenizer, recurrent slot encoder and either the
//! slot-transformer decoder or an end-to-end mixture decoder.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderKind, RunConfig};
use crate::decoder::{cross_entropy_loss, SlotTransformerDecoder};
use crate::dvae::{self, Dvae};
use crate::error::{Error, Result};
use crate::mixture::{mixture_loss, MixtureDecoder};
use crate::nn::ForwardCtx;
use crate::ops;
use crate::params::ParamStore;
use crate::slot_encoder::{EncodedVideo, SlotEncoder};
use crate::synthgen::VideoClip;

#[derive(Debug, Clone)]
pub struct Steve {
    pub ps: ParamStore,
    pub cfg: RunConfig,
    pub dvae: Option<Dvae>,
    pub encoder: SlotEncoder,
    pub decoder: Option<SlotTransformerDecoder>,
    pub mixture: Option<MixtureDecoder>,
}

/// Randomness consumed by one loss evaluation.
///
/// `None` noise means the deterministic evaluation path: no Gumbel
/// perturbation, argmax tokens, no dropout.
pub struct StepInputs {
    pub tau: f64,
    /// Slot-init draws `(B, N, D)`.
    pub init_noise: Tensor,
    /// Gumbel noise for the soft dVAE path, `(B·T, |V|, h, w)`.
    pub soft_noise: Option<Tensor>,
    /// Independent Gumbel noise for hard target tokens.
    pub hard_noise: Option<Tensor>,
    pub dropout_rng: Option<ChaCha8Rng>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub ce: f64,
    pub dvae: f64,
    pub mixture: f64,
    pub encoded: EncodedVideo,
}

impl LossOutput {
    pub fn total_value(&self) -> Result<f64> {
        ops::scalar_f64(&self.total)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossOptions {
    /// Detach the dVAE so its parameters receive no gradient at all.
    pub freeze_dvae: bool,
    /// Drop L_CE from the total (the dVAE term alone).
    pub skip_ce: bool,
    /// Drop L_dVAE from the total.
    pub skip_dvae: bool,
}

impl Steve {
    pub fn new(cfg: &RunConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(cfg.train.seed, dtype);
        let encoder = SlotEncoder::new(&mut ps, &cfg.encoder, cfg.data.image_size)?;
        let (dvae, decoder, mixture) = match cfg.decoder.kind {
            DecoderKind::Transformer => {
                let dvae = Dvae::new(&mut ps, &cfg.dvae)?;
                let decoder = SlotTransformerDecoder::new(
                    &mut ps,
                    &cfg.decoder,
                    cfg.encoder.slot_dim,
                    cfg.dvae.vocab_size,
                    cfg.num_tokens(),
                )?;
                (Some(dvae), Some(decoder), None)
            }
            DecoderKind::Mixture => {
                let m = MixtureDecoder::new(
                    &mut ps,
                    "mixture",
                    &cfg.decoder.mixture,
                    cfg.encoder.slot_dim,
                    cfg.data.image_size,
                )?;
                (None, None, Some(m))
            }
        };
        Ok(Self {
            ps,
            cfg: cfg.clone(),
            dvae,
            encoder,
            decoder,
            mixture,
        })
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    pub fn kind(&self) -> DecoderKind {
        self.cfg.decoder.kind
    }

    pub fn checkpoint_kind(&self) -> &'static str {
        match self.kind() {
            DecoderKind::Transformer => "steve",
            DecoderKind::Mixture => "mixture",
        }
    }

    /// Draws the inputs for one training step from `rng`.
    pub fn sample_step_inputs(&self, batch: usize, frames: usize, tau: f64, rng: &mut ChaCha8Rng) -> Result<StepInputs> {
        let dtype = self.dtype();
        let init_noise = self
            .encoder
            .sample_init_noise(batch, self.cfg.encoder.num_slots, rng, dtype)?;
        let (soft_noise, hard_noise) = match &self.dvae {
            Some(d) => {
                let side = self.cfg.token_side();
                let shape = [batch * frames, d.vocab_size, side, side];
                let n: usize = shape.iter().product();
                let soft = ops::from_f64(dvae::gumbel_noise(n, rng), &shape, dtype)?;
                let hard = ops::from_f64(dvae::gumbel_noise(n, rng), &shape, dtype)?;
                (Some(soft), Some(hard))
            }
            None => (None, None),
        };
        let dropout_rng = ChaCha8Rng::seed_from_u64(rand::Rng::gen(rng));
        Ok(StepInputs {
            tau,
            init_noise,
            soft_noise,
            hard_noise,
            dropout_rng: Some(dropout_rng),
        })
    }

    /// Deterministic inputs: zero init noise would collapse all slots, so
    /// the slot draw still comes from `seed`; everything else is noise-free.
    pub fn eval_inputs(&self, batch: usize, num_slots: usize, seed: u64) -> Result<StepInputs> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(StepInputs {
            tau: self.cfg.dvae.tau_end,
            init_noise: self.encoder.sample_init_noise(batch, num_slots, &mut rng, self.dtype())?,
            soft_noise: None,
            hard_noise: None,
            dropout_rng: None,
        })
    }

    /// `L = L_CE + L_dVAE` (or the mixture loss) on `frames: (B, T, 3, H, W)`.
    pub fn loss(&self, frames: &Tensor, inputs: StepInputs, opts: LossOptions) -> Result<LossOutput> {
        let (b, t, c, h, w) = frames.dims5()?;
        let flat = frames.reshape((b * t, c, h, w))?;
        let s0 = self.encoder.init_slots_from_noise(&inputs.init_noise)?;
        let encoded = self.encoder.encode_video(frames, &s0)?;
        let slots = encoded.pre_stacked()?;
        match self.kind() {
            DecoderKind::Transformer => {
                let dvae = self.dvae.as_ref().expect("transformer model has a dVAE");
                let decoder = self.decoder.as_ref().expect("transformer model has a decoder");
                let mut logits = dvae.encode(&flat)?;
                if opts.freeze_dvae {
                    logits = logits.detach();
                }
                let z_soft = dvae::gumbel_softmax_grid(&logits, inputs.soft_noise.as_ref(), inputs.tau, false)?;
                let recon = dvae.decode(&z_soft)?;
                let mut l_dvae = dvae::reconstruction_loss(&recon, &flat, b)?;
                if opts.freeze_dvae {
                    l_dvae = l_dvae.detach();
                }
                // targets are indices: no gradient reaches the dVAE through L_CE
                let tokens = dvae::hard_tokens(&logits.detach(), inputs.hard_noise.as_ref())?;
                let mut ctx = match inputs.dropout_rng {
                    Some(rng) => ForwardCtx::train(decoder.dropout, rng),
                    None => ForwardCtx::eval(),
                };
                let out = decoder.decode_logits(&slots, &tokens, &mut ctx)?;
                let l_ce = cross_entropy_loss(&out, &tokens, b)?;
                let ce = ops::scalar_f64(&l_ce)?;
                let dv = ops::scalar_f64(&l_dvae)?;
                let total = match (opts.skip_ce, opts.skip_dvae) {
                    (false, false) => (&l_ce + &l_dvae)?,
                    (true, false) => l_dvae,
                    (false, true) => l_ce,
                    (true, true) => l_ce.zeros_like()?,
                };
                Ok(LossOutput {
                    total,
                    ce,
                    dvae: dv,
                    mixture: 0.0,
                    encoded,
                })
            }
            DecoderKind::Mixture => {
                let m = self.mixture.as_ref().expect("mixture model has a mixture decoder");
                let out = m.forward(&slots)?;
                let loss = mixture_loss(&out.composite, &flat, b)?;
                Ok(LossOutput {
                    mixture: ops::scalar_f64(&loss)?,
                    total: loss,
                    ce: 0.0,
                    dvae: 0.0,
                    encoded,
                })
            }
        }
    }

    /// Runs the encoder over a clip with `num_slots` slots drawn from `seed`.
    pub fn encode_clip(&self, clip: &VideoClip, num_slots: usize, seed: u64) -> Result<EncodedVideo> {
        let frames = clip_tensor(&[clip], 0, clip.num_frames, self.dtype())?;
        self.encode_frames(&frames, num_slots, seed)
    }

    pub fn encode_frames(&self, frames: &Tensor, num_slots: usize, seed: u64) -> Result<EncodedVideo> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = frames.dim(0)?;
        let s0 = self.encoder.init_slots(b, num_slots, &mut rng)?;
        self.encoder.encode_video(frames, &s0)
    }

    /// Greedy token generation from slots `(B, N, D)` rendered through the dVAE decoder.
    pub fn reconstruct(&self, slots: &Tensor) -> Result<Tensor> {
        match (&self.dvae, &self.decoder, &self.mixture) {
            (Some(dvae), Some(decoder), _) => {
                let tokens = decoder.generate(slots)?;
                let side = self.cfg.token_side();
                dvae.decode(&dvae.one_hot(&tokens, side, self.dtype())?)
            }
            (_, _, Some(m)) => Ok(m.forward(slots)?.composite),
            _ => Err(Error::shape("model has no decoder")),
        }
    }

    /// dVAE round trip with argmax tokens, for visual checks.
    pub fn dvae_reconstruct(&self, frames: &Tensor) -> Result<Tensor> {
        let dvae = self.dvae.as_ref().ok_or_else(|| Error::shape("model has no dVAE"))?;
        let tokens = dvae::hard_tokens(&dvae.encode(frames)?, None)?;
        dvae.decode(&dvae.one_hot(&tokens, self.cfg.token_side(), self.dtype())?)
    }
}

/// Stacks frame windows `[start, start+len)` of each clip into `(B, len, 3, H, W)`.
pub fn clip_tensor(clips: &[&VideoClip], start: usize, len: usize, dtype: DType) -> Result<Tensor> {
    let starts = vec![start; clips.len()];
    window_tensor(clips, &starts, len, dtype)
}

/// Like [`clip_tensor`] with a separate start frame per clip.
pub fn window_tensor(clips: &[&VideoClip], starts: &[usize], len: usize, dtype: DType) -> Result<Tensor> {
    let Some(first) = clips.first() else {
        return Err(Error::shape("empty batch"));
    };
    let s = first.image_size;
    let hw = s * s;
    let mut data = Vec::with_capacity(clips.len() * len * 3 * hw);
    for (clip, &start) in clips.iter().zip(starts) {
        if clip.image_size != s || start + len > clip.num_frames {
            return Err(Error::shape(format!(
                "clip {} cannot supply frames {start}..{} at size {s}",
                clip.id,
                start + len
            )));
        }
        for t in start..start + len {
            let f = clip.frame(t);
            for ch in 0..3 {
                data.extend((0..hw).map(|p| f[p * 3 + ch]));
            }
        }
    }
    ops::from_f32(data, &[clips.len(), len, 3, s, s], dtype)
}
