//! Mixture decoder: each slot is decoded independently to an RGB image and a
//! mask logit; masks are normalised with a softmax across slots and the
//! composite is the mask-weighted sum of the per-slot images.
//!
//! Two decoder bodies are available. `Broadcast` tiles each slot over a grid,
//! adds a learned position embedding and runs a 4-layer CNN; when the grid is
//! smaller than the image, the leading layers are stride-2 transposed
//! convolutions. `Deconv` starts from a 1×1 seed and upsamples with stride-2
//! transposed convolutions all the way to the image size.

use candle_core::Tensor;

use crate::config::{MixtureConfig, MixtureVariant};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::ops;
use crate::params::ParamStore;

const BROADCAST_LAYERS: usize = 4;

#[derive(Debug, Clone)]
struct Layer {
    conv: Conv2d,
    upsample: bool,
}

#[derive(Debug, Clone)]
pub struct MixtureDecoder {
    variant: MixtureVariant,
    pos: Option<Linear>,
    layers: Vec<Layer>,
    grid: usize,
    pub image_size: usize,
}

/// `rgb: (B, N, 3, H, W)`, `masks: (B, N, 1, H, W)`, `composite: (B, 3, H, W)`.
#[derive(Debug, Clone)]
pub struct MixtureOutput {
    pub rgb: Tensor,
    pub masks: Tensor,
    pub composite: Tensor,
}

impl MixtureDecoder {
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &MixtureConfig, slot_dim: usize, image_size: usize) -> Result<Self> {
        let c = cfg.channels;
        let k = cfg.kernel;
        let pad = k / 2;
        let (grid, pos, layers) = match cfg.variant {
            MixtureVariant::Broadcast => {
                let grid = cfg.grid.unwrap_or(image_size);
                let ups = (image_size / grid).trailing_zeros() as usize;
                if image_size % grid != 0 || !(image_size / grid).is_power_of_two() || ups > BROADCAST_LAYERS {
                    return Err(Error::config(format!(
                        "broadcast grid {grid} cannot reach image size {image_size} in {BROADCAST_LAYERS} layers"
                    )));
                }
                let pos = Linear::new(ps, &format!("{prefix}.pos"), 4, slot_dim, true)?;
                let mut layers = Vec::with_capacity(BROADCAST_LAYERS);
                for i in 0..BROADCAST_LAYERS {
                    let input = if i == 0 { slot_dim } else { c };
                    let output = if i + 1 == BROADCAST_LAYERS { 4 } else { c };
                    layers.push(Layer {
                        conv: Conv2d::new(ps, &format!("{prefix}.conv{i}"), input, output, k, 1, pad)?,
                        upsample: i < ups,
                    });
                }
                (grid, Some(pos), layers)
            }
            MixtureVariant::Deconv => {
                if !image_size.is_power_of_two() {
                    return Err(Error::config("deconv mixture decoder needs a power-of-two image size"));
                }
                let ups = image_size.trailing_zeros() as usize;
                let mut layers = Vec::with_capacity(ups + 1);
                for i in 0..ups {
                    let input = if i == 0 { slot_dim } else { c };
                    layers.push(Layer {
                        conv: Conv2d::new(ps, &format!("{prefix}.deconv{i}"), input, c, k, 1, pad)?,
                        upsample: true,
                    });
                }
                layers.push(Layer {
                    conv: Conv2d::new(ps, &format!("{prefix}.out"), c, 4, 1, 1, 0)?,
                    upsample: false,
                });
                (1, None, layers)
            }
        };
        Ok(Self {
            variant: cfg.variant,
            pos,
            layers,
            grid,
            image_size,
        })
    }

    pub fn variant(&self) -> MixtureVariant {
        self.variant
    }

    /// Decodes `slots: (B, N, D)`.
    pub fn forward(&self, slots: &Tensor) -> Result<MixtureOutput> {
        let (b, n, d) = slots.dims3()?;
        let g = self.grid;
        let flat = slots.reshape((b * n, d, 1, 1))?;
        let mut x = flat.broadcast_as((b * n, d, g, g))?.contiguous()?;
        if let Some(pos) = &self.pos {
            let grid = ops::from_f64(ops::position_grid(g, g), &[g * g, 4], slots.dtype())?;
            let p = pos.forward(&grid)?.t()?.reshape((1, d, g, g))?;
            x = x.broadcast_add(&p)?;
        }
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.upsample {
                x = ops::zero_insert2(&x)?;
            }
            x = layer.conv.forward(&x)?;
            if i < last {
                x = x.relu()?;
            }
        }
        let hw = self.image_size;
        let x = x.reshape((b, n, 4, hw, hw))?;
        let rgb = x.narrow(2, 0, 3)?.contiguous()?;
        let logits = x.narrow(2, 3, 1)?;
        let masks = ops::softmax(&logits, 1)?;
        let composite = rgb.broadcast_mul(&masks)?.sum(1)?;
        Ok(MixtureOutput {
            rgb,
            masks,
            composite,
        })
    }
}

/// `Σ ||x̂ − x||²` over pixels and channels, averaged over `batch`.
pub fn mixture_loss(recon: &Tensor, target: &Tensor, batch: usize) -> Result<Tensor> {
    crate::dvae::reconstruction_loss(recon, target, batch)
}

/// Per-pixel argmax over slots of `masks: (N, H, W)` flattened, lowest index on ties.
pub fn mask_segmentation(masks: &[f32], n: usize, hw: usize) -> Vec<u32> {
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for s in 1..n {
                if masks[s * hw + p] > masks[best * hw + p] {
                    best = s;
                }
            }
            best as u32
        })
        .collect()
}
