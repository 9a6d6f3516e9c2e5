//! Discrete VAE tokenizer.
//!
//! The encoder maps each `P×P` patch to logits over the vocabulary; the
//! decoder maps a grid of (soft or one-hot) token distributions back to
//! pixels through pixel-shuffle stages. For `P = 4`:
//!
//! * encoder: conv P×P stride P → 64, six 1×1 convs → 64, 1×1 conv → |V|,
//!   ReLU between all layers and none on the output;
//! * decoder: 1×1 → 64, then per ×2 stage
//!   `[3×3 → 64, 1×1 → 64, 1×1 → 64, 1×1 → 256, PixelShuffle(2)]`, then
//!   1×1 → 3 with no output activation.
//!
//! Larger patches use a `P×P` first conv and `log2(P)` decoder stages.
//!
//! Token grids are raster ordered: index `i = row · (W/P) + col`.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::DvaeConfig;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::ops;
use crate::params::ParamStore;

const ENCODER_HIDDEN_LAYERS: usize = 6;

#[derive(Debug, Clone)]
struct UpStage {
    conv3: Conv2d,
    mid1: Conv2d,
    mid2: Conv2d,
    expand: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Dvae {
    patch: Conv2d,
    enc_hidden: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    stages: Vec<UpStage>,
    dec_out: Conv2d,
    pub patch_size: usize,
    pub vocab_size: usize,
}

impl Dvae {
    pub fn new(ps: &mut ParamStore, cfg: &DvaeConfig) -> Result<Self> {
        let p = cfg.patch_size;
        if !p.is_power_of_two() || p < 2 {
            return Err(Error::config(format!("patch size {p} must be a power of two >= 2")));
        }
        let c = cfg.hidden;
        let v = cfg.vocab_size;
        let patch = Conv2d::new(ps, "dvae.enc.patch", 3, c, p, p, 0)?;
        let enc_hidden = (0..ENCODER_HIDDEN_LAYERS)
            .map(|i| Conv2d::new(ps, &format!("dvae.enc.hidden{i}"), c, c, 1, 1, 0))
            .collect::<Result<Vec<_>>>()?;
        let enc_out = Conv2d::new(ps, "dvae.enc.out", c, v, 1, 1, 0)?;
        let dec_in = Conv2d::new(ps, "dvae.dec.in", v, c, 1, 1, 0)?;
        let stages = (0..p.trailing_zeros() as usize)
            .map(|i| -> Result<UpStage> {
                let n = format!("dvae.dec.stage{i}");
                Ok(UpStage {
                    conv3: Conv2d::new(ps, &format!("{n}.conv3"), c, c, 3, 1, 1)?,
                    mid1: Conv2d::new(ps, &format!("{n}.mid1"), c, c, 1, 1, 0)?,
                    mid2: Conv2d::new(ps, &format!("{n}.mid2"), c, c, 1, 1, 0)?,
                    expand: Conv2d::new(ps, &format!("{n}.expand"), c, 4 * c, 1, 1, 0)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_out = Conv2d::new(ps, "dvae.dec.out", c, 3, 1, 1, 0)?;
        Ok(Self {
            patch,
            enc_hidden,
            enc_out,
            dec_in,
            stages,
            dec_out,
            patch_size: p,
            vocab_size: v,
        })
    }

    /// `(B, 3, H, W) -> (B, |V|, H/P, W/P)` unnormalised logits.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::shape(format!(
                "dvae_encode: input {:?} incompatible with patch size {}",
                x.dims(),
                self.patch_size
            )));
        }
        let mut h = self.patch.forward(x)?.relu()?;
        for layer in &self.enc_hidden {
            h = layer.forward(&h)?.relu()?;
        }
        self.enc_out.forward(&h)
    }

    /// `(B, |V|, h, w) -> (B, 3, h·P, w·P)`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, v, _, _) = z.dims4()?;
        if v != self.vocab_size {
            return Err(Error::shape(format!(
                "dvae_decode: grid has {v} channels, vocabulary is {}",
                self.vocab_size
            )));
        }
        let mut h = self.dec_in.forward(z)?.relu()?;
        for s in &self.stages {
            h = s.conv3.forward(&h)?.relu()?;
            h = s.mid1.forward(&h)?.relu()?;
            h = s.mid2.forward(&h)?.relu()?;
            h = s.expand.forward(&h)?.relu()?;
            h = ops::pixel_shuffle(&h, 2)?;
        }
        self.dec_out.forward(&h)
    }

    /// One-hot `(B, |V|, h, w)` grid from raster token indices `(B, h·w)`.
    pub fn one_hot(&self, tokens: &[Vec<u32>], side: usize, dtype: candle_core::DType) -> Result<Tensor> {
        let b = tokens.len();
        let l = side * side;
        let v = self.vocab_size;
        let mut data = vec![0.0f64; b * v * l];
        for (bi, seq) in tokens.iter().enumerate() {
            if seq.len() != l {
                return Err(Error::shape(format!("token grid of length {} != {l}", seq.len())));
            }
            for (i, &tok) in seq.iter().enumerate() {
                if tok as usize >= v {
                    return Err(Error::Domain(format!("token {tok} outside vocabulary {v}")));
                }
                data[(bi * v + tok as usize) * l + i] = 1.0;
            }
        }
        ops::from_f64(data, &[b, v, side, side], dtype)
    }
}

/// Number of tokens for an `h × w` image at patch size `p`.
pub fn token_count(h: usize, w: usize, p: usize) -> Result<usize> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("{h}x{w} not divisible by patch {p}")));
    }
    Ok((h / p) * (w / p))
}

/// Standard Gumbel samples `-ln(-ln u)`.
pub fn gumbel_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // open interval keeps both logs finite
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gumbel-Softmax over a single categorical.
///
/// `noise = None` suppresses the Gumbel perturbation. In hard mode the result
/// is the exact one-hot of `argmax(logits + g)`; the matching soft
/// probabilities are returned alongside for straight-through use.
pub fn gumbel_softmax(
    logits: &[f64],
    tau: f64,
    hard: bool,
    noise: Option<&[f64]>,
) -> Result<GumbelSample> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if let Some(g) = noise {
        if g.len() != logits.len() {
            return Err(Error::shape("noise length differs from logits"));
        }
    }
    let perturbed: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| l + noise.map_or(0.0, |g| g[i]))
        .collect();
    let max = perturbed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = perturbed.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let soft: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let index = argmax(&perturbed);
    let output = if hard {
        let mut one_hot = vec![0.0; logits.len()];
        one_hot[index] = 1.0;
        one_hot
    } else {
        soft.clone()
    };
    Ok(GumbelSample { output, soft, index })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    pub output: Vec<f64>,
    pub soft: Vec<f64>,
    pub index: usize,
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Tensor Gumbel-Softmax along dim 1 of `(B, |V|, h, w)` logits.
///
/// Hard mode uses the straight-through estimator: the forward value is the
/// one-hot, the gradient is that of the soft sample.
pub fn gumbel_softmax_grid(logits: &Tensor, noise: Option<&Tensor>, tau: f64, hard: bool) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let perturbed = match noise {
        Some(g) => (logits + g)?,
        None => logits.clone(),
    };
    let soft = ops::softmax(&(perturbed / tau)?, 1)?;
    if !hard {
        return Ok(soft);
    }
    Ok(soft.contiguous()?.apply_op1(StraightThrough)?)
}

/// Forward: one-hot of the argmax along dim 1 of `(B, V, h, w)` (first index
/// on ties). Backward: identity, so gradients flow to the soft sample.
/// Written as an op because `(one_hot - soft) + soft` is not exactly one-hot
/// in floating point.
struct StraightThrough;

impl StraightThrough {
    fn one_hot<T: Copy + PartialOrd + From<u8>>(src: &[T], b: usize, v: usize, hw: usize) -> Vec<T> {
        let mut out = vec![T::from(0); src.len()];
        for bi in 0..b {
            let base = bi * v * hw;
            for p in 0..hw {
                let mut best = 0;
                for k in 1..v {
                    if src[base + k * hw + p] > src[base + best * hw + p] {
                        best = k;
                    }
                }
                out[base + best * hw + p] = T::from(1);
            }
        }
        out
    }
}

impl CustomOp1 for StraightThrough {
    fn name(&self) -> &'static str {
        "straight-through-one-hot"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, v, h, w) = layout.shape().dims4()?;
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(Self::one_hot(ops::contiguous_slice(s, layout, "one-hot")?, b, v, h * w)),
            CpuStorage::F64(s) => CpuStorage::F64(Self::one_hot(ops::contiguous_slice(s, layout, "one-hot")?, b, v, h * w)),
            _ => candle_core::bail!("one-hot supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.clone()))
    }
}

/// Raster token indices `argmax_v(logits + noise)` for each batch element.
pub fn hard_tokens(logits: &Tensor, noise: Option<&Tensor>) -> Result<Vec<Vec<u32>>> {
    let perturbed = match noise {
        Some(g) => (logits + g)?,
        None => logits.clone(),
    };
    let (b, _, h, w) = perturbed.dims4()?;
    let idx = perturbed.argmax(1)?.reshape((b, h * w))?;
    Ok(idx.to_vec2::<u32>()?)
}

/// Sum of squared errors over frames, pixels and channels, divided by `batch`.
pub fn reconstruction_loss(recon: &Tensor, target: &Tensor, batch: usize) -> Result<Tensor> {
    if recon.dims() != target.dims() {
        return Err(Error::shape(format!(
            "reconstruction {:?} vs target {:?}",
            recon.dims(),
            target.dims()
        )));
    }
    Ok(((recon - target)?.sqr()?.sum_all()? / batch as f64)?)
}

/// Host version of the dVAE loss for frames given as flat slices
/// (one slice per frame): `Σ_t ||x̂_t − x_t||²`.
pub fn dvae_loss(frames: &[&[f32]], recons: &[&[f32]]) -> Result<f64> {
    if frames.len() != recons.len() {
        return Err(Error::shape("frame count mismatch"));
    }
    let mut total = 0.0;
    for (x, r) in frames.iter().zip(recons) {
        if x.len() != r.len() {
            return Err(Error::shape("frame size mismatch"));
        }
        total += x
            .iter()
            .zip(r.iter())
            .map(|(a, b)| {
                let d = (*b as f64) - (*a as f64);
                d * d
            })
            .sum::<f64>();
    }
    Ok(total)
}

/// Last-dim softmax check used by tests and diagnostics.
pub fn row_sums(t: &Tensor) -> Result<Vec<f64>> {
    ops::to_vec_f64(&t.sum(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn small(p: usize) -> (ParamStore, Dvae) {
        let mut ps = ParamStore::new(5, DType::F32);
        let cfg = DvaeConfig {
            patch_size: p,
            vocab_size: 32,
            hidden: 16,
            ..DvaeConfig::default()
        };
        let d = Dvae::new(&mut ps, &cfg).unwrap();
        (ps, d)
    }

    #[test]
    fn token_count_law() {
        for h in [64, 128] {
            for p in [4, 16, 32] {
                assert_eq!(token_count(h, h, p).unwrap(), (h / p) * (h / p));
            }
        }
        assert_eq!(token_count(128, 128, 4).unwrap(), 1024);
        assert!(token_count(64, 64, 5).is_err());
    }

    #[test]
    fn encode_and_decode_shapes_for_each_patch() {
        for p in [4, 16, 32] {
            let (_, d) = small(p);
            let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
            let logits = d.encode(&x).unwrap();
            assert_eq!(logits.dims(), &[2, 32, 64 / p, 64 / p]);
            let z = gumbel_softmax_grid(&logits, None, 1.0, false).unwrap();
            let y = d.decode(&z).unwrap();
            assert_eq!(y.dims(), &[2, 3, 64, 64]);
        }
    }

    #[test]
    fn full_size_encoder_emits_4096_logits_per_cell() {
        let mut ps = ParamStore::new(5, DType::F32);
        let d = Dvae::new(&mut ps, &DvaeConfig::default()).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.encode(&x).unwrap().dims(), &[1, 4096, 16, 16]);
        let z = Tensor::zeros((1, 4096, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.decode(&z).unwrap().dims(), &[1, 3, 64, 64]);
    }

    #[test]
    fn constant_frame_gives_identical_cells() {
        let (_, d) = small(4);
        let x = (Tensor::ones((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap() * 0.3).unwrap();
        let logits = d.encode(&x).unwrap();
        let cells = logits.permute((0, 2, 3, 1)).unwrap().reshape((16, 32)).unwrap();
        let rows = cells.to_vec2::<f32>().unwrap();
        for r in &rows[1..] {
            assert_eq!(r, &rows[0]);
        }
    }

    #[test]
    fn shape_errors() {
        let (_, d) = small(4);
        let x = Tensor::zeros((1, 3, 10, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(d.encode(&x), Err(Error::Shape(_))));
        let z = Tensor::zeros((1, 31, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(d.decode(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_is_pure_and_finite() {
        let (_, d) = small(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = gumbel_noise(32 * 16, &mut rng);
        let logits = ops::from_f64(g, &[1, 32, 4, 4], DType::F32).unwrap();
        let z = gumbel_softmax_grid(&logits, None, 0.5, false).unwrap();
        let a = ops::to_vec_f32(&d.decode(&z).unwrap()).unwrap();
        let b = ops::to_vec_f32(&d.decode(&z).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gumbel_saturates_and_normalises() {
        let s = gumbel_softmax(&[5.0, 0.0, 0.0], 0.01, false, None).unwrap();
        assert!((s.output[0] - 1.0).abs() < 1e-6);
        assert!(s.output[1].abs() < 1e-6 && s.output[2].abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..7).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let g = gumbel_noise(7, &mut rng);
            let tau = rng.gen_range(0.05..3.0);
            let s = gumbel_softmax(&logits, tau, false, Some(&g)).unwrap();
            assert!((s.output.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let h = gumbel_softmax(&logits, tau, true, Some(&g)).unwrap();
            assert_eq!(h.output.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(h.output.iter().filter(|&&v| v == 0.0).count(), 6);
            assert_eq!(h.output[h.index], 1.0);
        }
    }

    #[test]
    fn gumbel_rejects_non_positive_temperature() {
        assert!(matches!(gumbel_softmax(&[1.0], 0.0, false, None), Err(Error::Domain(_))));
        assert!(matches!(gumbel_softmax(&[1.0], -1.0, true, None), Err(Error::Domain(_))));
    }

    #[test]
    fn hard_and_soft_agree_as_temperature_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g = gumbel_noise(5, &mut rng);
            let hard = gumbel_softmax(&logits, 1.0, true, Some(&g)).unwrap();
            let soft = gumbel_softmax(&logits, 1e-4, false, Some(&g)).unwrap();
            assert_eq!(argmax(&soft.output), hard.index);
        }
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        // Monte-Carlo against the exact uniform distribution over 4 categories.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let g = gumbel_noise(4, &mut rng);
            counts[gumbel_softmax(&[0.0; 4], 1.0, true, Some(&g)).unwrap().index] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = ops::from_f64(gumbel_noise(6 * 4, &mut rng), &[1, 6, 2, 2], DType::F64).unwrap();
        let y = gumbel_softmax_grid(&logits, None, 0.7, true).unwrap();
        let v = ops::to_vec_f64(&y.permute((0, 2, 3, 1)).unwrap()).unwrap();
        for cell in v.chunks(6) {
            assert_eq!(cell.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(cell.iter().filter(|&&x| x == 0.0).count(), 5);
        }
        let toks = hard_tokens(&logits, None).unwrap();
        let y = ops::to_vec_f64(&y).unwrap();
        for (i, &t) in toks[0].iter().enumerate() {
            assert!((y[t as usize * 4 + i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_gradient_is_the_soft_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = gumbel_noise(5 * 3, &mut rng);
        let w = ops::from_f64(gumbel_noise(5 * 3, &mut rng), &[1, 5, 1, 3], DType::F64).unwrap();
        let grad = |hard: bool| {
            let l = candle_core::Var::from_tensor(&ops::from_f64(raw.clone(), &[1, 5, 1, 3], DType::F64).unwrap()).unwrap();
            let y = gumbel_softmax_grid(l.as_tensor(), None, 0.5, hard).unwrap();
            let g = (y * &w).unwrap().sum_all().unwrap().backward().unwrap();
            ops::to_vec_f64(g.get(l.as_tensor()).unwrap()).unwrap()
        };
        assert_eq!(grad(true), grad(false));
    }

    #[test]
    fn dvae_loss_examples() {
        let x = [0.2f32, 0.4, 0.6, 0.8];
        assert_eq!(dvae_loss(&[&x], &[&x]).unwrap(), 0.0);
        let r: Vec<f32> = x.iter().map(|v| v + 0.1).collect();
        assert!((dvae_loss(&[&x], &[&r]).unwrap() - 0.04).abs() < 1e-6);
        let y = [0.0f32, 1.0, 0.5, 0.5];
        let a = dvae_loss(&[&x, &y], &[&r, &x]).unwrap();
        let b = dvae_loss(&[&y, &x], &[&x, &r]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(dvae_loss(&[&x], &[&x[..3]]).is_err());
    }
}
