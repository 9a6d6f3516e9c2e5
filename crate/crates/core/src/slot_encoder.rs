//! Recurrent slot encoder.
//!
//! Per frame: CNN features plus a learned position embedding, LayerNorm and a
//! 2-layer MLP give `e_t`. Slots carried from the previous frame attend over
//! `e_t` with the softmax taken across the slot axis, read out a weighted mean
//! of `v(e_t)`, update through a GRU and a residual MLP, and repeat for
//! `corrector_iters` iterations. The result `s̃_t` is used for decoding; a
//! transformer block over the slots gives `s_t` for the next frame.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, EncoderBlock, ForwardCtx, GruCell, LayerNorm, Linear, Mlp};
use crate::ops;
use crate::params::{Init, ParamStore};

const READOUT_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SlotEncoder {
    convs: Vec<Conv2d>,
    pos: Linear,
    feat_norm: LayerNorm,
    feat_mlp: Mlp,
    mu: Tensor,
    log_sigma: Tensor,
    norm_inputs: LayerNorm,
    norm_slots: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    gru: GruCell,
    norm_mlp: LayerNorm,
    mlp: Mlp,
    predictor: Vec<EncoderBlock>,
    pub cfg: EncoderConfig,
    image_size: usize,
}

/// Per-frame outputs of [`SlotEncoder::encode_video`].
#[derive(Debug, Clone)]
pub struct EncodedVideo {
    /// `s̃_t`, each `(B, N, D)`.
    pub pre: Vec<Tensor>,
    /// `s_t`, each `(B, N, D)`.
    pub post: Vec<Tensor>,
    /// Final-iteration attention per frame, each `(B, N, H_enc·W_enc)`.
    pub attn: Vec<Tensor>,
    /// Attention of every corrector iteration, `[frame][iteration]`.
    pub attn_iters: Vec<Vec<Tensor>>,
}

impl EncodedVideo {
    /// Pre-interaction slots stacked frame-major within each batch element: `(B·T, N, D)`.
    pub fn pre_stacked(&self) -> Result<Tensor> {
        let s = Tensor::stack(&self.pre, 1)?;
        let (b, t, n, d) = s.dims4()?;
        Ok(s.reshape((b * t, n, d))?)
    }
}

impl SlotEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &EncoderConfig, image_size: usize) -> Result<Self> {
        let c = cfg.cnn_channels;
        let d = cfg.slot_dim;
        let mut convs = Vec::with_capacity(4);
        for i in 0..4 {
            let (input, stride) = if i == 0 { (3, cfg.cnn_first_stride) } else { (c, 1) };
            convs.push(Conv2d::new(ps, &format!("encoder.cnn{i}"), input, c, 5, stride, 2)?);
        }
        let predictor = (0..cfg.predictor_blocks)
            .map(|i| {
                EncoderBlock::new(
                    ps,
                    &format!("encoder.predictor{i}"),
                    d,
                    cfg.predictor_heads,
                    cfg.mlp_hidden,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            pos: Linear::new(ps, "encoder.pos", 4, c, true)?,
            feat_norm: LayerNorm::new(ps, "encoder.feat_norm", c)?,
            feat_mlp: Mlp::new(ps, "encoder.feat_mlp", c, c, c)?,
            mu: ps.param("encoder.slot_mu", &[d], Init::Normal(1.0 / (d as f64).sqrt()))?,
            log_sigma: ps.param("encoder.slot_log_sigma", &[d], Init::Const(cfg.init_log_sigma))?,
            norm_inputs: LayerNorm::new(ps, "encoder.norm_inputs", c)?,
            norm_slots: LayerNorm::new(ps, "encoder.norm_slots", d)?,
            q: Linear::new(ps, "encoder.q", d, d, false)?,
            k: Linear::new(ps, "encoder.k", c, d, false)?,
            v: Linear::new(ps, "encoder.v", c, d, false)?,
            gru: GruCell::new(ps, "encoder.gru", d, d)?,
            norm_mlp: LayerNorm::new(ps, "encoder.norm_mlp", d)?,
            mlp: Mlp::new(ps, "encoder.mlp", d, cfg.mlp_hidden, d)?,
            predictor,
            cfg: cfg.clone(),
            image_size,
        })
    }

    pub fn feature_side(&self) -> usize {
        self.image_size / self.cfg.cnn_first_stride
    }

    /// `(B, 3, H, W) -> (B, H_enc·W_enc, C)`.
    pub fn backbone_features(&self, frames: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = frames.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::shape(format!(
                "backbone expects (B, 3, {s}, {s}), got {:?}",
                frames.dims(),
                s = self.image_size
            )));
        }
        let mut x = frames.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < self.convs.len() {
                x = x.relu()?;
            }
        }
        let (_, ch, he, we) = x.dims4()?;
        let x = x.permute((0, 2, 3, 1))?.reshape((b, he * we, ch))?;
        let grid = ops::from_f64(ops::position_grid(he, we), &[1, he * we, 4], x.dtype())?;
        let x = x.broadcast_add(&self.pos.forward(&grid)?)?;
        self.feat_mlp.forward(&self.feat_norm.forward(&x)?)
    }

    /// Standard-normal draws for `init_slots`, shape `(B, N, D)`.
    pub fn sample_init_noise(&self, batch: usize, num_slots: usize, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Tensor> {
        let n = batch * num_slots * self.cfg.slot_dim;
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        ops::from_f64(eps, &[batch, num_slots, self.cfg.slot_dim], dtype)
    }

    /// `s_0 = mu + exp(log_sigma) * eps`, reparameterised.
    pub fn init_slots_from_noise(&self, eps: &Tensor) -> Result<Tensor> {
        let sigma = self.log_sigma.exp()?;
        Ok(eps.broadcast_mul(&sigma)?.broadcast_add(&self.mu)?)
    }

    pub fn init_slots(&self, batch: usize, num_slots: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if num_slots < 1 {
            return Err(Error::config("num_slots must be >= 1"));
        }
        let eps = self.sample_init_noise(batch, num_slots, rng, self.mu.dtype())?;
        self.init_slots_from_noise(&eps)
    }

    fn keys_values(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let e = self.norm_inputs.forward(features)?;
        Ok((self.k.forward(&e)?, self.v.forward(&e)?))
    }

    fn corrector_kv(&self, slots: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.cfg.slot_dim as f64;
        let q = self.q.forward(&self.norm_slots.forward(slots)?)?;
        let logits = (ops::matmul(&q, &k.t()?)? / d.sqrt())?;
        // normalise across slots (dim 1), so slots compete for each location
        let attn = ops::softmax(&logits, 1)?;
        let mass = (attn.sum_keepdim(2)? + READOUT_EPS)?;
        let readout = ops::matmul(&attn, v)?.broadcast_div(&mass)?;
        let updated = self.gru.forward(&readout, slots)?;
        let updated = (&updated + self.mlp.forward(&self.norm_mlp.forward(&updated)?)?)?;
        Ok((updated, attn))
    }

    /// One attention + GRU iteration. `slots: (B, N, D)`, `features: (B, M, C)`.
    pub fn corrector_step(&self, slots: &Tensor, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let (k, v) = self.keys_values(features)?;
        self.corrector_kv(slots, &k, &v)
    }

    /// Transformer interaction across slots (no positional encoding).
    pub fn interact(&self, slots: &Tensor) -> Result<Tensor> {
        let mut ctx = ForwardCtx::eval();
        let mut s = slots.clone();
        for block in &self.predictor {
            s = block.forward(&s, None, &mut ctx)?;
        }
        Ok(s)
    }

    /// Rolls the encoder over `frames: (B, T, 3, H, W)` starting from `s0: (B, N, D)`.
    pub fn encode_video(&self, frames: &Tensor, s0: &Tensor) -> Result<EncodedVideo> {
        let (b, t, c, h, w) = frames.dims5()?;
        if t == 0 {
            return Err(Error::shape("encode_video needs at least one frame"));
        }
        let feats = self.backbone_features(&frames.reshape((b * t, c, h, w))?)?;
        let (_, m, _) = feats.dims3()?;
        let (k_all, v_all) = self.keys_values(&feats)?;
        let d = self.cfg.slot_dim;
        let k_all = k_all.reshape((b, t, m, d))?;
        let v_all = v_all.reshape((b, t, m, d))?;
        let mut out = EncodedVideo {
            pre: Vec::with_capacity(t),
            post: Vec::with_capacity(t),
            attn: Vec::with_capacity(t),
            attn_iters: Vec::with_capacity(t),
        };
        let mut slots = s0.clone();
        for ti in 0..t {
            let k = k_all.narrow(1, ti, 1)?.squeeze(1)?;
            let v = v_all.narrow(1, ti, 1)?.squeeze(1)?;
            let mut iters = Vec::with_capacity(self.cfg.corrector_iters);
            for _ in 0..self.cfg.corrector_iters {
                let (s, a) = self.corrector_kv(&slots, &k, &v)?;
                slots = s;
                iters.push(a);
            }
            let pre = slots.clone();
            slots = self.interact(&pre)?;
            out.attn.push(iters.last().expect("corrector_iters >= 1").clone());
            out.attn_iters.push(iters);
            out.pre.push(pre);
            out.post.push(slots.clone());
        }
        Ok(out)
    }
}
