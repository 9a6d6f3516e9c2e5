//! Autoregressive slot-transformer decoder over dVAE token sequences.
//!
//! The input sequence is `[BOS, emb(z_1), …, emb(z_{L−1})]` plus a learned
//! position embedding; output `l` predicts `z_l` from the slots and `z_{<l}`.
//! Slots condition the sequence either through cross-attention (default) or
//! as an unordered prefix that every token may attend to.

use candle_core::{DType, Tensor, D};

use crate::config::{Conditioning, DecoderConfig};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, DecoderBlock, EncoderBlock, ForwardCtx, LayerNorm, Linear};
use crate::ops;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
enum Blocks {
    Cross(Vec<DecoderBlock>),
    Prefix(Vec<EncoderBlock>),
}

#[derive(Debug, Clone)]
pub struct SlotTransformerDecoder {
    token_embedding: Tensor,
    bos: Tensor,
    position: Tensor,
    slot_proj: Linear,
    blocks: Blocks,
    final_norm: LayerNorm,
    head: Linear,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub dropout: f64,
}

impl SlotTransformerDecoder {
    pub fn new(
        ps: &mut ParamStore,
        cfg: &DecoderConfig,
        slot_dim: usize,
        vocab_size: usize,
        seq_len: usize,
    ) -> Result<Self> {
        let h = cfg.hidden;
        let mlp = 4 * h;
        let blocks = match cfg.conditioning {
            Conditioning::CrossAttention => Blocks::Cross(
                (0..cfg.blocks)
                    .map(|i| DecoderBlock::new(ps, &format!("decoder.block{i}"), h, cfg.heads, mlp))
                    .collect::<Result<_>>()?,
            ),
            Conditioning::Prefix => Blocks::Prefix(
                (0..cfg.blocks)
                    .map(|i| EncoderBlock::new(ps, &format!("decoder.block{i}"), h, cfg.heads, mlp))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            token_embedding: ps.param("decoder.token_embedding", &[vocab_size, h], Init::Normal(0.02))?,
            bos: ps.param("decoder.bos", &[h], Init::Normal(0.02))?,
            position: ps.param("decoder.position", &[seq_len, h], Init::Normal(0.02))?,
            slot_proj: Linear::new(ps, "decoder.slot_proj", slot_dim, h, true)?,
            blocks,
            final_norm: LayerNorm::new(ps, "decoder.final_norm", h)?,
            head: Linear::new(ps, "decoder.head", h, vocab_size, true)?,
            vocab_size,
            seq_len,
            dropout: cfg.dropout,
        })
    }

    fn check_tokens(&self, tokens: &[Vec<u32>]) -> Result<()> {
        for seq in tokens {
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::Domain(format!(
                    "token {bad} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Logits for positions `0..=m` given `m < L` preceding tokens per sequence.
    ///
    /// `slots: (B, N, D)`, `prefix`: `B` sequences of equal length `m`.
    /// Returns `(B, m + 1, |V|)`.
    pub fn forward_prefix(&self, slots: &Tensor, prefix: &[Vec<u32>], ctx: &mut ForwardCtx) -> Result<Tensor> {
        let (b, n, _) = slots.dims3()?;
        if prefix.len() != b {
            return Err(Error::shape(format!("{} token sequences for batch {b}", prefix.len())));
        }
        let m = prefix.first().map_or(0, |s| s.len());
        if prefix.iter().any(|s| s.len() != m) || m >= self.seq_len {
            return Err(Error::shape(format!(
                "token prefix length must be uniform and < {}",
                self.seq_len
            )));
        }
        self.check_tokens(prefix)?;
        let h = self.bos.dim(0)?;
        let dtype = slots.dtype();
        let bos = self.bos.reshape((1, 1, h))?.broadcast_as((b, 1, h))?;
        let x = if m > 0 {
            let ids: Vec<u32> = prefix.iter().flatten().copied().collect();
            let ids = Tensor::from_vec(ids, b * m, slots.device())?;
            let emb = self.token_embedding.index_select(&ids, 0)?.reshape((b, m, h))?;
            Tensor::cat(&[&bos.contiguous()?, &emb], 1)?
        } else {
            bos.contiguous()?
        };
        let x = x.broadcast_add(&self.position.narrow(0, 0, m + 1)?.unsqueeze(0)?)?;
        let mut x = ctx.dropout(&x)?;
        let memory = self.slot_proj.forward(slots)?;
        match &self.blocks {
            Blocks::Cross(blocks) => {
                let mask = causal_mask(m + 1, dtype)?;
                for block in blocks {
                    x = block.forward(&x, &memory, &mask, ctx)?;
                }
            }
            Blocks::Prefix(blocks) => {
                let mask = prefix_mask(n, m + 1, dtype)?;
                let mut y = Tensor::cat(&[&memory, &x], 1)?;
                for block in blocks {
                    y = block.forward(&y, Some(&mask), ctx)?;
                }
                x = y.narrow(1, n, m + 1)?;
            }
        }
        self.head.forward(&self.final_norm.forward(&x)?)
    }

    /// Teacher-forced logits `(B, L, |V|)` for full target sequences `(B, L)`.
    pub fn decode_logits(&self, slots: &Tensor, targets: &[Vec<u32>], ctx: &mut ForwardCtx) -> Result<Tensor> {
        if targets.iter().any(|t| t.len() != self.seq_len) {
            return Err(Error::shape(format!("targets must have length {}", self.seq_len)));
        }
        self.check_tokens(targets)?;
        let inputs: Vec<Vec<u32>> = targets.iter().map(|t| t[..self.seq_len - 1].to_vec()).collect();
        self.forward_prefix(slots, &inputs, ctx)
    }

    /// Greedy autoregressive decoding of `L` tokens per batch element.
    pub fn generate(&self, slots: &Tensor) -> Result<Vec<Vec<u32>>> {
        let b = slots.dim(0)?;
        let mut seqs: Vec<Vec<u32>> = vec![Vec::with_capacity(self.seq_len); b];
        let mut ctx = ForwardCtx::eval();
        for l in 0..self.seq_len {
            let logits = self.forward_prefix(slots, &seqs, &mut ctx)?;
            let last = logits.narrow(1, l, 1)?.squeeze(1)?;
            let next = last.argmax(D::Minus1)?.to_vec1::<u32>()?;
            for (s, t) in seqs.iter_mut().zip(next) {
                s.push(t);
            }
        }
        Ok(seqs)
    }
}

/// Attention mask for `[slots; tokens]`: slots see every slot, tokens see
/// every slot and the causal token prefix.
fn prefix_mask(n: usize, l: usize, dtype: DType) -> Result<Tensor> {
    let total = n + l;
    let mut m = vec![0.0f64; total * total];
    for i in 0..total {
        for j in 0..total {
            let blocked = if i < n { j >= n } else { j >= n && (j - n) > (i - n) };
            if blocked {
                m[i * total + j] = -1e9;
            }
        }
    }
    ops::from_f64(m, &[total, total], dtype)
}

/// `Σ_{frames} Σ_l CE(z_l, o_l) / batch`, logits `(F, L, |V|)`, targets `F × L`.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[Vec<u32>], batch: usize) -> Result<Tensor> {
    let (f, l, v) = logits.dims3()?;
    if targets.len() != f || targets.iter().any(|t| t.len() != l) {
        return Err(Error::shape(format!(
            "logits {:?} vs {} target sequences",
            logits.dims(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().flatten().find(|&&t| t as usize >= v) {
        return Err(Error::Domain(format!("target {bad} outside vocabulary {v}")));
    }
    let ids: Vec<u32> = targets.iter().flatten().copied().collect();
    let ids = Tensor::from_vec(ids, (f, l, 1), logits.device())?;
    let logp = ops::log_softmax_last(logits)?;
    let picked = logp.contiguous()?.gather(&ids, 2)?;
    Ok((picked.sum_all()?.neg()? / batch as f64)?)
}

/// Host cross-entropy of raw logit rows against targets (summed).
pub fn cross_entropy(rows: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if rows.len() != targets.len() {
        return Err(Error::shape("row/target count mismatch"));
    }
    let mut total = 0.0;
    for (row, &t) in rows.iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::Domain(format!("target {t} outside vocabulary {}", row.len())));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t];
    }
    Ok(total)
}
