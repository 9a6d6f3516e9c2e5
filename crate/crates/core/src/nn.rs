//! Layers shared by the encoder, decoders and dVAE.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops;
use crate::params::{Init, ParamStore};

/// Per-call forward state: whether dropout is active and where its masks come from.
pub struct ForwardCtx {
    pub dropout: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    /// Inference: dropout disabled.
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
        }
    }

    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x.clone());
        };
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = ops::from_f64(mask, x.dims(), x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Affine map; the weight is stored `(in, out)` so the forward pass needs no transpose.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = ps.param(&format!("{name}.weight"), &[input, output], Init::Uniform(bound))?;
        let bias = if bias {
            Some(ps.param(&format!("{name}.bias"), &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = ops::matmul(&x.reshape((rows, input))?, &self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (input * kernel * kernel) as f64;
        // He-uniform, suited to the ReLU stacks used throughout.
        let bound = (6.0 / fan_in).sqrt();
        let weight = ps.param(
            &format!("{name}.weight"),
            &[output, input, kernel, kernel],
            Init::Uniform(bound),
        )?;
        let bias = ps.param(&format!("{name}.bias"), &[output], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[dim], Init::Const(1.0))?,
            beta: ps.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gamma, &self.beta, 1e-5)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), input, hidden, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, output, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// GRU cell with the PyTorch gate layout (reset, update, new).
#[derive(Debug, Clone)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    size: usize,
}

impl GruCell {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, size: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(ps, &format!("{name}.ih"), input, 3 * size, true)?,
            hidden: Linear::new(ps, &format!("{name}.hh"), size, 3 * size, true)?,
            size,
        })
    }

    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let gi = self.input.forward(x)?;
        let gh = self.hidden.forward(h)?;
        let n = self.size;
        let r = ops::sigmoid(&(gi.narrow(last, 0, n)? + gh.narrow(last, 0, n)?)?)?;
        let z = ops::sigmoid(&(gi.narrow(last, n, n)? + gh.narrow(last, n, n)?)?)?;
        let cand = (gi.narrow(last, 2 * n, n)? + (r * gh.narrow(last, 2 * n, n)?)?)?.tanh()?;
        // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
        Ok((&cand + (z * (h - &cand)?)?)?)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, false)?,
            k: Linear::new(ps, &format!("{name}.k"), kv_dim, dim, false)?,
            v: Linear::new(ps, &format!("{name}.v"), kv_dim, dim, false)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// `query: (B, Lq, dim)`, `memory: (B, Lk, kv_dim)`, `mask`: additive `(Lq, Lk)`.
    pub fn forward(
        &self,
        query: &Tensor,
        memory: &Tensor,
        mask: Option<&Tensor>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let (b, lq, _) = query.dims3()?;
        let lk = memory.dim(1)?;
        let hd = self.dim / self.heads;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b * self.heads, l, hd))?)
        };
        let q = split(self.q.forward(query)?, lq)?;
        let k = split(self.k.forward(memory)?, lk)?;
        let v = split(self.v.forward(memory)?, lk)?;
        let mut scores = (ops::matmul(&q, &k.t()?)? / (hd as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = ctx.dropout(&ops::softmax_last(&scores)?)?;
        let o = ops::matmul(&attn, &v)?
            .reshape((b, self.heads, lq, hd))?
            .transpose(1, 2)?
            .reshape((b, lq, self.dim))?;
        self.out.forward(&o)
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative value above.
pub fn causal_mask(len: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0.0f64; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            m[i * len + j] = -1e9;
        }
    }
    ops::from_f64(m, &[len, len], dtype)
}

/// Pre-LayerNorm transformer encoder block (self-attention + MLP).
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let a = self.attn.forward(&h, &h, mask, ctx)?;
        let x = (x + ctx.dropout(&a)?)?;
        let m = self.mlp.forward(&self.ln2.forward(&x)?)?;
        Ok((&x + ctx.dropout(&m)?)?)
    }
}

/// Pre-LayerNorm decoder block: causal self-attention, cross-attention, MLP.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    mlp: Mlp,
}

impl DecoderBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), dim, dim, heads)?,
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, hidden, dim)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        mask: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let a = self.self_attn.forward(&h, &h, Some(mask), ctx)?;
        let x = (x + ctx.dropout(&a)?)?;
        let h = self.ln2.forward(&x)?;
        let c = self.cross_attn.forward(&h, memory, None, ctx)?;
        let x = (&x + ctx.dropout(&c)?)?;
        let m = self.mlp.forward(&self.ln3.forward(&x)?)?;
        Ok((&x + ctx.dropout(&m)?)?)
    }
}
