//! Building blocks shared by the text encoders, the mapper and the denoiser.

use candle_core::{D, Tensor};
use candle_nn::{Linear, Module};

use crate::error::{Error, Result};
use crate::params::{DTYPE, ParamBuilder};

/// Added to masked attention logits; `exp` of it underflows to exactly zero.
const MASKED_LOGIT: f64 = -1e9;

/// Layer normalisation over the last dimension, written out so that it
/// works in f64.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(weight: Tensor, bias: Tensor, eps: f64) -> Self {
        Self { weight, bias, eps }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Multi-head scaled dot-product attention over `(batch, tokens, channels)`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        context_channels: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid_config(format!(
                "{channels} channels cannot be split over {heads} heads"
            )));
        }
        let mut b = b.sub(name);
        Ok(Self {
            q: b.linear("q", channels, channels)?,
            k: b.linear("k", context_channels, channels)?,
            v: b.linear("v", context_channels, channels)?,
            out: b.linear("out", channels, channels)?,
            heads,
            head_dim: channels / heads,
        })
    }

    /// `key_mask` is `(batch, context_tokens)` with 1 for real tokens and 0
    /// for padding.
    pub fn forward(&self, x: &Tensor, context: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
        let (batch, nq, channels) = x.dims3()?;
        let nk = context.dim(1)?;
        let split = |t: Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((batch, n, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(x)?, nq)?;
        let k = split(self.k.forward(context)?, nk)?;
        let v = split(self.v.forward(context)?, nk)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?)? * scale)?;
        if let Some(mask) = key_mask {
            let penalty = ((1.0 - mask)? * MASKED_LOGIT)?
                .reshape((batch, 1, 1, nk))?
                .to_dtype(DTYPE)?;
            logits = logits.broadcast_add(&penalty)?;
        }
        let weights = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let mixed = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((batch, nq, channels))?;
        Ok(self.out.forward(&mixed)?)
    }
}

/// Position-wise two-layer GELU network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            up: b.linear("up", channels, hidden)?,
            down: b.linear("down", hidden, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.down.forward(&self.up.forward(x)?.gelu()?)?)
    }
}

/// Sinusoidal embedding of integer timesteps, `(batch, dim)`.
pub fn timestep_embedding(steps: &[usize], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            out.push(if i < half { arg.sin() } else { arg.cos() });
        }
    }
    Ok(Tensor::from_vec(out, (steps.len(), dim), &crate::params::device())?)
}

/// Frobenius norm of `a - b` per leading-axis item, `(batch,)`.
pub fn batched_l2(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let diff = (a - b)?;
    let batch = diff.dim(0)?;
    Ok(diff.reshape((batch, ()))?.sqr()?.sum(1)?.sqrt()?)
}

pub fn to_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DTYPE)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn masked_keys_get_no_weight() {
        let mut store = ParamStore::new(0, true);
        let attn = MultiHeadAttention::new(&mut store.root(), "a", 8, 8, 2).unwrap();
        let dev = crate::params::device();
        let x = Tensor::randn(0f64, 1.0, (1, 3, 8), &dev).unwrap();
        let mut alt = x.to_vec3::<f64>().unwrap();
        alt[0][2] = vec![42.0; 8];
        let alt = Tensor::new(alt, &dev).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &dev).unwrap();
        let a = attn.forward(&x, &x, Some(&mask)).unwrap().narrow(1, 0, 2).unwrap();
        let b = attn.forward(&x.narrow(1, 0, 2).unwrap(), &alt, Some(&mask)).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new(0, true);
        assert!(MultiHeadAttention::new(&mut store.root(), "a", 10, 10, 4).is_err());
    }

    #[test]
    fn timestep_embedding_shape() {
        let e = timestep_embedding(&[0, 5, 49], 16).unwrap();
        assert_eq!(e.dims(), &[3, 16]);
        let v = e.to_vec2::<f64>().unwrap();
        assert_eq!(v[0][0], 0.0);
        assert_eq!(v[0][8], 1.0);
    }
}
