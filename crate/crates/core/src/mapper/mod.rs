//! The emotional mapper: a multi-modal transformer that lifts an emotional
//! request into the semantic channel space and refines it with self
//! attention, cross attention to the text semantics, and a feed-forward
//! network. After each sub-module the request stream is re-normalised and
//! modulated by the key semantic feature.

use candle_core::{D, Tensor};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, MultiHeadAttention};
use crate::params::ParamBuilder;
use crate::spectrum::EmotionalRequest;
use crate::text::TextEncoder;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperConfig {
    pub depth: usize,
    pub heads: usize,
    pub semantic_channels: usize,
    pub request_channels: usize,
    pub tokens: usize,
    pub eps_norm: f64,
    pub ffn_mult: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 4,
            semantic_channels: 64,
            request_channels: 32,
            tokens: 16,
            eps_norm: 1e-5,
            ffn_mult: 4,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid_config("mapper depth must be at least 1"));
        }
        if self.heads == 0 || self.semantic_channels % self.heads != 0 {
            return Err(Error::invalid_config(format!(
                "semantic channels ({}) must be divisible by heads ({})",
                self.semantic_channels, self.heads
            )));
        }
        if self.tokens == 0 || self.request_channels == 0 || !(self.eps_norm > 0.0) {
            return Err(Error::invalid_config("mapper dims and eps_norm must be positive"));
        }
        Ok(())
    }
}

/// Semantic-encoder output for one text, token-major `(tokens, channels)`.
#[derive(Clone, Debug)]
pub struct TextSemantics {
    embedding: Tensor,
}

/// Mapper output, token-major `(tokens, channels)`.
#[derive(Clone, Debug)]
pub struct SemanticRepresentation {
    embedding: Tensor,
}

macro_rules! token_matrix {
    ($ty:ident) => {
        impl $ty {
            pub fn new(embedding: Tensor, tokens: usize, channels: usize) -> Result<Self> {
                if embedding.dims() != [tokens, channels] {
                    return Err(Error::Configuration(format!(
                        "{} has shape {:?}, expected [{tokens}, {channels}]",
                        stringify!($ty),
                        embedding.dims()
                    )));
                }
                let values = embedding.flatten_all()?.to_vec1::<f64>()?;
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid_input(concat!(stringify!($ty), " has non-finite entries")));
                }
                Ok(Self { embedding })
            }

            pub fn embedding(&self) -> &Tensor {
                &self.embedding
            }

            /// The `(channels, tokens)` view.
            pub fn channels_by_tokens(&self) -> Result<Tensor> {
                Ok(self.embedding.t()?.contiguous()?)
            }
        }
    };
}

token_matrix!(TextSemantics);
token_matrix!(SemanticRepresentation);

#[derive(Clone, Debug)]
pub struct KeySemanticFeature {
    vector: Tensor,
}

impl KeySemanticFeature {
    pub fn vector(&self) -> &Tensor {
        &self.vector
    }
}

pub fn encode_semantics(text: &str, encoder: &TextEncoder) -> Result<TextSemantics> {
    let out = encoder.encode_texts(&[text])?.squeeze(0)?;
    let cfg = encoder.config();
    TextSemantics::new(out, cfg.tokenizer.max_tokens, cfg.channels)
}

/// Mean over tokens followed by the learned projection, batched:
/// `(batch, tokens, C)` to `(batch, C)`.
pub fn key_semantics_batch(semantics: &Tensor, projection: &Linear) -> Result<Tensor> {
    Ok(projection.forward(&semantics.mean(1)?)?)
}

pub fn extract_key_semantics(sem: &TextSemantics, projection: &Linear) -> Result<KeySemanticFeature> {
    let v = key_semantics_batch(&sem.embedding.unsqueeze(0)?, projection)?.squeeze(0)?;
    Ok(KeySemanticFeature { vector: v })
}

/// `(1 + W1 f_k) * (f_r - mu) / sigma + W2 f_k` with `mu` and `sigma` taken
/// per channel over the token axis and `sigma` floored at `eps_norm`.
/// `f_r` is `(batch, tokens, C)` and `f_k` is `(batch, C_k)`.
pub fn modulate(f_r: &Tensor, f_k: &Tensor, w1: &Linear, w2: &Linear, eps_norm: f64) -> Result<Tensor> {
    let mu = f_r.mean_keepdim(1)?;
    let centered = f_r.broadcast_sub(&mu)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let sigma = var.maximum(eps_norm * eps_norm)?.sqrt()?;
    let normalized = centered.broadcast_div(&sigma)?;
    let scale = (w1.forward(f_k)? + 1.0)?.unsqueeze(1)?;
    let shift = w2.forward(f_k)?.unsqueeze(1)?;
    Ok(normalized.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

#[derive(Clone, Debug)]
pub struct Modulation {
    pub w1: Linear,
    pub w2: Linear,
}

impl Modulation {
    fn new(b: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            w1: b.linear("w1", channels, channels)?,
            w2: b.linear("w2", channels, channels)?,
        })
    }
}

struct MapperBlock {
    msa: MultiHeadAttention,
    msa_mod: Modulation,
    mca: MultiHeadAttention,
    mca_mod: Modulation,
    ffn: FeedForward,
    ffn_mod: Modulation,
}

pub struct EmotionalMapper {
    config: MapperConfig,
    lift: Linear,
    key: Linear,
    blocks: Vec<MapperBlock>,
}

impl EmotionalMapper {
    pub fn new(b: &mut ParamBuilder<'_>, config: MapperConfig) -> Result<Self> {
        config.validate()?;
        let cs = config.semantic_channels;
        let lift = b.linear("lift", config.request_channels, cs)?;
        let key = b.linear("key", cs, cs)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let mut bb = b.sub(&format!("blocks.{i}"));
            blocks.push(MapperBlock {
                msa: MultiHeadAttention::new(&mut bb, "msa", cs, cs, config.heads)?,
                msa_mod: Modulation::new(&mut bb, "msa_mod", cs)?,
                mca: MultiHeadAttention::new(&mut bb, "mca", cs, cs, config.heads)?,
                mca_mod: Modulation::new(&mut bb, "mca_mod", cs)?,
                ffn: FeedForward::new(&mut bb, "ffn", cs, cs * config.ffn_mult)?,
                ffn_mod: Modulation::new(&mut bb, "ffn_mod", cs)?,
            });
        }
        Ok(Self {
            config,
            lift,
            key,
            blocks,
        })
    }

    pub fn config(&self) -> MapperConfig {
        self.config
    }

    pub fn key_projection(&self) -> &Linear {
        &self.key
    }

    /// `(batch, tokens, C_t)` requests and `(batch, tokens, C_s)` semantics
    /// to `(batch, tokens, C_s)`.
    pub fn forward_batch(&self, requests: &Tensor, semantics: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (b, n, ct) = requests.dims3()?;
        let (bs, ns, cs) = semantics.dims3()?;
        if ct != c.request_channels || cs != c.semantic_channels || n != c.tokens || ns != c.tokens || b != bs {
            return Err(Error::Configuration(format!(
                "mapper expects requests [B, {}, {}] and semantics [B, {}, {}], got {:?} and {:?}",
                c.tokens,
                c.request_channels,
                c.tokens,
                c.semantic_channels,
                requests.dims(),
                semantics.dims()
            )));
        }
        let f_k = key_semantics_batch(semantics, &self.key)?;
        let eps = c.eps_norm;
        let mut h = self.lift.forward(requests)?;
        for blk in &self.blocks {
            let x = (&h + blk.msa.forward(&h, &h, None)?)?;
            h = modulate(&x, &f_k, &blk.msa_mod.w1, &blk.msa_mod.w2, eps)?;
            let x = (&h + blk.mca.forward(&h, semantics, None)?)?;
            h = modulate(&x, &f_k, &blk.mca_mod.w1, &blk.mca_mod.w2, eps)?;
            let x = (&h + blk.ffn.forward(&h)?)?;
            h = modulate(&x, &f_k, &blk.ffn_mod.w1, &blk.ffn_mod.w2, eps)?;
        }
        Ok(h)
    }

    pub fn forward(&self, request: &EmotionalRequest, semantics: &TextSemantics) -> Result<SemanticRepresentation> {
        let out = self.forward_batch(&request.embedding().unsqueeze(0)?, &semantics.embedding.unsqueeze(0)?)?;
        SemanticRepresentation::new(out.squeeze(0)?, self.config.tokens, self.config.semantic_channels)
    }

    /// Modulation layers in application order, for inspection.
    pub fn modulations(&self) -> Vec<&Modulation> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.msa_mod, &b.mca_mod, &b.ffn_mod])
            .collect()
    }

    pub fn lift(&self) -> &Linear {
        &self.lift
    }
}

pub fn mapper_forward(
    request: &EmotionalRequest,
    semantics: &TextSemantics,
    mapper: &EmotionalMapper,
) -> Result<SemanticRepresentation> {
    mapper.forward(request, semantics)
}

/// Per-channel statistics along the last axis, exposed for tests of
/// `modulate`'s degenerate cases.
pub fn channel_std(f: &Tensor) -> Result<Tensor> {
    let mu = f.mean_keepdim(1)?;
    Ok(f.broadcast_sub(&mu)?.sqr()?.mean_keepdim(1)?.sqrt()?.squeeze(D::Minus2)?)
}
