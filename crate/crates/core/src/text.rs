//! Word-level hashing tokenizer and the small contextual text encoder used
//! both for emotional requests and for text semantics.

use candle_core::Tensor;

use crate::nn::LayerNorm;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, MultiHeadAttention};
use crate::params::{DTYPE, Init, ParamBuilder, device};

pub const PAD_ID: u32 = 0;

/// Splits on anything that is not alphanumeric or an apostrophe and
/// lowercases; apostrophes are then dropped.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.replace('\'', "").to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    /// Sequence length every text is padded or truncated to.
    pub max_tokens: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            max_tokens: 16,
        }
    }
}

/// Padded token ids plus a 0/1 mask of real positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    config: TokenizerConfig,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig) -> Result<Self> {
        if config.vocab_size < 2 || config.max_tokens == 0 {
            return Err(Error::invalid_config("tokenizer needs vocab_size >= 2 and max_tokens >= 1"));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> TokenizerConfig {
        self.config
    }

    /// Bucket id of a normalized word; never `PAD_ID`.
    pub fn word_id(&self, word: &str) -> u32 {
        let digest = Sha256::digest(word.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        1 + (u64::from_le_bytes(bytes) % (self.config.vocab_size as u64 - 1)) as u32
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let ws = words(text);
        if ws.is_empty() {
            return Err(Error::invalid_input("text is empty"));
        }
        let n = self.config.max_tokens;
        let mut ids = vec![PAD_ID; n];
        let mut mask = vec![false; n];
        for (i, w) in ws.iter().take(n).enumerate() {
            ids[i] = self.word_id(w);
            mask[i] = true;
        }
        Ok(TokenSequence { ids, mask })
    }

    /// Stacks sequences into `(batch, tokens)` id and mask tensors.
    pub fn batch(&self, seqs: &[TokenSequence]) -> Result<(Tensor, Tensor)> {
        let n = self.config.max_tokens;
        let ids: Vec<u32> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let mask: Vec<f64> = seqs
            .iter()
            .flat_map(|s| s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
            .collect();
        let dev = device();
        Ok((
            Tensor::from_vec(ids, (seqs.len(), n), &dev)?,
            Tensor::from_vec(mask, (seqs.len(), n), &dev)?,
        ))
    }

    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<(Tensor, Tensor)> {
        let seqs = texts
            .iter()
            .map(|t| self.encode(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        self.batch(&seqs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub tokenizer: TokenizerConfig,
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

impl TextEncoderConfig {
    pub fn with_channels(channels: usize) -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            channels,
            heads: 4,
            layers: 1,
            ffn_mult: 2,
        }
    }
}

struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

/// Token + position embeddings followed by masked pre-norm transformer
/// layers. Padding positions attend to nothing and are zeroed at the output,
/// so they never influence real positions.
pub struct TextEncoder {
    config: TextEncoderConfig,
    tokenizer: Tokenizer,
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<EncoderLayer>,
}

impl TextEncoder {
    pub fn new(b: &mut ParamBuilder<'_>, config: TextEncoderConfig) -> Result<Self> {
        let tokenizer = Tokenizer::new(config.tokenizer)?;
        let c = config.channels;
        let token_embedding =
            b.tensor("token_embedding", (config.tokenizer.vocab_size, c), Init::Normal(1.0))?;
        let position_embedding =
            b.tensor("position_embedding", (config.tokenizer.max_tokens, c), Init::Normal(0.1))?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut lb = b.sub(&format!("layers.{i}"));
            layers.push(EncoderLayer {
                norm1: lb.layer_norm("norm1", c)?,
                attn: MultiHeadAttention::new(&mut lb, "attn", c, c, config.heads)?,
                norm2: lb.layer_norm("norm2", c)?,
                ffn: FeedForward::new(&mut lb, "ffn", c, c * config.ffn_mult)?,
            });
        }
        Ok(Self {
            config,
            tokenizer,
            token_embedding,
            position_embedding,
            layers,
        })
    }

    pub fn config(&self) -> TextEncoderConfig {
        self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// `(batch, tokens)` ids and mask to `(batch, tokens, channels)`.
    pub fn forward(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (batch, n) = ids.dims2()?;
        let c = self.config.channels;
        let flat = ids.flatten_all()?;
        let mut h = self
            .token_embedding
            .index_select(&flat, 0)?
            .reshape((batch, n, c))?
            .broadcast_add(&self.position_embedding.narrow(0, 0, n)?.unsqueeze(0)?)?;
        let mask = mask.to_dtype(DTYPE)?;
        for layer in &self.layers {
            let x = layer.norm1.forward(&h)?;
            h = (&h + layer.attn.forward(&x, &x, Some(&mask))?)?;
            let x = layer.norm2.forward(&h)?;
            h = (&h + layer.ffn.forward(&x)?)?;
        }
        Ok(h.broadcast_mul(&mask.unsqueeze(2)?)?)
    }

    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor> {
        let (ids, mask) = self.tokenizer.encode_batch(texts)?;
        self.forward(&ids, &mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn words_normalize() {
        assert_eq!(words("Joyful, isn't it?  YES"), ["joyful", "isnt", "it", "yes"]);
        assert!(words("  ,;  ").is_empty());
    }

    #[test]
    fn tokenizer_pads_and_truncates() {
        let tok = Tokenizer::new(TokenizerConfig { vocab_size: 64, max_tokens: 4 }).unwrap();
        let s = tok.encode("a calm lake").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.ids[3], PAD_ID);
        assert!(s.ids[..3].iter().all(|&i| i != PAD_ID && i < 64));
        let long = tok.encode("one two three four five six").unwrap();
        assert_eq!(long.len(), 4);
        assert!(matches!(tok.encode(""), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn padding_content_never_leaks() {
        let mut store = ParamStore::new(5, false);
        let cfg = TextEncoderConfig::with_channels(8);
        let enc = TextEncoder::new(&mut store.root(), cfg).unwrap();
        let tok = enc.tokenizer();
        let base = tok.encode("quiet morning light").unwrap();
        let mut garbage = base.clone();
        for (id, m) in garbage.ids.iter_mut().zip(&garbage.mask) {
            if !m {
                *id = 17;
            }
        }
        let (i1, m1) = tok.batch(&[base]).unwrap();
        let (i2, m2) = tok.batch(&[garbage]).unwrap();
        let a = enc.forward(&i1, &m1).unwrap();
        let b = enc.forward(&i2, &m2).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }
}
