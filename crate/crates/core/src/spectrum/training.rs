use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    DEFAULT_MARGIN, DISTANCE_EPS, EmotionalRequest, contrastive_loss_tensor, mine_with_distances,
    ratio_distance,
};
use crate::emotion::{EmotionDistribution, PairRelation, WheelGeometry, pair_relation};
use crate::error::{Error, Result};
use crate::nn::to_scalar;
use crate::params::ParamStore;
use crate::text::TextEncoder;

/// One training text with the emotion distribution of its image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSource {
    pub id: String,
    pub text: String,
    pub distribution: EmotionDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decay the learning rate linearly to zero over `steps`.
    pub linear_decay: bool,
    pub margin: f64,
    pub seed: u64,
}

impl Default for SpectrumTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            learning_rate: 5e-5,
            linear_decay: false,
            margin: DEFAULT_MARGIN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumLogEntry {
    pub step: usize,
    pub loss: f64,
    pub triplets: usize,
}

/// Fits the request encoder with batch-hard triplet mining on uniformly
/// drawn batches. `store` must be the trainable store the encoder was built
/// from. Steps whose batch has no eligible anchor are logged with zero
/// triplets and skipped.
pub fn train_spectrum(
    sources: &[SpectrumSource],
    encoder: &TextEncoder,
    store: &ParamStore,
    wheel: &WheelGeometry,
    config: &SpectrumTrainConfig,
) -> Result<Vec<SpectrumLogEntry>> {
    if !store.is_trainable() {
        return Err(Error::invalid_config("spectrum training needs a trainable parameter store"));
    }
    if config.batch_size < 3 {
        return Err(Error::invalid_config("spectrum batch size must be at least 3"));
    }
    let dists: Vec<EmotionDistribution> = sources.iter().map(|s| s.distribution).collect();
    let zero = vec![vec![0.0; dists.len()]; dists.len()];
    // the whole corpus has to offer at least one usable triplet
    mine_with_distances(&dists, &zero, wheel)?;
    let tokenizer = encoder.tokenizer();
    let seqs = sources
        .iter()
        .map(|s| tokenizer.encode(&s.text))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = ParamsAdamW {
        lr: config.learning_rate,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(store.vars(), params)?;
    let batch_size = config.batch_size.min(sources.len());
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if config.linear_decay {
            opt.set_learning_rate(config.learning_rate * (1.0 - step as f64 / config.steps as f64));
        }
        let picked = sample(&mut rng, sources.len(), batch_size).into_vec();
        let batch_seqs: Vec<_> = picked.iter().map(|&i| seqs[i].clone()).collect();
        let batch_dists: Vec<_> = picked.iter().map(|&i| dists[i]).collect();
        let (ids, mask) = tokenizer.batch(&batch_seqs)?;
        let requests = encoder.forward(&ids, &mask)?;
        let matrix = distance_matrix(&requests.detach(), &batch_dists)?;
        let triplets = match mine_with_distances(&batch_dists, &matrix, wheel) {
            Ok(t) => t,
            Err(Error::EmptyBatch(_)) => {
                log.push(SpectrumLogEntry { step, loss: 0.0, triplets: 0 });
                continue;
            }
            Err(e) => return Err(e),
        };
        let loss = contrastive_loss_tensor(&requests, &batch_dists, &triplets, config.margin, DISTANCE_EPS)?;
        let value = to_scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("contrastive loss is {value}"),
            });
        }
        opt.backward_step(&loss)?;
        log.push(SpectrumLogEntry {
            step,
            loss: value,
            triplets: triplets.len(),
        });
    }
    Ok(log)
}

fn distance_matrix(requests: &Tensor, dists: &[EmotionDistribution]) -> Result<Vec<Vec<f64>>> {
    let n = dists.len();
    let flat = requests.reshape((n, ()))?.to_vec2::<f64>()?;
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = ratio_distance(&flat[i], &flat[j], dists[i].probs(), dists[j].probs(), DISTANCE_EPS)?;
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

/// Encodes texts in chunks into per-text requests.
pub fn encode_sources<S: AsRef<str>>(encoder: &TextEncoder, texts: &[S]) -> Result<Vec<EmotionalRequest>> {
    let cfg = encoder.config();
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(64) {
        let enc = encoder.encode_texts(chunk)?.detach();
        for i in 0..chunk.len() {
            out.push(EmotionalRequest::new(enc.get(i)?, cfg.tokenizer.max_tokens, cfg.channels)?);
        }
    }
    Ok(out)
}

/// Fraction of all wheel-valid `(anchor, positive, negative)` triplets whose
/// positive is strictly closer than the negative.
pub fn triplet_accuracy(
    requests: &[EmotionalRequest],
    dists: &[EmotionDistribution],
    wheel: &WheelGeometry,
) -> Result<f64> {
    let n = requests.len();
    if dists.len() != n {
        return Err(Error::invalid_input("one distribution per request is required"));
    }
    let values = requests.iter().map(|r| r.values()).collect::<Result<Vec<_>>>()?;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = ratio_distance(&values[i], &values[j], dists[i].probs(), dists[j].probs(), DISTANCE_EPS)?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let (mut good, mut total) = (0usize, 0usize);
    for a in 0..n {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..n {
            if j == a {
                continue;
            }
            match pair_relation(&dists[a], &dists[j], wheel) {
                PairRelation::Positive => pos.push(dist[a][j]),
                PairRelation::Negative => neg.push(dist[a][j]),
                PairRelation::Neutral => {}
            }
        }
        for p in &pos {
            for q in &neg {
                total += 1;
                if p < q {
                    good += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyBatch("no valid triplets to score".into()));
    }
    Ok(good as f64 / total as f64)
}
