//! The emotional spectrum: text is encoded into emotional requests whose
//! distances, divided by the distance between the images' emotion
//! distributions, are shaped by a batch-hard triplet loss over Mikel's-wheel
//! relations.

mod classifier;
mod training;

use candle_core::Tensor;
use image::RgbImage;

pub use classifier::{
    ColorFeatureClassifier, EmotionClassifier, FixedLogits, NUM_COLOR_FEATURES, color_features,
};
pub use training::{
    SpectrumLogEntry, SpectrumSource, SpectrumTrainConfig, encode_sources, train_spectrum,
    triplet_accuracy,
};

use crate::emotion::{EmotionDistribution, PairRelation, WheelGeometry, pair_relation};
use crate::error::{Error, Result};
use crate::nn::batched_l2;
use crate::params::device;
use crate::text::TextEncoder;

/// Triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Floor on the distribution distance in the ratio distance.
pub const DISTANCE_EPS: f64 = 1e-6;

/// Encoder output for one text, stored token-major as `(tokens, channels)`.
#[derive(Clone, Debug)]
pub struct EmotionalRequest {
    embedding: Tensor,
}

impl EmotionalRequest {
    pub fn new(embedding: Tensor, tokens: usize, channels: usize) -> Result<Self> {
        if embedding.dims() != [tokens, channels] {
            return Err(Error::Configuration(format!(
                "emotional request has shape {:?}, expected [{tokens}, {channels}]",
                embedding.dims()
            )));
        }
        let values = embedding.flatten_all()?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("emotional request has non-finite entries"));
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

    pub fn values(&self) -> Result<Vec<f64>> {
        Ok(self.embedding.flatten_all()?.to_vec1::<f64>()?)
    }
}

#[derive(Clone, Debug)]
pub struct SpectrumSample {
    pub id: String,
    pub request: EmotionalRequest,
    pub distribution: EmotionDistribution,
}

pub fn encode_request(text: &str, encoder: &TextEncoder) -> Result<EmotionalRequest> {
    let out = encoder.encode_texts(&[text])?.squeeze(0)?;
    let cfg = encoder.config();
    EmotionalRequest::new(out, cfg.tokenizer.max_tokens, cfg.channels)
}

pub fn estimate_distribution(
    image: &RgbImage,
    classifier: &dyn EmotionClassifier,
) -> Result<EmotionDistribution> {
    EmotionDistribution::from_logits(&classifier.logits(image)?)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid_input(format!("distance eps must be positive, got {eps}")))
    }
}

/// Frobenius distance between requests over the (floored) L2 distance
/// between distributions.
pub fn sentiment_distance(a: &SpectrumSample, b: &SpectrumSample, eps: f64) -> Result<f64> {
    ratio_distance(
        &a.request.values()?,
        &b.request.values()?,
        a.distribution.probs(),
        b.distribution.probs(),
        eps,
    )
}

/// `|r_a - r_b| / max(|d_a - d_b|, eps)` on raw flattened vectors.
pub fn ratio_distance(r_a: &[f64], r_b: &[f64], d_a: &[f64], d_b: &[f64], eps: f64) -> Result<f64> {
    check_eps(eps)?;
    if r_a.len() != r_b.len() || d_a.len() != d_b.len() {
        return Err(Error::invalid_input("distance operands have different shapes"));
    }
    let l2 = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    Ok(l2(r_a, r_b) / l2(d_a, d_b).max(eps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Non-empty list of triplets, as indices into the mined batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    triplets: Vec<Triplet>,
}

impl TripletBatch {
    pub fn new(triplets: Vec<Triplet>) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::EmptyBatch("no triplets".into()));
        }
        Ok(Self { triplets })
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Batch-hard mining: every anchor takes its farthest positive and nearest
/// negative. Anchors missing either are skipped; ties go to the lower index.
pub fn mine_triplets(batch: &[SpectrumSample], wheel: &WheelGeometry) -> Result<TripletBatch> {
    let n = batch.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sentiment_distance(&batch[i], &batch[j], DISTANCE_EPS)?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let dists: Vec<EmotionDistribution> = batch.iter().map(|s| s.distribution).collect();
    mine_with_distances(&dists, &dist, wheel)
}

pub(crate) fn mine_with_distances(
    dists: &[EmotionDistribution],
    dist: &[Vec<f64>],
    wheel: &WheelGeometry,
) -> Result<TripletBatch> {
    let n = dists.len();
    let mut triplets = Vec::new();
    for a in 0..n {
        let mut hardest_pos: Option<usize> = None;
        let mut hardest_neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            match pair_relation(&dists[a], &dists[j], wheel) {
                PairRelation::Positive => {
                    if hardest_pos.is_none_or(|p| dist[a][j] > dist[a][p]) {
                        hardest_pos = Some(j);
                    }
                }
                PairRelation::Negative => {
                    if hardest_neg.is_none_or(|q| dist[a][j] < dist[a][q]) {
                        hardest_neg = Some(j);
                    }
                }
                PairRelation::Neutral => {}
            }
        }
        if let (Some(positive), Some(negative)) = (hardest_pos, hardest_neg) {
            triplets.push(Triplet {
                anchor: a,
                positive,
                negative,
            });
        }
    }
    if triplets.is_empty() {
        return Err(Error::EmptyBatch(
            "no anchor has both a positive and a negative partner".into(),
        ));
    }
    TripletBatch::new(triplets)
}

/// Sum of hinged margins over the triplets.
pub fn contrastive_loss(batch: &[SpectrumSample], triplets: &TripletBatch, alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for t in triplets.triplets() {
        let get = |i: usize| {
            batch
                .get(i)
                .ok_or_else(|| Error::invalid_input(format!("triplet index {i} out of range")))
        };
        let pos = sentiment_distance(get(t.anchor)?, get(t.positive)?, DISTANCE_EPS)?;
        let neg = sentiment_distance(get(t.anchor)?, get(t.negative)?, DISTANCE_EPS)?;
        total += (pos - neg + alpha).max(0.0);
    }
    Ok(total)
}

/// Differentiable form of [`contrastive_loss`] over a `(batch, tokens,
/// channels)` tensor of requests.
pub fn contrastive_loss_tensor(
    requests: &Tensor,
    dists: &[EmotionDistribution],
    triplets: &TripletBatch,
    alpha: f64,
    eps: f64,
) -> Result<Tensor> {
    check_eps(eps)?;
    if requests.dim(0)? != dists.len() {
        return Err(Error::invalid_input("one distribution per request is required"));
    }
    let dev = device();
    let idx = |f: fn(&Triplet) -> usize| -> Result<Tensor> {
        let v: Vec<u32> = triplets.triplets().iter().map(|t| f(t) as u32).collect();
        Ok(Tensor::new(v, &dev)?)
    };
    let anchors = requests.index_select(&idx(|t| t.anchor)?, 0)?;
    let positives = requests.index_select(&idx(|t| t.positive)?, 0)?;
    let negatives = requests.index_select(&idx(|t| t.negative)?, 0)?;
    let den = |f: fn(&Triplet) -> usize| -> Result<Tensor> {
        let v: Vec<f64> = triplets
            .triplets()
            .iter()
            .map(|t| dists[t.anchor].l2_distance(&dists[f(t)]).max(eps))
            .collect();
        Ok(Tensor::new(v, &dev)?)
    };
    let d_pos = (batched_l2(&anchors, &positives)? / den(|t| t.positive)?)?;
    let d_neg = (batched_l2(&anchors, &negatives)? / den(|t| t.negative)?)?;
    Ok(((d_pos - d_neg)? + alpha)?.relu()?.sum_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emotion::Emotion;
    use crate::params::DTYPE;

    fn sample(id: usize, values: Vec<f64>, dist: EmotionDistribution) -> SpectrumSample {
        let n = values.len();
        let t = Tensor::from_vec(values, (1, n), &device()).unwrap();
        SpectrumSample {
            id: id.to_string(),
            request: EmotionalRequest::new(t, 1, n).unwrap(),
            distribution: dist,
        }
    }

    #[test]
    fn distance_examples() {
        let a = sample(0, vec![1.0, 2.0, 3.0], EmotionDistribution::peaked(Emotion::Awe, 0.9));
        assert_eq!(sentiment_distance(&a, &a, DISTANCE_EPS).unwrap(), 0.0);

        let ra = [0.0, 0.0, 0.0, 0.0];
        let rb = [0.0, 0.0, 3.0, 0.0];
        let da = [1.5, 0.0];
        let db = [0.0, 0.0];
        assert_eq!(ratio_distance(&ra, &rb, &da, &db, DISTANCE_EPS).unwrap(), 2.0);
        assert!(ratio_distance(&ra, &rb, &da, &db, 0.0).is_err());
        assert!(ratio_distance(&ra, &rb[..3], &da, &db, 1e-6).is_err());
    }

    #[test]
    fn identical_distributions_hit_the_floor() {
        let d = EmotionDistribution::uniform();
        let a = sample(0, vec![0.0], d);
        let b = sample(1, vec![1e-6], d);
        assert!((sentiment_distance(&a, &b, 1e-6).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forced_selection() {
        let wheel = WheelGeometry::default();
        let batch = vec![
            sample(0, vec![0.0, 0.0], EmotionDistribution::peaked(Emotion::Awe, 0.9)),
            sample(1, vec![1.0, 0.0], EmotionDistribution::peaked(Emotion::Awe, 0.8)),
            sample(2, vec![0.0, 5.0], EmotionDistribution::peaked(Emotion::Disgust, 0.9)),
        ];
        let mined = mine_triplets(&batch, &wheel).unwrap();
        assert_eq!(
            mined.triplets(),
            &[
                Triplet { anchor: 0, positive: 1, negative: 2 },
                Triplet { anchor: 1, positive: 0, negative: 2 },
            ]
        );
    }

    #[test]
    fn all_same_category_has_no_triplets() {
        let wheel = WheelGeometry::default();
        let batch: Vec<_> = (0..4)
            .map(|i| sample(i, vec![i as f64], EmotionDistribution::peaked(Emotion::Awe, 0.5 + 0.1 * i as f64)))
            .collect();
        assert!(matches!(mine_triplets(&batch, &wheel), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn loss_examples() {
        // dis values are constructed directly through unit distribution gaps
        let base = EmotionDistribution::one_hot(Emotion::Awe);
        let mut far = [0.0; 8];
        far[Emotion::Awe.index()] = 1.0 - 1.0 / 2f64.sqrt();
        far[Emotion::Disgust.index()] = 1.0 / 2f64.sqrt();
        let far = EmotionDistribution::new(&far).unwrap();
        assert!((base.l2_distance(&far) - 1.0).abs() < 1e-12);
        let batch = vec![
            sample(0, vec![0.0], base),
            sample(1, vec![0.5], far),
            sample(2, vec![1.0], far),
        ];
        let t = TripletBatch::new(vec![Triplet { anchor: 0, positive: 1, negative: 2 }]).unwrap();
        assert!(contrastive_loss(&batch, &t, 0.2).unwrap().abs() < 1e-12);
        let t = TripletBatch::new(vec![Triplet { anchor: 0, positive: 2, negative: 1 }]).unwrap();
        assert!((contrastive_loss(&batch, &t, 0.2).unwrap() - 0.7).abs() < 1e-12);

        let requests = Tensor::new(&[[[0.0f64]], [[0.5]], [[1.0]]], &device()).unwrap();
        let dists: Vec<_> = batch.iter().map(|s| s.distribution).collect();
        let lt = contrastive_loss_tensor(&requests, &dists, &t, 0.2, DISTANCE_EPS).unwrap();
        assert!((lt.to_dtype(DTYPE).unwrap().to_scalar::<f64>().unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn request_shape_is_checked() {
        let t = Tensor::zeros((2, 3), DTYPE, &device()).unwrap();
        assert!(EmotionalRequest::new(t.clone(), 2, 3).is_ok());
        assert!(matches!(EmotionalRequest::new(t, 3, 2), Err(Error::Configuration(_))));
    }
}
