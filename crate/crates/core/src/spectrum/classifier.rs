use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::emotion::{EmotionDistribution, NUM_EMOTIONS};
use crate::error::{Error, Result};

/// Image emotion classifier producing one logit per category.
pub trait EmotionClassifier: Send + Sync {
    fn logits(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Returns the same logits for every image.
#[derive(Clone, Debug)]
pub struct FixedLogits(pub Vec<f64>);

impl EmotionClassifier for FixedLogits {
    fn logits(&self, _image: &RgbImage) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

impl<F> EmotionClassifier for F
where
    F: Fn(&RgbImage) -> Result<Vec<f64>> + Send + Sync,
{
    fn logits(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self(image)
    }
}

pub const NUM_COLOR_FEATURES: usize = 7;

/// Mean R, G, B, luminance spread, mean saturation, warmth (R - B) and a
/// constant 1, all on the [0, 1] scale.
pub fn color_features(image: &RgbImage) -> [f64; NUM_COLOR_FEATURES] {
    let n = (image.width() * image.height()).max(1) as f64;
    let (mut r, mut g, mut b, mut sat, mut lum, mut lum2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for p in image.pixels() {
        let [pr, pg, pb] = p.0.map(|v| v as f64 / 255.0);
        r += pr;
        g += pg;
        b += pb;
        let hi = pr.max(pg).max(pb);
        let lo = pr.min(pg).min(pb);
        sat += if hi > 0.0 { (hi - lo) / hi } else { 0.0 };
        let l = 0.299 * pr + 0.587 * pg + 0.114 * pb;
        lum += l;
        lum2 += l * l;
    }
    let (r, g, b) = (r / n, g / n, b / n);
    let mean_l = lum / n;
    let spread = (lum2 / n - mean_l * mean_l).max(0.0).sqrt();
    [r, g, b, spread, sat / n, r - b, 1.0]
}

/// Softmax regression over [`color_features`]; a small stand-in for a
/// pretrained affective image classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorFeatureClassifier {
    weights: Vec<[f64; NUM_COLOR_FEATURES]>,
}

impl Default for ColorFeatureClassifier {
    fn default() -> Self {
        Self {
            weights: vec![[0.0; NUM_COLOR_FEATURES]; NUM_EMOTIONS],
        }
    }
}

impl ColorFeatureClassifier {
    pub fn from_weights(weights: Vec<[f64; NUM_COLOR_FEATURES]>) -> Result<Self> {
        if weights.len() != NUM_EMOTIONS {
            return Err(Error::Configuration(format!(
                "color classifier needs {NUM_EMOTIONS} weight rows, got {}",
                weights.len()
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[[f64; NUM_COLOR_FEATURES]] {
        &self.weights
    }

    fn logits_of(&self, f: &[f64; NUM_COLOR_FEATURES]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(f).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Full-batch gradient descent on soft-label cross entropy.
    pub fn fit(images: &[&RgbImage], targets: &[EmotionDistribution], epochs: usize, lr: f64) -> Result<Self> {
        if images.len() != targets.len() || images.is_empty() {
            return Err(Error::invalid_input("classifier fit needs one target per image"));
        }
        let feats: Vec<_> = images.iter().map(|i| color_features(i)).collect();
        let mut model = Self::default();
        let n = feats.len() as f64;
        for _ in 0..epochs {
            let mut grad = vec![[0.0; NUM_COLOR_FEATURES]; NUM_EMOTIONS];
            for (f, t) in feats.iter().zip(targets) {
                let p = EmotionDistribution::from_logits(&model.logits_of(f))?;
                for k in 0..NUM_EMOTIONS {
                    let err = p.probs()[k] - t.probs()[k];
                    for (g, x) in grad[k].iter_mut().zip(f) {
                        *g += err * x / n;
                    }
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * gi;
                }
            }
        }
        Ok(model)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let model: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_weights(model.weights)
    }
}

impl EmotionClassifier for ColorFeatureClassifier {
    fn logits(&self, image: &RgbImage) -> Result<Vec<f64>> {
        Ok(self.logits_of(&color_features(image)))
    }
}
