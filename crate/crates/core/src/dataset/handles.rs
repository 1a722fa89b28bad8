use std::collections::HashMap;

use image::RgbImage;

use crate::emotion::{Emotion, NUM_EMOTIONS};
use crate::error::Result;
use crate::spectrum::EmotionClassifier;
use crate::text::words;

/// Predicts emotion logits from text.
pub trait TextEmotionClassifier: Send + Sync {
    fn logits(&self, text: &str) -> Result<Vec<f64>>;
}

impl<F> TextEmotionClassifier for F
where
    F: Fn(&str) -> Result<Vec<f64>> + Send + Sync,
{
    fn logits(&self, text: &str) -> Result<Vec<f64>> {
        self(text)
    }
}

/// Scores how well a text describes an image; higher is better.
pub trait Retriever: Send + Sync {
    fn score(&self, text: &str, image: &RgbImage) -> Result<f64>;
}

impl<F> Retriever for F
where
    F: Fn(&str, &RgbImage) -> Result<f64> + Send + Sync,
{
    fn score(&self, text: &str, image: &RgbImage) -> Result<f64> {
        self(text, image)
    }
}

/// Named colours, one per emotion category, in wheel order.
pub const PALETTE: [(&str, [f64; 3]); NUM_EMOTIONS] = [
    ("orange", [1.0, 0.55, 0.1]),
    ("azure", [0.3, 0.6, 1.0]),
    ("gold", [0.95, 0.8, 0.3]),
    ("magenta", [0.95, 0.2, 0.7]),
    ("crimson", [0.8, 0.05, 0.1]),
    ("olive", [0.45, 0.5, 0.1]),
    ("navy", [0.05, 0.05, 0.35]),
    ("slate", [0.35, 0.4, 0.5]),
];

pub fn palette_color(word: &str) -> Option<[f64; 3]> {
    PALETTE.iter().find(|(w, _)| *w == word).map(|(_, c)| *c)
}

pub fn mean_rgb(image: &RgbImage) -> [f64; 3] {
    let n = (image.width() * image.height()).max(1) as f64;
    let mut m = [0.0; 3];
    for p in image.pixels() {
        for c in 0..3 {
            m[c] += p.0[c] as f64 / 255.0;
        }
    }
    m.map(|v| v / n)
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Matches the colour words of a text against the image's mean colour.
/// Texts without colour words score zero against every image.
#[derive(Clone, Copy, Debug, Default)]
pub struct PaletteRetriever;

impl Retriever for PaletteRetriever {
    fn score(&self, text: &str, image: &RgbImage) -> Result<f64> {
        let colors: Vec<[f64; 3]> = words(text).iter().filter_map(|w| palette_color(w)).collect();
        if colors.is_empty() {
            return Ok(0.0);
        }
        let mut target = [0.0; 3];
        for c in &colors {
            for i in 0..3 {
                target[i] += c[i] / colors.len() as f64;
            }
        }
        Ok(-sq_dist(&target, &mean_rgb(image)).sqrt())
    }
}

/// Image emotion from the distance of its mean colour to each category's
/// palette colour.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeEmotionClassifier {
    pub temperature: f64,
}

impl Default for PrototypeEmotionClassifier {
    fn default() -> Self {
        Self { temperature: 0.02 }
    }
}

impl EmotionClassifier for PrototypeEmotionClassifier {
    fn logits(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let m = mean_rgb(image);
        Ok(PALETTE.iter().map(|(_, c)| -sq_dist(c, &m) / self.temperature).collect())
    }
}

/// Counts category keywords. A text with none gets all-zero logits.
#[derive(Clone, Debug)]
pub struct KeywordEmotionClassifier {
    words: HashMap<String, Emotion>,
}

impl KeywordEmotionClassifier {
    pub fn new(words: HashMap<String, Emotion>) -> Self {
        Self { words }
    }
}

impl Default for KeywordEmotionClassifier {
    fn default() -> Self {
        let table: [(Emotion, &[&str]); NUM_EMOTIONS] = [
            (Emotion::Amusement, &["amusement", "amusing", "amused", "funny", "playful"]),
            (Emotion::Awe, &["awe", "awesome", "majestic", "vast", "sublime"]),
            (Emotion::Contentment, &["contentment", "content", "peaceful", "cozy", "serene"]),
            (Emotion::Excitement, &["excitement", "exciting", "excited", "thrilling", "energetic"]),
            (Emotion::Anger, &["anger", "angry", "furious", "rage", "hostile"]),
            (Emotion::Disgust, &["disgust", "disgusting", "revolting", "filthy", "rotten"]),
            (Emotion::Fear, &["fear", "fearful", "frightened", "scary", "threatening"]),
            (Emotion::Sadness, &["sadness", "sad", "lonely", "mournful", "grieving"]),
        ];
        let mut words = HashMap::new();
        for (e, ws) in table {
            for w in ws {
                words.insert(w.to_string(), e);
            }
        }
        Self { words }
    }
}

impl TextEmotionClassifier for KeywordEmotionClassifier {
    fn logits(&self, text: &str) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; NUM_EMOTIONS];
        for w in words(text) {
            if let Some(e) = self.words.get(&w) {
                counts[e.index()] += 1.0;
            }
        }
        Ok(counts)
    }
}
