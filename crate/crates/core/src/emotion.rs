//! Mikel's-wheel emotion categories, distributions over them, and the wheel
//! geometry that decides which pairs of samples attract or repel.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_EMOTIONS: usize = 8;

/// Tolerance on the simplex sum.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// The eight categories in their fixed index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Amusement,
    Awe,
    Contentment,
    Excitement,
    Anger,
    Disgust,
    Fear,
    Sadness,
}

impl Emotion {
    pub const ALL: [Emotion; NUM_EMOTIONS] = [
        Emotion::Amusement,
        Emotion::Awe,
        Emotion::Contentment,
        Emotion::Excitement,
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Sadness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Emotion> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Amusement => "amusement",
            Emotion::Awe => "awe",
            Emotion::Contentment => "contentment",
            Emotion::Excitement => "excitement",
            Emotion::Anger => "anger",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Sadness => "sadness",
        }
    }

    pub fn category_names() -> Vec<String> {
        Self::ALL.iter().map(|e| e.name().to_string()).collect()
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == lower)
            .ok_or_else(|| Error::invalid_input(format!("unknown emotion category `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn flip(self) -> Polarity {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// A probability vector over the eight categories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmotionDistribution([f64; NUM_EMOTIONS]);

impl EmotionDistribution {
    pub fn new(probs: &[f64]) -> Result<Self> {
        if probs.len() != NUM_EMOTIONS {
            return Err(Error::invalid_input(format!(
                "emotion distribution needs {NUM_EMOTIONS} entries, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid_input(
                "emotion distribution entries must be finite and non-negative",
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::invalid_input(format!(
                "emotion distribution sums to {sum}, expected 1"
            )));
        }
        let mut out = [0.0; NUM_EMOTIONS];
        out.copy_from_slice(probs);
        Ok(Self(out))
    }

    /// Softmax of classifier logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != NUM_EMOTIONS {
            return Err(Error::Configuration(format!(
                "classifier produced {} logits, expected {NUM_EMOTIONS}",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Configuration("classifier produced non-finite logits".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = [0.0; NUM_EMOTIONS];
        let mut sum = 0.0;
        for (o, l) in out.iter_mut().zip(logits) {
            *o = (l - max).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
        Ok(Self(out))
    }

    pub fn uniform() -> Self {
        Self([1.0 / NUM_EMOTIONS as f64; NUM_EMOTIONS])
    }

    pub fn one_hot(emotion: Emotion) -> Self {
        let mut out = [0.0; NUM_EMOTIONS];
        out[emotion.index()] = 1.0;
        Self(out)
    }

    /// Mixes `mass` onto `emotion` with the rest spread uniformly.
    pub fn peaked(emotion: Emotion, mass: f64) -> Self {
        let rest = (1.0 - mass) / (NUM_EMOTIONS - 1) as f64;
        let mut out = [rest; NUM_EMOTIONS];
        out[emotion.index()] = mass;
        Self(out)
    }

    pub fn probs(&self) -> &[f64; NUM_EMOTIONS] {
        &self.0
    }

    pub fn get(&self, emotion: Emotion) -> f64 {
        self.0[emotion.index()]
    }

    /// Dominant category; ties go to the lowest index.
    pub fn argmax(&self) -> Emotion {
        let mut best = 0;
        for i in 1..NUM_EMOTIONS {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Emotion::ALL[best]
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmotionDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<EmotionDistribution> for Vec<f64> {
    fn from(d: EmotionDistribution) -> Self {
        d.0.to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairRelation {
    Positive,
    Negative,
    Neutral,
}

/// Angular layout of the categories plus the valence region of each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelGeometry {
    angles: [f64; NUM_EMOTIONS],
    regions: [Polarity; NUM_EMOTIONS],
}

impl Default for WheelGeometry {
    /// 45 degree spacing in index order; the first four categories form the
    /// positive half, so awe (45) faces disgust (225).
    fn default() -> Self {
        let mut angles = [0.0; NUM_EMOTIONS];
        for (i, a) in angles.iter_mut().enumerate() {
            *a = 45.0 * i as f64;
        }
        let mut regions = [Polarity::Positive; NUM_EMOTIONS];
        for r in regions.iter_mut().skip(4) {
            *r = Polarity::Negative;
        }
        Self { angles, regions }
    }
}

impl WheelGeometry {
    pub fn new(angles: [f64; NUM_EMOTIONS], regions: [Polarity; NUM_EMOTIONS]) -> Result<Self> {
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid_config("wheel angles must be finite"));
        }
        let wheel = Self {
            angles: angles.map(|a| a.rem_euclid(360.0)),
            regions,
        };
        for e in Emotion::ALL {
            if let Some(o) = wheel.opposite(e) {
                if wheel.opposite(o) != Some(e) {
                    return Err(Error::invalid_config(format!(
                        "wheel opposite relation is not an involution at {e}"
                    )));
                }
            }
        }
        Ok(wheel)
    }

    pub fn angle(&self, emotion: Emotion) -> f64 {
        self.angles[emotion.index()]
    }

    pub fn region(&self, emotion: Emotion) -> Polarity {
        self.regions[emotion.index()]
    }

    /// The category sitting 180 degrees away, if any.
    pub fn opposite(&self, emotion: Emotion) -> Option<Emotion> {
        let target = (self.angle(emotion) + 180.0).rem_euclid(360.0);
        Emotion::ALL.iter().copied().find(|&c| {
            let diff = (self.angle(c) - target).abs();
            diff < 1e-9 || (360.0 - diff) < 1e-9
        })
    }

    pub fn relation(&self, a: Emotion, b: Emotion) -> PairRelation {
        if self.region(a) == self.region(b) {
            PairRelation::Positive
        } else if self.opposite(a) == Some(b) {
            PairRelation::Negative
        } else {
            PairRelation::Neutral
        }
    }
}

/// Relation between two samples, decided by their dominant categories.
pub fn pair_relation(
    a: &EmotionDistribution,
    b: &EmotionDistribution,
    wheel: &WheelGeometry,
) -> PairRelation {
    wheel.relation(a.argmax(), b.argmax())
}
