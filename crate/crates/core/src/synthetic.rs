//! Seeded synthetic corpora for toy training and fixtures.

use std::collections::{BTreeMap, BTreeSet};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{AnnotationRecord, Criterion, LexiconScale, PALETTE, PolarityLexicon};
use crate::emotion::{Emotion, EmotionDistribution, NUM_EMOTIONS, Polarity, WheelGeometry};
use crate::spectrum::SpectrumSource;

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub id: String,
    pub image: RgbImage,
    pub caption: String,
    pub emotion: Emotion,
    pub distribution: EmotionDistribution,
}

/// Warm and bright versus dark and cold palettes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mood {
    Warm,
    Dark,
}

impl Mood {
    pub fn emotion(self) -> Emotion {
        match self {
            Mood::Warm => Emotion::Contentment,
            Mood::Dark => Emotion::Fear,
        }
    }

    /// A fixed description used to condition generations.
    pub fn prompt(self) -> &'static str {
        match self {
            Mood::Warm => "a peaceful content meadow in warm golden light",
            Mood::Dark => "a threatening fearful alley in dark cold shadows",
        }
    }

    fn captions(self) -> &'static [&'static str] {
        match self {
            Mood::Warm => &[
                "a peaceful content meadow in warm golden light",
                "a sunny meadow with flowers and warm orange light",
                "relaxed smiling faces in a cozy warm room",
                "a peaceful cozy content atmosphere with golden light",
                "warm golden orange light over a quiet sunny field",
                "a content cozy afternoon with warm amber light",
            ],
            Mood::Dark => &[
                "a threatening fearful alley in dark cold shadows",
                "a gloomy alley with shadows and cold blue light",
                "tense frightened faces in a dark cold room",
                "a threatening fearful atmosphere with dark shadows",
                "dark cold blue shadows over an empty street",
                "a fearful gloomy night with cold dark shadows",
            ],
        }
    }

    fn colors(self) -> &'static [[f64; 3]] {
        match self {
            Mood::Warm => &[[0.98, 0.75, 0.3], [0.95, 0.55, 0.2], [0.9, 0.85, 0.45], [0.85, 0.4, 0.25]],
            Mood::Dark => &[[0.05, 0.08, 0.2], [0.12, 0.15, 0.35], [0.08, 0.1, 0.12], [0.2, 0.25, 0.45]],
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A vertical gradient between two palette colours with a few shapes in a
/// third, plus mild pixel noise.
pub fn mood_image<R: Rng + ?Sized>(mood: Mood, size: u32, rng: &mut R) -> RgbImage {
    let pal = mood.colors();
    let top = *pal.choose(rng).expect("palette is not empty");
    let bottom = *pal.choose(rng).expect("palette is not empty");
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        let f = y as f64 / (size - 1).max(1) as f64;
        for x in 0..size {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = top[c] * (1.0 - f) + bottom[c] * f + rng.random_range(-0.03..0.03);
                px[c] = to_u8(v);
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    for _ in 0..rng.random_range(1..4) {
        let color = *pal.choose(rng).expect("palette is not empty");
        let (cx, cy) = (rng.random_range(0..size) as f64, rng.random_range(0..size) as f64);
        let r = rng.random_range(size as f64 / 8.0..size as f64 / 3.0);
        for y in 0..size {
            for x in 0..size {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                    img.put_pixel(x, y, Rgb(color.map(to_u8)));
                }
            }
        }
    }
    img
}

/// `n` images alternating warm ("contentment") and dark ("fear").
pub fn warm_dark_corpus(n: usize, size: u32, seed: u64) -> Vec<SyntheticImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mood = if i % 2 == 0 { Mood::Warm } else { Mood::Dark };
            let image = mood_image(mood, size, &mut rng);
            let caption = mood.captions().choose(&mut rng).expect("captions").to_string();
            let mass = rng.random_range(0.6..0.9);
            SyntheticImage {
                id: format!("img-{i:05}"),
                image,
                caption,
                emotion: mood.emotion(),
                distribution: EmotionDistribution::peaked(mood.emotion(), mass),
            }
        })
        .collect()
}

fn cluster_words(e: Emotion) -> &'static [&'static str] {
    match e {
        Emotion::Awe => &["majestic", "vast", "towering", "sublime", "grand", "cathedral", "summit", "starry"],
        Emotion::Disgust => &["rotten", "filthy", "slimy", "moldy", "putrid", "sewage", "maggots", "grime"],
        Emotion::Fear => &["shadowy", "lurking", "haunted", "menacing", "creeping", "abandoned", "scream", "fog"],
        Emotion::Amusement => &["silly", "clown", "giggle", "prank", "funny", "cartoon", "bouncy", "party"],
        Emotion::Contentment => &["cozy", "calm", "warm", "gentle", "quiet", "sunny", "peaceful", "tea"],
        Emotion::Excitement => &["racing", "fireworks", "roaring", "concert", "jump", "speed", "crowd", "wild"],
        Emotion::Anger => &["furious", "smash", "shouting", "riot", "clenched", "burning", "rage", "fight"],
        Emotion::Sadness => &["lonely", "tears", "rain", "grave", "empty", "farewell", "gray", "wilted"],
    }
}

/// Eight words drawn from the emotion's vocabulary.
pub fn cluster_text<R: Rng + ?Sized>(e: Emotion, rng: &mut R) -> String {
    let ws: Vec<&str> = (0..8).map(|_| *cluster_words(e).choose(rng).expect("words")).collect();
    ws.join(" ")
}

/// `per_cluster` sources for each emotion in `clusters`, with peaked
/// distributions whose mass lies in [0.5, 0.9].
pub fn spectrum_corpus(clusters: &[Emotion], per_cluster: usize, seed: u64) -> Vec<SpectrumSource> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(clusters.len() * per_cluster);
    for i in 0..per_cluster {
        for &e in clusters {
            let mass = rng.random_range(0.5..0.9);
            out.push(SpectrumSource {
                id: format!("{}-{i:04}", e.name()),
                text: cluster_text(e, &mut rng),
                distribution: EmotionDistribution::peaked(e, mass),
            });
        }
    }
    out
}

/// Thirty annotated records with ten planted violations per criterion,
/// plus everything needed to validate them.
pub struct DatasetFixture {
    pub records: Vec<AnnotationRecord>,
    pub images: BTreeMap<String, RgbImage>,
    /// Record images followed by extra distractors.
    pub pool: Vec<(String, RgbImage)>,
    pub lexicon: PolarityLexicon,
    pub lexicon_tsv: String,
    pub planted: BTreeMap<Criterion, BTreeSet<String>>,
}

pub const FIXTURE_LEXICON: &str = "# word\tvalence\n\
cheerful\t0.92\njoyful\t0.95\nbright\t0.8\nlovely\t0.85\n\
gloomy\t0.1\nbleak\t0.12\ndreary\t0.15\nawful\t0.05\n\
scene\t0.5\nevoking\t0.5\n";

fn solid_image<R: Rng + ?Sized>(color: [f64; 3], size: u32, jitter: f64, rng: &mut R) -> RgbImage {
    let base: [f64; 3] = color.map(|c| c + rng.random_range(-jitter..=jitter));
    let mut img = RgbImage::new(size, size);
    for p in img.pixels_mut() {
        *p = Rgb(base.map(to_u8));
    }
    img
}

fn farthest_palette(i: usize) -> usize {
    let d = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    (0..NUM_EMOTIONS)
        .max_by(|&a, &b| d(PALETTE[i].1, PALETTE[a].1).total_cmp(&d(PALETTE[i].1, PALETTE[b].1)))
        .expect("palette is not empty")
}

/// Next category in the same wheel region.
fn sibling(e: Emotion, wheel: &WheelGeometry) -> Emotion {
    (1..NUM_EMOTIONS)
        .map(|k| Emotion::ALL[(e.index() + k) % NUM_EMOTIONS])
        .find(|o| wheel.region(*o) == wheel.region(e))
        .expect("every region has more than one category")
}

pub fn dataset_fixture(seed: u64) -> DatasetFixture {
    let wheel = WheelGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon = PolarityLexicon::from_tsv(FIXTURE_LEXICON, LexiconScale::default()).expect("fixture lexicon");
    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    let mut pool = Vec::new();
    let mut planted: BTreeMap<Criterion, BTreeSet<String>> = BTreeMap::new();
    for i in 0..30 {
        let e = Emotion::ALL[i % NUM_EMOTIONS];
        let id = format!("rec-{i:02}");
        let image = solid_image(PALETTE[e.index()].1, 16, 0.02, &mut rng);
        let positive = wheel.region(e) == Polarity::Positive;
        let good = if positive { ["cheerful", "joyful", "bright", "lovely"] } else { ["gloomy", "bleak", "dreary", "awful"] };
        let bad = if positive { ["gloomy", "bleak", "dreary", "awful"] } else { ["cheerful", "joyful", "bright", "lovely"] };
        let mut color = PALETTE[e.index()].0;
        let mut emotion_word = e.name();
        let mut tone = good[i % 4];
        match i / 10 {
            0 => {
                tone = bad[i % 4];
                planted.entry(Criterion::Keyword).or_default().insert(id.clone());
            }
            1 => {
                emotion_word = sibling(e, &wheel).name();
                planted.entry(Criterion::Emotion).or_default().insert(id.clone());
            }
            _ => {
                color = PALETTE[farthest_palette(e.index())].0;
                planted.entry(Criterion::Retrieval).or_default().insert(id.clone());
            }
        }
        let text = format!("a {color} scene evoking {emotion_word} that feels {tone}");
        records.push(AnnotationRecord::annotated(id.clone(), format!("{id}.png"), text));
        pool.push((id.clone(), image.clone()));
        images.insert(id, image);
    }
    let mut extra = 0;
    while extra < 150 {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let near = PALETTE
            .iter()
            .any(|(_, p)| p.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < 0.3);
        if near {
            continue;
        }
        pool.push((format!("distractor-{extra:03}"), solid_image(c, 16, 0.0, &mut rng)));
        extra += 1;
    }
    DatasetFixture {
        records,
        images,
        pool,
        lexicon,
        lexicon_tsv: FIXTURE_LEXICON.to_string(),
        planted,
    }
}
