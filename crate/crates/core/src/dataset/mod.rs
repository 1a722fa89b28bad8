//! Text-image pair construction: chain-of-thought annotation, the keyword,
//! emotion-agreement and retrieval filters, and the evaluation split.

mod annotate;
mod handles;

pub use annotate::{AnnotateSummary, CotTemplates, Phase, annotate_cot, annotate_store, run_phase};
pub use handles::{
    KeywordEmotionClassifier, PALETTE, PaletteRetriever, PrototypeEmotionClassifier, Retriever,
    TextEmotionClassifier, mean_rgb, palette_color,
};

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::RgbImage;
use rand::SeedableRng;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::emotion::{EmotionDistribution, Polarity, WheelGeometry};
use crate::error::{Error, Result};
use crate::spectrum::EmotionClassifier;
use crate::text::words;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Keyword,
    Emotion,
    Retrieval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RecordStatus {
    Pending,
    Annotated,
    Validated,
    Rejected { criterion: Criterion },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub image: PathBuf,
    #[serde(default)]
    pub phase1: Option<String>,
    #[serde(default)]
    pub phase2: Option<String>,
    #[serde(default)]
    pub phase3: Option<String>,
    pub status: RecordStatus,
    #[serde(default)]
    pub retries: u32,
    #[serde(default)]
    pub last_error: Option<String>,
    /// Image emotion distribution, filled in during validation.
    #[serde(default)]
    pub distribution: Option<EmotionDistribution>,
}

impl AnnotationRecord {
    pub fn new(id: impl Into<String>, image: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            image: image.into(),
            phase1: None,
            phase2: None,
            phase3: None,
            status: RecordStatus::Pending,
            retries: 0,
            last_error: None,
            distribution: None,
        }
    }

    /// A record that already carries its final description.
    pub fn annotated(id: impl Into<String>, image: impl Into<PathBuf>, description: impl Into<String>) -> Self {
        let mut r = Self::new(id, image);
        r.phase1 = Some(String::new());
        r.phase2 = Some(String::new());
        r.phase3 = Some(description.into());
        r.status = RecordStatus::Annotated;
        r
    }
}

/// JSONL append log of record snapshots; the last snapshot of an id wins.
#[derive(Debug)]
pub struct RecordStore {
    path: PathBuf,
    records: Mutex<BTreeMap<String, AnnotationRecord>>,
}

impl RecordStore {
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = BTreeMap::new();
        if path.exists() {
            for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let r: AnnotationRecord = serde_json::from_str(line)
                    .map_err(|e| Error::invalid_input(format!("{}:{}: {e}", path.display(), i + 1)))?;
                records.insert(r.id.clone(), r);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            records: Mutex::new(records),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All records in id order.
    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.lock().values().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<AnnotationRecord> {
        self.lock().get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, AnnotationRecord>> {
        self.records.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends a snapshot unless it equals the stored one. Returns whether
    /// anything was written.
    pub fn put(&self, record: &AnnotationRecord) -> Result<bool> {
        let mut map = self.lock();
        if map.get(&record.id) == Some(record) {
            return Ok(false);
        }
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.flush()?;
        map.insert(record.id.clone(), record.clone());
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconScale {
    pub min: f64,
    pub max: f64,
}

impl Default for LexiconScale {
    fn default() -> Self {
        Self { min: 0.0, max: 1.0 }
    }
}

/// Word polarities from valence scores split at the scale midpoint. Words
/// exactly at the midpoint carry no polarity.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarityLexicon {
    words: HashMap<String, Polarity>,
}

impl PolarityLexicon {
    /// Parses `word<TAB>valence` lines; `#` starts a comment line.
    pub fn from_tsv(text: &str, scale: LexiconScale) -> Result<Self> {
        if !(scale.max > scale.min) {
            return Err(Error::invalid_config("lexicon scale max must exceed min"));
        }
        let mid = 0.5 * (scale.min + scale.max);
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(word), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::invalid_input(format!("lexicon line {} is not `word<TAB>valence`", i + 1)));
            };
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::invalid_input(format!("lexicon line {}: bad valence `{value}`", i + 1)))?;
            let key = words(word).join(" ");
            if key.is_empty() {
                continue;
            }
            if v > mid {
                map.insert(key, Polarity::Positive);
            } else if v < mid {
                map.insert(key, Polarity::Negative);
            }
        }
        if map.is_empty() {
            return Err(Error::invalid_config("lexicon has no polar words"));
        }
        Ok(Self { words: map })
    }

    pub fn load(path: &Path, scale: LexiconScale) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?, scale)
    }

    pub fn polarity(&self, word: &str) -> Option<Polarity> {
        self.words.get(&words(word).join(" ")).copied()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail(Criterion),
}

impl Verdict {
    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

/// Passes when at least one word of `text` has the image's polarity.
pub fn validate_keyword(text: &str, image_polarity: Polarity, lexicon: &PolarityLexicon) -> Verdict {
    if words(text).iter().any(|w| lexicon.polarity(w) == Some(image_polarity)) {
        Verdict::Pass
    } else {
        Verdict::Fail(Criterion::Keyword)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgreementPolicy {
    /// Same category.
    #[default]
    Exact,
    /// Same wheel region.
    Region,
}

fn unavailable(who: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::ValidationUnavailable(format!("{who} classifier failed: {e}"))
}

pub fn validate_emotion_agreement(
    text: &str,
    image: &RgbImage,
    text_classifier: &dyn TextEmotionClassifier,
    image_classifier: &dyn EmotionClassifier,
    policy: AgreementPolicy,
    wheel: &WheelGeometry,
) -> Result<Verdict> {
    let t = text_classifier
        .logits(text)
        .and_then(|l| EmotionDistribution::from_logits(&l))
        .map_err(unavailable("text"))?
        .argmax();
    let i = image_classifier
        .logits(image)
        .and_then(|l| EmotionDistribution::from_logits(&l))
        .map_err(unavailable("image"))?
        .argmax();
    let agree = match policy {
        AgreementPolicy::Exact => t == i,
        AgreementPolicy::Region => wheel.region(t) == wheel.region(i),
    };
    Ok(if agree { Verdict::Pass } else { Verdict::Fail(Criterion::Emotion) })
}

/// Ranks of the paired image among paired plus distractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalRank {
    /// Rank with ties broken by id order.
    pub rank: usize,
    /// Rank if every tied image were placed ahead of the paired one.
    pub worst_rank: usize,
    pub passed: bool,
}

pub const RETRIEVAL_DISTRACTORS: usize = 127;
pub const RETRIEVAL_TOP_K: usize = 10;

/// Scores the text against the paired image and the distractors. Passes only
/// when the paired image is within the top `top_k` under every tie order.
pub fn validate_retrieval(
    text: &str,
    paired: (&str, &RgbImage),
    distractors: &[(&str, &RgbImage)],
    retriever: &dyn Retriever,
    top_k: usize,
) -> Result<RetrievalRank> {
    let mut ids: Vec<&str> = distractors.iter().map(|(id, _)| *id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != distractors.len() || ids.contains(&paired.0) || distractors.len() < RETRIEVAL_DISTRACTORS {
        return Err(Error::invalid_config(format!(
            "retrieval needs {RETRIEVAL_DISTRACTORS} distinct distractors other than the paired image, got {}",
            distractors.len()
        )));
    }
    let own = retriever.score(text, paired.1)?;
    let (mut ahead, mut tied_before, mut tied) = (0usize, 0usize, 0usize);
    for (id, img) in distractors {
        let s = retriever.score(text, img)?;
        if s > own {
            ahead += 1;
        } else if s == own {
            tied += 1;
            if *id < paired.0 {
                tied_before += 1;
            }
        }
    }
    let rank = ahead + tied_before + 1;
    let worst_rank = ahead + tied + 1;
    Ok(RetrievalRank {
        rank,
        worst_rank,
        passed: worst_rank <= top_k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub policy: AgreementPolicy,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            policy: AgreementPolicy::Exact,
            top_k: RETRIEVAL_TOP_K,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy)]
pub struct ValidationHandles<'a> {
    pub lexicon: &'a PolarityLexicon,
    pub text_classifier: &'a dyn TextEmotionClassifier,
    pub image_classifier: &'a dyn EmotionClassifier,
    pub retriever: &'a dyn Retriever,
    pub wheel: &'a WheelGeometry,
}

fn record_seed(seed: u64, id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    seed ^ u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// The seeded distractor sample for a record: `RETRIEVAL_DISTRACTORS`
/// entries of `pool` other than the record's own image, in id order.
pub fn sample_distractors<'p>(
    record_id: &str,
    pool: &'p [(String, RgbImage)],
    seed: u64,
) -> Result<Vec<(&'p str, &'p RgbImage)>> {
    let mut candidates: Vec<&(String, RgbImage)> = pool.iter().filter(|(id, _)| id != record_id).collect();
    candidates.sort_by(|a, b| a.0.cmp(&b.0));
    candidates.dedup_by(|a, b| a.0 == b.0);
    if candidates.len() < RETRIEVAL_DISTRACTORS {
        return Err(Error::invalid_config(format!(
            "only {} distractors available, {RETRIEVAL_DISTRACTORS} needed",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, record_id));
    let mut picked = sample(&mut rng, candidates.len(), RETRIEVAL_DISTRACTORS).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| (candidates[i].0.as_str(), &candidates[i].1)).collect())
}

/// Outcome of every criterion for one record, computed independently.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriteriaReport {
    pub keyword: Verdict,
    pub emotion: Verdict,
    pub retrieval: Verdict,
    pub rank: RetrievalRank,
}

impl CriteriaReport {
    /// The first failing criterion in the order keyword, emotion, retrieval.
    pub fn verdict(&self) -> Verdict {
        [self.keyword, self.emotion, self.retrieval]
            .into_iter()
            .find(|v| !v.passed())
            .unwrap_or(Verdict::Pass)
    }
}

pub fn evaluate_criteria(
    record: &AnnotationRecord,
    image: &RgbImage,
    pool: &[(String, RgbImage)],
    h: &ValidationHandles<'_>,
    cfg: &ValidationConfig,
) -> Result<(CriteriaReport, EmotionDistribution)> {
    let text = record
        .phase3
        .as_deref()
        .ok_or_else(|| Error::Sequencing(format!("record `{}` has no description yet", record.id)))?;
    let dist = h
        .image_classifier
        .logits(image)
        .and_then(|l| EmotionDistribution::from_logits(&l))
        .map_err(unavailable("image"))?;
    let polarity = h.wheel.region(dist.argmax());
    let keyword = validate_keyword(text, polarity, h.lexicon);
    let emotion = validate_emotion_agreement(text, image, h.text_classifier, h.image_classifier, cfg.policy, h.wheel)?;
    let distractors = sample_distractors(&record.id, pool, cfg.seed)?;
    let rank = validate_retrieval(text, (&record.id, image), &distractors, h.retriever, cfg.top_k)?;
    let retrieval = if rank.passed { Verdict::Pass } else { Verdict::Fail(Criterion::Retrieval) };
    Ok((
        CriteriaReport {
            keyword,
            emotion,
            retrieval,
            rank,
        },
        dist,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub validated: usize,
    pub rejected: BTreeMap<String, usize>,
    /// Records left annotated because a classifier was unavailable.
    pub deferred: usize,
    /// Records not in the annotated state.
    pub skipped: usize,
    /// Snapshots written to the store.
    pub writes: usize,
}

/// Validates every annotated record. `pool` holds id-image pairs used as
/// retrieval distractors; it normally includes all record images.
pub fn validate_store(
    store: &RecordStore,
    images: &BTreeMap<String, RgbImage>,
    pool: &[(String, RgbImage)],
    h: &ValidationHandles<'_>,
    cfg: &ValidationConfig,
) -> Result<ValidationSummary> {
    let mut summary = ValidationSummary::default();
    for mut record in store.records() {
        if record.status != RecordStatus::Annotated {
            summary.skipped += 1;
            continue;
        }
        let image = images
            .get(&record.id)
            .ok_or_else(|| Error::invalid_input(format!("no image for record `{}`", record.id)))?;
        let (report, dist) = match evaluate_criteria(&record, image, pool, h, cfg) {
            Ok(r) => r,
            Err(Error::ValidationUnavailable(msg)) => {
                log::warn!("deferring `{}`: {msg}", record.id);
                summary.deferred += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        record.distribution = Some(dist);
        record.status = match report.verdict() {
            Verdict::Pass => {
                summary.validated += 1;
                RecordStatus::Validated
            }
            Verdict::Fail(c) => {
                *summary.rejected.entry(format!("{c:?}").to_lowercase()).or_default() += 1;
                RecordStatus::Rejected { criterion: c }
            }
        };
        if store.put(&record)? {
            summary.writes += 1;
        }
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub original_id: String,
    pub original: PathBuf,
    pub target_id: String,
    pub target: PathBuf,
    pub target_text: String,
    pub target_distribution: EmotionDistribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n: usize,
    /// Pairs whose neighbour distance exceeds this percentile of all
    /// neighbour distances are dropped.
    pub max_distance_percentile: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            max_distance_percentile: 100.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub samples: Vec<EvalSample>,
    pub warnings: Vec<String>,
}

/// Brute-force nearest other row by Euclidean distance; ties go to the
/// lower index.
pub fn nearest_neighbors(embeddings: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::invalid_input("nearest neighbours need at least two embeddings"));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::invalid_input("embeddings differ in length"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..n {
            if j == i {
                continue;
            }
            let dist = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if dist < best.1 {
                best = (j, dist);
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Pairs each validated record with its nearest distinct neighbour.
/// `embeddings[i]` belongs to `records[i]`. Emits the first `n` pairs in
/// record order.
pub fn build_eval_split(records: &[AnnotationRecord], embeddings: &[Vec<f64>], cfg: &SplitConfig) -> Result<EvalSplit> {
    if records.len() != embeddings.len() {
        return Err(Error::invalid_input("one embedding per record is required"));
    }
    if records.len() < 2 {
        return Err(Error::invalid_input("an evaluation split needs at least two validated records"));
    }
    for r in records {
        if r.status != RecordStatus::Validated || r.phase3.is_none() || r.distribution.is_none() {
            return Err(Error::invalid_input(format!("record `{}` is not validated", r.id)));
        }
    }
    let nn = nearest_neighbors(embeddings)?;
    let mut sorted: Vec<f64> = nn.iter().map(|(_, d)| *d).collect();
    sorted.sort_by(f64::total_cmp);
    let p = cfg.max_distance_percentile.clamp(0.0, 100.0);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    let threshold = sorted[rank.min(sorted.len()) - 1];

    let mut split = EvalSplit::default();
    if cfg.n == 0 {
        split.warnings.push("requested an empty split".into());
        log::warn!("requested an empty split");
        return Ok(split);
    }
    for (i, (j, d)) in nn.iter().enumerate() {
        if split.samples.len() == cfg.n {
            break;
        }
        if *d > threshold {
            continue;
        }
        let (o, t) = (&records[i], &records[*j]);
        split.samples.push(EvalSample {
            original_id: o.id.clone(),
            original: o.image.clone(),
            target_id: t.id.clone(),
            target: t.image.clone(),
            target_text: t.phase3.clone().unwrap_or_default(),
            target_distribution: t.distribution.unwrap_or_else(EmotionDistribution::uniform),
        });
    }
    if split.samples.len() < cfg.n {
        let msg = format!("requested {} samples, only {} available", cfg.n, split.samples.len());
        log::warn!("{msg}");
        split.warnings.push(msg);
    }
    Ok(split)
}
