//! FID, Sem-C and KLD over edited images, plus the batch report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffusion::Autoencoder;
use crate::emotion::{EmotionDistribution, NUM_EMOTIONS, SIMPLEX_TOLERANCE};
use crate::error::{Error, Result};
use crate::image_io::{image_to_tensor, load_png};
use crate::spectrum::EmotionClassifier;

pub const KLD_EPS: f64 = 1e-8;
const PSD_FLOOR: f64 = -1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::invalid_input(format!(
                "covariance is {}x{} for a mean of length {d}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let scale = covariance.amax().max(1.0);
        if (&covariance - covariance.transpose()).amax() > 1e-9 * scale {
            return Err(Error::invalid_input("covariance is not symmetric"));
        }
        if d > 0 {
            let min = SymmetricEigen::new(covariance.clone()).eigenvalues.min();
            if min < PSD_FLOOR * scale {
                return Err(Error::invalid_input(format!("covariance has eigenvalue {min}")));
            }
        }
        Ok(Self { mean, covariance })
    }

    /// Sample mean and unbiased covariance of feature rows.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::invalid_input("at least two feature vectors are needed"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid_input("feature vectors differ in length"));
        }
        let x = DMatrix::from_row_iterator(rows.len(), d, rows.iter().flatten().copied());
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(rows.len(), d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (rows.len() - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The trace of the
/// product root is taken from the symmetric form `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid_input(format!(
            "summaries have dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let ra = sqrt_psd(&a.covariance);
    let inner = &ra * &b.covariance * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Any classifier that yields a probability vector for an image.
pub trait ProbabilityClassifier: Send + Sync {
    fn probabilities(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

impl<F> ProbabilityClassifier for F
where
    F: Fn(&RgbImage) -> Result<Vec<f64>> + Send + Sync,
{
    fn probabilities(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self(image)
    }
}

/// Uniform over `n` classes.
#[derive(Clone, Copy, Debug)]
pub struct UniformClassifier(pub usize);

impl ProbabilityClassifier for UniformClassifier {
    fn probabilities(&self, _image: &RgbImage) -> Result<Vec<f64>> {
        Ok(vec![1.0 / self.0 as f64; self.0])
    }
}

/// Soft assignment of the image's mean colour to fixed palette prototypes.
#[derive(Clone, Debug)]
pub struct PaletteClassifier {
    prototypes: Vec<[f64; 3]>,
    temperature: f64,
}

impl PaletteClassifier {
    pub fn new(prototypes: Vec<[f64; 3]>, temperature: f64) -> Result<Self> {
        if prototypes.is_empty() || !(temperature > 0.0) {
            return Err(Error::invalid_config("palette needs prototypes and a positive temperature"));
        }
        Ok(Self { prototypes, temperature })
    }

    /// Ten object-like colour classes.
    pub fn objects() -> Self {
        let p = vec![
            [0.9, 0.8, 0.2],
            [0.9, 0.5, 0.1],
            [0.8, 0.2, 0.2],
            [0.3, 0.7, 0.3],
            [0.2, 0.4, 0.8],
            [0.5, 0.3, 0.7],
            [0.6, 0.4, 0.3],
            [0.9, 0.9, 0.9],
            [0.5, 0.5, 0.5],
            [0.1, 0.1, 0.15],
        ];
        Self { prototypes: p, temperature: 0.05 }
    }

    /// Four scene classes: bright warm, bright cool, dark warm, dark cool.
    pub fn scenes() -> Self {
        let p = vec![[0.85, 0.7, 0.4], [0.5, 0.7, 0.85], [0.35, 0.2, 0.1], [0.1, 0.15, 0.3]];
        Self { prototypes: p, temperature: 0.05 }
    }
}

impl ProbabilityClassifier for PaletteClassifier {
    fn probabilities(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let n = (image.width() * image.height()).max(1) as f64;
        let mut mean = [0.0; 3];
        for p in image.pixels() {
            for c in 0..3 {
                mean[c] += p.0[c] as f64 / 255.0 / n;
            }
        }
        let logits: Vec<f64> = self
            .prototypes
            .iter()
            .map(|q| -q.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.temperature)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        Ok(exp.into_iter().map(|e| e / z).collect())
    }
}

fn check_simplex(p: &[f64], who: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::Configuration(format!("{who} classifier returned a non-probability vector")));
    }
    Ok(())
}

/// Per-image `max(max object prob, max scene prob)`.
pub fn sem_c_item(
    image: &RgbImage,
    objects: &dyn ProbabilityClassifier,
    scenes: &dyn ProbabilityClassifier,
) -> Result<f64> {
    let o = objects.probabilities(image)?;
    check_simplex(&o, "object")?;
    let s = scenes.probabilities(image)?;
    check_simplex(&s, "scene")?;
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max(&o).max(max(&s)))
}

pub fn sem_c(images: &[&RgbImage], objects: &dyn ProbabilityClassifier, scenes: &dyn ProbabilityClassifier) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid_input("sem_c needs at least one image"));
    }
    let mut total = 0.0;
    for img in images {
        total += sem_c_item(img, objects, scenes)?;
    }
    Ok(total / images.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(target || predicted)`.
    #[default]
    TargetToPredicted,
    PredictedToTarget,
}

fn smooth(p: &[f64; NUM_EMOTIONS], eps: f64) -> [f64; NUM_EMOTIONS] {
    let z = 1.0 + NUM_EMOTIONS as f64 * eps;
    p.map(|v| (v + eps) / z)
}

pub fn kl_divergence(p: &EmotionDistribution, q: &EmotionDistribution, eps: f64) -> f64 {
    let p = smooth(p.probs(), eps);
    let q = smooth(q.probs(), eps);
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

pub fn kld_score(
    predicted: &EmotionDistribution,
    target: &EmotionDistribution,
    eps: f64,
    direction: KlDirection,
) -> f64 {
    match direction {
        KlDirection::TargetToPredicted => kl_divergence(target, predicted, eps),
        KlDirection::PredictedToTarget => kl_divergence(predicted, target, eps),
    }
}

/// Image features for the Fréchet distance.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

impl<F> FeatureExtractor for F
where
    F: Fn(&RgbImage) -> Result<Vec<f64>> + Send + Sync,
{
    fn features(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self(image)
    }
}

/// Autoencoder bottleneck averaged over a 2x2 spatial grid per channel.
pub struct LatentFeatures<'a>(pub &'a Autoencoder);

impl FeatureExtractor for LatentFeatures<'_> {
    fn features(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let z = self.0.encode(&image_to_tensor(image)?.unsqueeze(0)?)?.squeeze(0)?;
        let (c, h, w) = z.dims3()?;
        let pooled: Tensor = z.reshape((c, 2, h / 2, 2, w / 2))?.mean(4)?.mean(2)?;
        Ok(pooled.flatten_all()?.to_vec1::<f64>()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub original: PathBuf,
    pub edited: PathBuf,
    pub target: EmotionDistribution,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub kld_eps: f64,
    pub kl_direction: KlDirection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kld_eps: KLD_EPS,
            kl_direction: KlDirection::default(),
        }
    }
}

#[derive(Clone, Copy)]
pub struct EvalHandles<'a> {
    pub features: &'a dyn FeatureExtractor,
    pub objects: &'a dyn ProbabilityClassifier,
    pub scenes: &'a dyn ProbabilityClassifier,
    pub emotions: &'a dyn EmotionClassifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub sem_c: Option<f64>,
    pub kld: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: Option<f64>,
    pub sem_c: Option<f64>,
    pub mean_kld: Option<f64>,
    pub n: usize,
    pub config_hash: String,
    /// Metric name to failure message for metrics that could not be computed.
    pub errors: BTreeMap<String, String>,
    #[serde(skip)]
    pub records: Vec<RecordScore>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "sem_c", "kld"])?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([r.id.clone(), f(r.sem_c), f(r.kld)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One edited image with its reference and target distribution.
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub original: &'a RgbImage,
    pub edited: &'a RgbImage,
    pub target: &'a EmotionDistribution,
}

/// Scores in-memory images. FID compares the edited set against the
/// originals. A metric that fails is reported in `errors` and left empty.
pub fn evaluate_items(
    items: &[EvalItem<'_>],
    h: &EvalHandles<'_>,
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid_input("no records to evaluate"));
    }
    let mut errors = BTreeMap::new();

    let fid = (|| -> Result<f64> {
        let mut fa = Vec::with_capacity(items.len());
        let mut fb = Vec::with_capacity(items.len());
        for it in items {
            fa.push(h.features.features(it.original)?);
            fb.push(h.features.features(it.edited)?);
        }
        frechet_distance(&GaussianSummary::from_features(&fa)?, &GaussianSummary::from_features(&fb)?)
    })();
    let fid = fid.map_err(|e| errors.insert("fid".to_string(), e.to_string())).ok();

    let mut records = Vec::with_capacity(items.len());
    let mut sem_err = None;
    let mut kld_err = None;
    for it in items {
        let s = sem_c_item(it.edited, h.objects, h.scenes)
            .map_err(|e| sem_err.get_or_insert(e.to_string()).clone())
            .ok();
        let k = h
            .emotions
            .logits(it.edited)
            .and_then(|l| EmotionDistribution::from_logits(&l))
            .map(|p| kld_score(&p, it.target, cfg.kld_eps, cfg.kl_direction))
            .map_err(|e| kld_err.get_or_insert(e.to_string()).clone())
            .ok();
        records.push(RecordScore {
            id: it.id.to_string(),
            sem_c: s,
            kld: k,
        });
    }
    let mean = |vals: Vec<Option<f64>>| -> Option<f64> {
        let v: Option<Vec<f64>> = vals.into_iter().collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let sem_c = mean(records.iter().map(|r| r.sem_c).collect());
    let mean_kld = mean(records.iter().map(|r| r.kld).collect());
    if let Some(e) = sem_err {
        errors.insert("sem_c".into(), e);
    }
    if let Some(e) = kld_err {
        errors.insert("mean_kld".into(), e);
    }
    Ok(EvalReport {
        fid,
        sem_c,
        mean_kld,
        n: items.len(),
        config_hash: config_hash.to_string(),
        errors,
        records,
    })
}

/// Loads each record's images and scores the batch.
pub fn evaluate_suite(
    records: &[EvalRecord],
    h: &EvalHandles<'_>,
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::invalid_input("no records to evaluate"));
    }
    let mut images = Vec::with_capacity(records.len());
    for r in records {
        images.push((load_png(&r.original)?, load_png(&r.edited)?));
    }
    let items: Vec<EvalItem<'_>> = records
        .iter()
        .zip(&images)
        .map(|(r, (o, e))| EvalItem {
            id: &r.id,
            original: o,
            edited: e,
            target: &r.target,
        })
        .collect();
    evaluate_items(&items, h, cfg, config_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emotion::Emotion;

    #[test]
    fn mean_shift_only() {
        let a = GaussianSummary::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let b = GaussianSummary::new(DVector::from_vec(vec![3.0, 4.0]), DMatrix::identity(2, 2)).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch() {
        let a = GaussianSummary::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let b = GaussianSummary::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianSummary::new(DVector::zeros(2), m).is_err());
    }

    #[test]
    fn uniform_sem_c() {
        let img = RgbImage::new(2, 2);
        let s = sem_c(&[&img], &UniformClassifier(10), &UniformClassifier(4)).unwrap();
        assert!((s - 0.25).abs() < 1e-12);
        assert!(matches!(
            sem_c(&[], &UniformClassifier(10), &UniformClassifier(4)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn kld_examples() {
        let t = EmotionDistribution::one_hot(Emotion::Awe);
        assert!(kld_score(&t, &t, KLD_EPS, KlDirection::default()) <= 1e-6);
        let u = EmotionDistribution::uniform();
        let k = kld_score(&u, &t, KLD_EPS, KlDirection::default());
        assert!((k - 8f64.ln()).abs() < 1e-3);
    }
}
