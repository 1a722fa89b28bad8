use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use affedit_core::dataset::{
    AnnotationRecord, Criterion, KeywordEmotionClassifier, PaletteRetriever, PrototypeEmotionClassifier, RecordStatus,
    RecordStore, SplitConfig, ValidationConfig, ValidationHandles, Verdict, build_eval_split, evaluate_criteria,
    validate_store,
};
use affedit_core::diffusion::{
    AutoencoderTrainConfig, Denoiser, LatentCode, NoiseSchedule, OracleDenoiser, ScheduleConfig, denoise_step,
    forward_noise, gaussian,
};
use affedit_core::editing::{EditHandles, EditRequest, edit, edit_masked, generate};
use affedit_core::emotion::NUM_EMOTIONS;
use affedit_core::evaluation::{GaussianSummary, KLD_EPS, KlDirection, frechet_distance, kld_score};
use affedit_core::image_io::Mask;
use affedit_core::mapper::modulate;
use affedit_core::params::{ParamStore, device};
use affedit_core::spectrum::{
    ColorFeatureClassifier, DISTANCE_EPS, EmotionClassifier, EmotionalRequest, SpectrumSample, SpectrumSource,
    SpectrumTrainConfig, Triplet, TripletBatch, contrastive_loss_tensor, encode_sources, mine_triplets,
    train_spectrum, triplet_accuracy,
};
use affedit_core::pipeline::{
    Backbone, DenoiserTrainConfig, MappedConditioner, MapperModel, MapperSample, MapperTrainConfig, ModelConfig,
    SpectrumModel, build_spectrum, prepare_mapper_batch, train_backbone, train_mapper,
};
use affedit_core::supervision::{
    LossWeights, MapperBatch, MapperTrainer, StubSupervisor, default_prompts, sentiment_alignment_loss,
};
use affedit_core::synthetic::{Mood, dataset_fixture, spectrum_corpus, warm_dark_corpus};
use affedit_core::text::{TextEncoder, TextEncoderConfig, TokenizerConfig};
use affedit_core::{Emotion, EmotionDistribution, Error, PairRelation, WheelGeometry};
use candle_core::{Tensor, Var};
use candle_nn::Linear;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Outcome, gradient_error, max_abs_diff, randn, rng, test_image, tiny_models, values};

pub const GRADIENT_TOLERANCE: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

fn random_distribution(r: &mut impl Rng) -> EmotionDistribution {
    let logits: Vec<f64> = (0..NUM_EMOTIONS).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect();
    EmotionDistribution::from_logits(&logits).unwrap()
}

pub fn contrastive_gradient() -> f64 {
    let mut r = rng(11);
    let requests = Var::from_tensor(&randn(&[4, 3, 2], &mut r)).unwrap();
    let dists = [
        EmotionDistribution::peaked(Emotion::Awe, 0.7),
        EmotionDistribution::peaked(Emotion::Awe, 0.85),
        EmotionDistribution::peaked(Emotion::Disgust, 0.6),
        EmotionDistribution::peaked(Emotion::Disgust, 0.9),
    ];
    let triplets = TripletBatch::new(vec![
        Triplet { anchor: 0, positive: 1, negative: 2 },
        Triplet { anchor: 2, positive: 3, negative: 0 },
        Triplet { anchor: 3, positive: 2, negative: 1 },
    ])
    .unwrap();
    let f = || contrastive_loss_tensor(requests.as_tensor(), &dists, &triplets, 50.0, DISTANCE_EPS).unwrap();
    gradient_error(&[requests.clone()], &f, FD_STEP)
}

pub fn modulate_gradient() -> f64 {
    let mut r = rng(12);
    let f_r = Var::from_tensor(&randn(&[2, 3, 4], &mut r)).unwrap();
    let f_k = Var::from_tensor(&randn(&[2, 4], &mut r)).unwrap();
    let w1 = Var::from_tensor(&(randn(&[4, 4], &mut r) * 0.3).unwrap()).unwrap();
    let b1 = Var::from_tensor(&randn(&[4], &mut r)).unwrap();
    let w2 = Var::from_tensor(&randn(&[4, 4], &mut r)).unwrap();
    let b2 = Var::from_tensor(&randn(&[4], &mut r)).unwrap();
    let weight = randn(&[2, 3, 4], &mut r);
    let f = || {
        let l1 = Linear::new(w1.as_tensor().clone(), Some(b1.as_tensor().clone()));
        let l2 = Linear::new(w2.as_tensor().clone(), Some(b2.as_tensor().clone()));
        let out = modulate(f_r.as_tensor(), f_k.as_tensor(), &l1, &l2, 1e-5).unwrap();
        (out * &weight).unwrap().sum_all().unwrap()
    };
    gradient_error(&[f_r.clone(), f_k.clone(), w1.clone(), b1.clone(), w2.clone(), b2.clone()], &f, FD_STEP)
}

pub fn alignment_gradient() -> f64 {
    let mut r = rng(13);
    let mapped = Var::from_tensor(&randn(&[3, 4], &mut r)).unwrap();
    let responses = randn(&[2, 3, 4], &mut r);
    let plain = || sentiment_alignment_loss(mapped.as_tensor(), &responses, false).unwrap();
    let squared = || sentiment_alignment_loss(mapped.as_tensor(), &responses, true).unwrap();
    gradient_error(&[mapped.clone()], &plain, FD_STEP).max(gradient_error(&[mapped.clone()], &squared, FD_STEP))
}

pub fn tiny_mapper_batch(seed: u64, batch: usize) -> MapperBatch {
    let mut r = rng(seed);
    MapperBatch {
        requests: randn(&[batch, 3, 4], &mut r),
        semantics: randn(&[batch, 3, 4], &mut r),
        responses: randn(&[batch, 2, 3, 4], &mut r),
        latents: randn(&[batch, 2, 4, 4], &mut r),
    }
}

/// `L_sa + beta L_dm` through a tiny mapper and denoiser, differentiated
/// with respect to every mapper parameter.
pub fn total_loss_gradient() -> f64 {
    let m = tiny_models(21);
    let batch = tiny_mapper_batch(22, 2);
    let frozen = [&m.backbone];
    let f = || {
        let mut trainer = MapperTrainer::new(
            &m.mapper,
            &m.mapper_store,
            &frozen,
            &m.denoiser,
            &m.schedule,
            LossWeights::default(),
            1e-3,
            5,
        )
        .unwrap();
        trainer.losses(&batch).unwrap().2
    };
    gradient_error(&m.mapper_store.vars(), &f, FD_STEP)
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let errs = [
        ("contrastive", contrastive_gradient()),
        ("modulate", modulate_gradient()),
        ("alignment", alignment_gradient()),
        ("total", total_loss_gradient()),
    ];
    let secs = start.elapsed().as_secs_f64();
    let passed = errs.iter().all(|(_, e)| *e <= GRADIENT_TOLERANCE) && secs < 120.0;
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ");
    Outcome::new("gradient suite", passed, format!("{detail}; {secs:.1}s (tol {GRADIENT_TOLERANCE:e}, < 120s)"))
}

fn random_request(r: &mut impl Rng) -> EmotionalRequest {
    EmotionalRequest::new(randn(&[3, 2], r), 3, 2).unwrap()
}

/// Exhaustive search: for each anchor scan every (positive, negative) pair
/// and keep the one with the largest `d(a, p) - d(a, n)`.
pub fn exhaustive_triplets(batch: &[SpectrumSample], wheel: &WheelGeometry) -> Vec<Triplet> {
    let n = batch.len();
    let d = |i: usize, j: usize| {
        let a = values(batch[i].request.embedding());
        let b = values(batch[j].request.embedding());
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = batch[i]
            .distribution
            .probs()
            .iter()
            .zip(batch[j].distribution.probs())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        num / den.max(DISTANCE_EPS)
    };
    let rel = |i: usize, j: usize| {
        let (a, b) = (batch[i].distribution.argmax(), batch[j].distribution.argmax());
        if wheel.region(a) == wheel.region(b) {
            PairRelation::Positive
        } else if wheel.opposite(a) == Some(b) {
            PairRelation::Negative
        } else {
            PairRelation::Neutral
        }
    };
    let mut out = Vec::new();
    for a in 0..n {
        let mut best: Option<(f64, Triplet)> = None;
        for p in (0..n).filter(|&p| p != a && rel(a, p) == PairRelation::Positive) {
            for q in (0..n).filter(|&q| q != a && rel(a, q) == PairRelation::Negative) {
                let gap = d(a, p) - d(a, q);
                if best.is_none_or(|(g, _)| gap > g) {
                    best = Some((gap, Triplet { anchor: a, positive: p, negative: q }));
                }
            }
        }
        if let Some((_, t)) = best {
            out.push(t);
        }
    }
    out
}

pub fn mining_oracle(trials: usize) -> (usize, usize) {
    let wheel = WheelGeometry::default();
    let mut r = rng(31);
    let mut agree = 0;
    for trial in 0..trials {
        let n = 2 + trial % 15;
        let batch: Vec<SpectrumSample> = (0..n)
            .map(|i| SpectrumSample {
                id: format!("s{i}"),
                request: random_request(&mut r),
                distribution: random_distribution(&mut r),
            })
            .collect();
        let oracle = exhaustive_triplets(&batch, &wheel);
        let ok = match mine_triplets(&batch, &wheel) {
            Ok(t) => t.triplets() == oracle.as_slice(),
            Err(Error::EmptyBatch(_)) => oracle.is_empty(),
            Err(_) => false,
        };
        agree += ok as usize;
    }
    (agree, trials)
}

fn random_psd(dim: usize, r: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim + 2, |_, _| r.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / (dim + 2) as f64
}

/// `tr((S_a S_b)^(1/2))` from the eigenvalues of the non-symmetric product.
pub fn frechet_oracle(mu_a: &DVector<f64>, s_a: &DMatrix<f64>, mu_b: &DVector<f64>, s_b: &DMatrix<f64>) -> f64 {
    let eig = (s_a * s_b).complex_eigenvalues();
    let cross: f64 = eig.iter().map(|c| c.re.max(0.0).sqrt()).sum();
    (mu_a - mu_b).norm_squared() + s_a.trace() + s_b.trace() - 2.0 * cross
}

pub fn frechet_oracle_error(trials: usize) -> f64 {
    let mut r = rng(32);
    let mut worst: f64 = 0.0;
    for k in 0..trials {
        let dim = 1 + k % 6;
        let mu_a = DVector::from_fn(dim, |_, _| r.sample::<f64, _>(StandardNormal));
        let mu_b = DVector::from_fn(dim, |_, _| r.sample::<f64, _>(StandardNormal));
        let (s_a, s_b) = (random_psd(dim, &mut r), random_psd(dim, &mut r));
        let got = frechet_distance(
            &GaussianSummary::new(mu_a.clone(), s_a.clone()).unwrap(),
            &GaussianSummary::new(mu_b.clone(), s_b.clone()).unwrap(),
        )
        .unwrap();
        worst = worst.max((got - frechet_oracle(&mu_a, &s_a, &mu_b, &s_b)).abs());
    }
    worst
}

pub fn kld_oracle(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let z = 1.0 + p.len() as f64 * eps;
    let mut total = 0.0;
    for i in 0..p.len() {
        let a = (p[i] + eps) / z;
        let b = (q[i] + eps) / z;
        total += a * (a.ln() - b.ln());
    }
    total
}

pub fn kld_oracle_error(trials: usize) -> f64 {
    let mut r = rng(33);
    let mut worst: f64 = 0.0;
    for k in 0..trials {
        let pred = if k % 5 == 0 { EmotionDistribution::one_hot(Emotion::ALL[k % 8]) } else { random_distribution(&mut r) };
        let target = random_distribution(&mut r);
        for eps in [1e-8, 1e-4] {
            let a = kld_score(&pred, &target, eps, KlDirection::TargetToPredicted);
            let b = kld_score(&pred, &target, eps, KlDirection::PredictedToTarget);
            worst = worst
                .max((a - kld_oracle(target.probs(), pred.probs(), eps)).abs())
                .max((b - kld_oracle(pred.probs(), target.probs(), eps)).abs());
        }
    }
    worst
}

/// `(z_t - eps_hat (1 - alpha_t) / sqrt(1 - alpha_bar_t)) / sqrt(alpha_t) + sigma_t noise`
/// evaluated element by element.
pub fn denoise_formula(z_t: &[f64], eps_hat: &[f64], t: usize, s: &NoiseSchedule, noise: Option<&[f64]>) -> Vec<f64> {
    let (a, ab, sigma) = (s.alpha(t), s.alpha_bar(t), s.sigma(t));
    (0..z_t.len())
        .map(|i| {
            let mean = (z_t[i] - eps_hat[i] * (1.0 - a) / (1.0 - ab).sqrt()) / a.sqrt();
            mean + noise.map_or(0.0, |n| sigma * n[i])
        })
        .collect()
}

pub fn denoise_oracle_error(trials: usize) -> f64 {
    let mut r = rng(34);
    let cond = Tensor::zeros((3, 4), affedit_core::params::DTYPE, &device()).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..trials {
        let eta = [0.0, 0.5, 1.0][k % 3];
        let s = NoiseSchedule::build(&ScheduleConfig { eta, ..Default::default() }).unwrap();
        let t = 1 + k % s.steps();
        let z = randn(&[2, 4, 4], &mut r);
        let eps_hat = randn(&[2, 4, 4], &mut r);
        let seed = r.random::<u64>();
        let mut step_rng = ChaCha8Rng::seed_from_u64(seed);
        let got = denoise_step(&LatentCode::new(z.clone()).unwrap(), t, &cond, &OracleDenoiser(eps_hat.clone()), &s, &mut step_rng)
            .unwrap();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..32).map(|_| noise_rng.sample(StandardNormal)).collect();
        let want = denoise_formula(&values(&z), &values(&eps_hat), t, &s, (s.sigma(t) > 0.0).then_some(&noise[..]));
        let err = values(got.tensor()).iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    worst
}

fn validated(id: usize) -> AnnotationRecord {
    let mut r = AnnotationRecord::annotated(format!("r{id:03}"), format!("r{id:03}.png"), format!("text {id}"));
    r.status = RecordStatus::Validated;
    r.distribution = Some(EmotionDistribution::peaked(Emotion::ALL[id % 8], 0.7));
    r
}

/// Compares split targets with a plain double loop over all pairs.
pub fn split_oracle(trials: usize) -> (usize, usize) {
    let mut r = rng(35);
    let mut agree = 0;
    for k in 0..trials {
        let n = 2 + k * 3 % 40;
        let dim = 1 + k % 5;
        let records: Vec<_> = (0..n).map(validated).collect();
        let emb: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.sample(StandardNormal)).collect()).collect();
        let split = build_eval_split(&records, &emb, &SplitConfig { n, ..Default::default() }).unwrap();
        let oracle: Vec<String> = (0..n)
            .map(|i| {
                let mut best = (f64::INFINITY, 0);
                for j in 0..n {
                    let d: f64 = emb[i].iter().zip(&emb[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    if j != i && d < best.0 {
                        best = (d, j);
                    }
                }
                records[best.1].id.clone()
            })
            .collect();
        let got: Vec<String> = split.samples.iter().map(|s| s.target_id.clone()).collect();
        agree += (got == oracle) as usize;
    }
    (agree, trials)
}

pub fn oracle_suite() -> Outcome {
    let start = Instant::now();
    let (mine_ok, mine_n) = mining_oracle(60);
    let fid = frechet_oracle_error(40);
    let kld = kld_oracle_error(200);
    let den = denoise_oracle_error(90);
    let (split_ok, split_n) = split_oracle(20);
    let secs = start.elapsed().as_secs_f64();
    let passed =
        mine_ok == mine_n && fid <= 1e-6 && kld <= 1e-9 && den <= 1e-6 && split_ok == split_n && secs < 60.0;
    Outcome::new(
        "oracle equivalence",
        passed,
        format!(
            "mining {mine_ok}/{mine_n}, frechet {fid:.1e}, kld {kld:.1e}, denoise {den:.1e}, split {split_ok}/{split_n}; {secs:.1}s"
        ),
    )
}

/// Predicts exactly the noise separating `z_t` from the known clean latent.
pub struct CleanLatentOracle<'a> {
    pub clean: Tensor,
    pub schedule: &'a NoiseSchedule,
}

impl Denoiser for CleanLatentOracle<'_> {
    fn predict_noise(&self, latents: &Tensor, steps: &[usize], _condition: &Tensor) -> affedit_core::Result<Tensor> {
        let ab = self.schedule.alpha_bar(steps[0]);
        let clean = self.clean.unsqueeze(0)?.broadcast_as(latents.shape())?;
        Ok(((latents - (clean * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    }
}

pub fn round_trip_error(max_t: usize) -> f64 {
    let schedule = NoiseSchedule::build(&ScheduleConfig::default()).unwrap();
    let cond = Tensor::zeros((3, 4), affedit_core::params::DTYPE, &device()).unwrap();
    let mut r = rng(41);
    let mut worst: f64 = 0.0;
    for t in 1..=max_t {
        let z = randn(&[4, 8, 8], &mut r);
        let eps = randn(&[4, 8, 8], &mut r);
        let oracle = CleanLatentOracle { clean: z.clone(), schedule: &schedule };
        let mut cur = forward_noise(&LatentCode::new(z.clone()).unwrap(), t, &eps, &schedule).unwrap();
        for s in (1..=t).rev() {
            cur = denoise_step(&cur, s, &cond, &oracle, &schedule, &mut r).unwrap();
        }
        worst = worst.max(max_abs_diff(cur.tensor(), &z));
    }
    worst
}

/// Relative error of the pooled per-element variance of `z_t` against
/// `1 - alpha_bar_t`, and of its mean against `sqrt(alpha_bar_t) z`.
pub fn forward_noise_moments(draws: usize) -> (f64, f64) {
    let schedule = NoiseSchedule::build(&ScheduleConfig::default()).unwrap();
    let mut r = rng(42);
    let z = randn(&[4, 4, 4], &mut r);
    let zv = values(&z);
    let code = LatentCode::new(z).unwrap();
    let (mut worst_var, mut worst_mean): (f64, f64) = (0.0, 0.0);
    for t in [1, 5, 10, 25, 50] {
        let mut sum = vec![0.0; zv.len()];
        let mut sum2 = vec![0.0; zv.len()];
        for _ in 0..draws {
            let eps = gaussian((4, 4, 4), &mut r).unwrap();
            let x = values(forward_noise(&code, t, &eps, &schedule).unwrap().tensor());
            for i in 0..x.len() {
                sum[i] += x[i];
                sum2[i] += x[i] * x[i];
            }
        }
        let n = draws as f64;
        let want = 1.0 - schedule.alpha_bar(t);
        let mut var = 0.0;
        let mut mean_err: f64 = 0.0;
        for i in 0..zv.len() {
            let m = sum[i] / n;
            var += (sum2[i] - n * m * m) / (n - 1.0);
            mean_err = mean_err.max((m - schedule.alpha_bar(t).sqrt() * zv[i]).abs() / want.sqrt());
        }
        var /= zv.len() as f64;
        worst_var = worst_var.max((var - want).abs() / want);
        worst_mean = worst_mean.max(mean_err);
    }
    (worst_var, worst_mean)
}

pub fn diffusion_suite() -> Outcome {
    let rt = round_trip_error(10);
    let (var, mean) = forward_noise_moments(1000);
    Outcome::new(
        "diffusion consistency",
        rt <= 1e-3 && var <= 0.05,
        format!("round trip max-abs {rt:.1e} (tol 1e-3), variance rel err {var:.3} (tol 0.05), mean err {mean:.3} sd"),
    )
}

pub struct EditFixture {
    pub models: super::TinyModels,
    pub condition: Tensor,
}

impl EditFixture {
    pub fn new() -> Self {
        let mut r = rng(51);
        Self {
            models: tiny_models(50),
            condition: randn(&[3, 4], &mut r),
        }
    }

    pub fn run<T>(&self, f: impl FnOnce(&EditHandles<'_>) -> T) -> T {
        let cond = self.condition.clone();
        let conditioner = move |_: &str| -> affedit_core::Result<Tensor> { Ok(cond.clone()) };
        let h = EditHandles {
            autoencoder: &self.models.autoencoder,
            denoiser: &self.models.denoiser,
            schedule: &self.models.schedule,
            conditioner: &conditioner,
        };
        f(&h)
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    values(t).iter().map(|v| v.to_bits()).collect()
}

pub fn edit_zero_is_round_trip(fx: &EditFixture) -> bool {
    fx.run(|h| {
        let img = test_image(16, 3);
        let out = edit(&EditRequest::new(img.clone(), "calm", 0, 9), h).unwrap();
        let z = h.autoencoder.encode_image(&img).unwrap();
        let round = h.autoencoder.decode_to_image(&z).unwrap();
        out.image == round && bits(out.latent.tensor()) == bits(z.tensor()) && out.trace.steps.is_empty()
    })
}

pub fn full_mask_matches_edit(fx: &EditFixture) -> bool {
    fx.run(|h| {
        [1, 20, 37, 50].iter().all(|&t| {
            let req = EditRequest::new(test_image(16, 4), "calm", t, 77);
            let plain = edit(&req, h).unwrap();
            let masked = edit_masked(&req.clone().with_mask(Mask::filled(16, 16, true)), h).unwrap();
            plain.image == masked.image
                && bits(plain.latent.tensor()) == bits(masked.latent.tensor())
                && plain.trace.steps.iter().zip(&masked.trace.steps).all(|(a, b)| bits(&a.latent) == bits(&b.latent))
        })
    })
}

/// Every trace step must hold `forward_noise(z0, s, eps0)` exactly in the
/// frozen columns of the latent.
pub fn unmasked_region_follows_noised_input(fx: &EditFixture) -> bool {
    fx.run(|h| {
        let img = test_image(16, 5);
        let z0 = h.autoencoder.encode_image(&img).unwrap();
        let req = EditRequest::new(img, "calm", 30, 13).with_mask(Mask::left_part(16, 16, 8));
        let out = edit_masked(&req, h).unwrap();
        let (c, lh, lw) = z0.dims();
        let eps0 = &out.trace.initial_noise;
        let start = forward_noise(&z0, 30, eps0, h.schedule).unwrap();
        if bits(start.tensor()) != bits(&out.trace.start) || out.trace.steps.len() != 30 {
            return false;
        }
        out.trace.steps.iter().all(|st| {
            let want = values(forward_noise(&z0, st.t, eps0, h.schedule).unwrap().tensor());
            let got = values(&st.latent);
            (0..c).all(|ch| {
                (0..lh).all(|y| {
                    (lw / 2..lw).all(|x| {
                        let i = (ch * lh + y) * lw + x;
                        got[i].to_bits() == want[i].to_bits()
                    })
                })
            })
        })
    })
}

pub fn empty_mask_returns_input(fx: &EditFixture) -> bool {
    fx.run(|h| {
        let img = test_image(16, 6);
        let z0 = h.autoencoder.encode_image(&img).unwrap();
        let out = edit_masked(&EditRequest::new(img, "calm", 25, 1).with_mask(Mask::filled(16, 16, false)), h).unwrap();
        bits(out.latent.tensor()) == bits(z0.tensor())
    })
}

/// Mean over seeds of `||z_t - z||` at the start of the reverse chain.
pub fn deviation_by_step(fx: &EditFixture, steps: &[usize], seeds: u64) -> Vec<f64> {
    fx.run(|h| {
        let img = test_image(16, 7);
        let z0 = h.autoencoder.encode_image(&img).unwrap();
        steps
            .iter()
            .map(|&t| {
                let mut total = 0.0;
                for seed in 0..seeds {
                    let out = edit(&EditRequest::new(img.clone(), "calm", t, seed), h).unwrap();
                    let d: f64 = values(&out.trace.start)
                        .iter()
                        .zip(values(z0.tensor()))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    total += d;
                }
                total / seeds as f64
            })
            .collect()
    })
}

pub fn editing_suite() -> Outcome {
    let fx = EditFixture::new();
    let zero = edit_zero_is_round_trip(&fx);
    let ones = full_mask_matches_edit(&fx);
    let frozen = unmasked_region_follows_noised_input(&fx);
    let empty = empty_mask_returns_input(&fx);
    let dev = deviation_by_step(&fx, &[5, 15, 25, 35, 45], 16);
    let monotone = dev.windows(2).all(|w| w[0] < w[1]);
    Outcome::new(
        "editing contracts",
        zero && ones && frozen && empty && monotone,
        format!(
            "t=0 round trip {zero}, all-ones mask {ones}, frozen region trace {frozen}, empty mask {empty}, \
             deviation {:?} monotone {monotone}",
            dev.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>()
        ),
    )
}

pub const SPECTRUM_CLUSTERS: [Emotion; 3] = [Emotion::Awe, Emotion::Disgust, Emotion::Fear];

pub fn spectrum_encoder(seed: u64) -> (ParamStore, TextEncoder) {
    let mut store = ParamStore::new(seed, true);
    let cfg = TextEncoderConfig {
        tokenizer: TokenizerConfig { vocab_size: 256, max_tokens: 8 },
        channels: 8,
        heads: 2,
        layers: 1,
        ffn_mult: 2,
    };
    let enc = TextEncoder::new(&mut store.root().sub("encoder"), cfg).unwrap();
    (store, enc)
}

pub struct SpectrumRun {
    pub accuracy_before: f64,
    pub accuracy: f64,
    pub awe_disgust_negative: bool,
    pub seconds: f64,
}

/// Trains on four fifths of a 200-per-cluster corpus and scores all
/// wheel-valid triplets of the held-out fifth.
pub fn spectrum_run(steps: usize) -> SpectrumRun {
    let wheel = WheelGeometry::default();
    let corpus = spectrum_corpus(&SPECTRUM_CLUSTERS, 200, 61);
    let (train, held): (Vec<_>, Vec<_>) = corpus.into_iter().enumerate().partition(|(i, _)| i % 5 != 0);
    let train: Vec<_> = train.into_iter().map(|(_, s)| s).collect();
    let held: Vec<_> = held.into_iter().map(|(_, s)| s).collect();
    let (store, enc) = spectrum_encoder(62);
    let texts: Vec<&str> = held.iter().map(|s| s.text.as_str()).collect();
    let dists: Vec<_> = held.iter().map(|s| s.distribution).collect();
    let accuracy_before = triplet_accuracy(&encode_sources(&enc, &texts).unwrap(), &dists, &wheel).unwrap();
    let start = Instant::now();
    let cfg = SpectrumTrainConfig {
        steps,
        batch_size: 48,
        learning_rate: 1e-2,
        linear_decay: true,
        seed: 63,
        ..Default::default()
    };
    train_spectrum(&train, &enc, &store, &wheel, &cfg).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let accuracy = triplet_accuracy(&encode_sources(&enc, &texts).unwrap(), &dists, &wheel).unwrap();
    let awe: Vec<_> = held.iter().filter(|s| s.distribution.argmax() == Emotion::Awe).collect();
    let disgust: Vec<_> = held.iter().filter(|s| s.distribution.argmax() == Emotion::Disgust).collect();
    let awe_disgust_negative = !awe.is_empty()
        && awe.iter().all(|a| {
            disgust.iter().all(|d| {
                affedit_core::emotion::pair_relation(&a.distribution, &d.distribution, &wheel) == PairRelation::Negative
            })
        });
    SpectrumRun { accuracy_before, accuracy, awe_disgust_negative, seconds }
}

pub fn spectrum_suite() -> Outcome {
    let run = spectrum_run(6000);
    Outcome::new(
        "spectrum learning",
        run.accuracy >= 0.95 && run.awe_disgust_negative && run.seconds <= 300.0,
        format!(
            "held-out triplet accuracy {:.3} (from {:.3}, need >= 0.95), awe/disgust negative {}, {:.0}s of training",
            run.accuracy, run.accuracy_before, run.awe_disgust_negative, run.seconds
        ),
    )
}

pub struct DatasetRun {
    /// Per criterion: records its validator rejected, evaluated independently.
    pub rejected_by: BTreeMap<Criterion, BTreeSet<String>>,
    pub planted: BTreeMap<Criterion, BTreeSet<String>>,
    pub final_status: BTreeMap<String, RecordStatus>,
    pub second_pass_writes: usize,
    pub unchanged_on_rerun: bool,
}

pub fn dataset_run(seed: u64) -> DatasetRun {
    let fx = dataset_fixture(seed);
    let text_clf = KeywordEmotionClassifier::default();
    let image_clf = PrototypeEmotionClassifier::default();
    let retriever = PaletteRetriever;
    let wheel = WheelGeometry::default();
    let h = ValidationHandles {
        lexicon: &fx.lexicon,
        text_classifier: &text_clf,
        image_classifier: &image_clf,
        retriever: &retriever,
        wheel: &wheel,
    };
    let cfg = ValidationConfig::default();
    let mut rejected_by: BTreeMap<Criterion, BTreeSet<String>> = BTreeMap::new();
    for r in &fx.records {
        let (report, _) = evaluate_criteria(r, &fx.images[&r.id], &fx.pool, &h, &cfg).unwrap();
        for (c, v) in [(Criterion::Keyword, report.keyword), (Criterion::Emotion, report.emotion), (Criterion::Retrieval, report.retrieval)] {
            if v != Verdict::Pass {
                rejected_by.entry(c).or_default().insert(r.id.clone());
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let store = RecordStore::open(&path).unwrap();
    for r in &fx.records {
        store.put(r).unwrap();
    }
    validate_store(&store, &fx.images, &fx.pool, &h, &cfg).unwrap();
    let snapshot = store.records();
    let log_before = std::fs::read_to_string(&path).unwrap();
    let second = validate_store(&store, &fx.images, &fx.pool, &h, &cfg).unwrap();
    let reopened = RecordStore::open(&path).unwrap();
    let unchanged_on_rerun = reopened.records() == snapshot && std::fs::read_to_string(&path).unwrap() == log_before;
    DatasetRun {
        rejected_by,
        planted: fx.planted,
        final_status: snapshot.into_iter().map(|r| (r.id, r.status)).collect(),
        second_pass_writes: second.writes,
        unchanged_on_rerun,
    }
}

pub fn precision_recall(got: &BTreeSet<String>, want: &BTreeSet<String>) -> (f64, f64) {
    let tp = got.intersection(want).count() as f64;
    let precision = if got.is_empty() { 1.0 } else { tp / got.len() as f64 };
    let recall = if want.is_empty() { 1.0 } else { tp / want.len() as f64 };
    (precision, recall)
}

pub fn dataset_suite() -> Outcome {
    let run = dataset_run(71);
    let mut parts = Vec::new();
    let mut passed = run.second_pass_writes == 0 && run.unchanged_on_rerun;
    for c in [Criterion::Keyword, Criterion::Emotion, Criterion::Retrieval] {
        let empty = BTreeSet::new();
        let (p, r) = precision_recall(run.rejected_by.get(&c).unwrap_or(&empty), &run.planted[&c]);
        let status_ok = run.planted[&c]
            .iter()
            .all(|id| run.final_status[id] == RecordStatus::Rejected { criterion: c });
        passed &= p == 1.0 && r == 1.0 && status_ok;
        parts.push(format!("{c:?} precision {p:.2} recall {r:.2}"));
    }
    Outcome::new(
        "dataset pipeline",
        passed,
        format!("{}; rerun writes {}, unchanged {}", parts.join(", "), run.second_pass_writes, run.unchanged_on_rerun),
    )
}

/// Checksums of the backbone store before and after `steps` mapper updates,
/// and whether the mapper itself moved.
pub fn frozen_run(steps: usize) -> (String, String, bool) {
    let m = tiny_models(81);
    let batch = tiny_mapper_batch(82, 4);
    let before = m.backbone.checksum().unwrap();
    let mapper_before = m.mapper_store.checksum().unwrap();
    let frozen = [&m.backbone];
    let mut trainer = MapperTrainer::new(
        &m.mapper,
        &m.mapper_store,
        &frozen,
        &m.denoiser,
        &m.schedule,
        LossWeights::default(),
        1e-3,
        83,
    )
    .unwrap();
    for _ in 0..steps {
        trainer.train_step(&batch).unwrap();
    }
    (before, m.backbone.checksum().unwrap(), m.mapper_store.checksum().unwrap() != mapper_before)
}

pub fn frozen_suite() -> Outcome {
    let (before, after, moved) = frozen_run(100);
    Outcome::new(
        "frozen backbone",
        before == after && moved,
        format!("backbone checksum {}.. -> {}.. over 100 steps, mapper updated {moved}", &before[..12], &after[..12]),
    )
}

/// Mean red minus mean blue on the [0, 1] scale.
pub fn warm_statistic(image: &image::RgbImage) -> f64 {
    let n = (image.width() * image.height()) as f64;
    let (mut r, mut b) = (0.0, 0.0);
    for p in image.pixels() {
        r += p.0[0] as f64;
        b += p.0[2] as f64;
    }
    (r - b) / (255.0 * n)
}

pub struct EndToEndSizes {
    pub corpus: usize,
    pub autoencoder_steps: usize,
    pub denoiser_steps: usize,
    pub spectrum_steps: usize,
    pub mapper_steps: usize,
    pub trials: u64,
}

pub const END_TO_END_SIZES: EndToEndSizes = EndToEndSizes {
    corpus: 600,
    autoencoder_steps: 300,
    denoiser_steps: 1500,
    spectrum_steps: 200,
    mapper_steps: 300,
    trials: 50,
};

pub struct EndToEndRun {
    pub wins: usize,
    pub trials: usize,
    /// Mean KLD of warm-conditioned outputs against the warm and the dark
    /// target distributions.
    pub kld_to_warm: f64,
    pub kld_to_dark: f64,
    pub seconds: f64,
}

/// Trains backbone, spectrum and mapper on the warm/dark corpus, then
/// generates from both mood prompts under shared seeds.
pub fn end_to_end_run(sizes: &EndToEndSizes) -> EndToEndRun {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let corpus = warm_dark_corpus(sizes.corpus, cfg.autoencoder.image_size as u32, 1);
    let schedule = NoiseSchedule::build(&cfg.schedule).unwrap();
    let images: Vec<_> = corpus.iter().map(|s| &s.image).collect();
    let captions: Vec<_> = corpus.iter().map(|s| s.caption.as_str()).collect();

    let backbone = Backbone::new(&cfg, 7, true).unwrap();
    train_backbone(
        &backbone,
        &images,
        &captions,
        &AutoencoderTrainConfig { steps: sizes.autoencoder_steps, batch_size: 32, learning_rate: 2e-3, seed: 1 },
        &DenoiserTrainConfig { steps: sizes.denoiser_steps, batch_size: 32, learning_rate: 1e-3, seed: 2 },
        &schedule,
    )
    .unwrap();
    let spectrum = SpectrumModel::new(&cfg, 8, true).unwrap();
    let sources: Vec<SpectrumSource> = corpus
        .iter()
        .map(|s| SpectrumSource { id: s.id.clone(), text: s.caption.clone(), distribution: s.distribution.clone() })
        .collect();
    let spectrum_cfg =
        SpectrumTrainConfig { steps: sizes.spectrum_steps, learning_rate: 1e-3, ..Default::default() };
    build_spectrum(&spectrum, &sources, &WheelGeometry::default(), &spectrum_cfg).unwrap();

    let frozen_backbone = Backbone::new(&cfg, 7, false).unwrap();
    frozen_backbone.store.copy_from(&backbone.store).unwrap();
    let frozen_spectrum = SpectrumModel::new(&cfg, 8, false).unwrap();
    frozen_spectrum.store.copy_from(&spectrum.store).unwrap();
    let samples: Vec<MapperSample<'_>> =
        corpus.iter().map(|s| MapperSample { image: &s.image, text: &s.caption }).collect();
    let (batch, _) = prepare_mapper_batch(
        &samples,
        &frozen_backbone,
        &frozen_spectrum.encoder,
        &default_prompts(),
        &StubSupervisor::default(),
        None,
    )
    .unwrap();
    let mapper = MapperModel::new(&cfg, 9, true).unwrap();
    let mapper_cfg = MapperTrainConfig { steps: sizes.mapper_steps, learning_rate: 1e-3, ..Default::default() };
    train_mapper(&mapper, &frozen_backbone, &frozen_spectrum, &schedule, &batch, &mapper_cfg).unwrap();
    let frozen_mapper = MapperModel::new(&cfg, 9, false).unwrap();
    frozen_mapper.store.copy_from(&mapper.store).unwrap();

    let classifier = ColorFeatureClassifier::fit(
        &images,
        &corpus.iter().map(|s| s.distribution.clone()).collect::<Vec<_>>(),
        500,
        0.5,
    )
    .unwrap();
    let cond = MappedConditioner {
        spectrum: &frozen_spectrum.encoder,
        semantic: &frozen_backbone.semantic,
        mapper: &frozen_mapper.mapper,
    };
    let h = EditHandles {
        autoencoder: &frozen_backbone.autoencoder,
        denoiser: &frozen_backbone.denoiser,
        schedule: &schedule,
        conditioner: &cond,
    };
    let warm_target = EmotionDistribution::peaked(Mood::Warm.emotion(), 0.75);
    let dark_target = EmotionDistribution::peaked(Mood::Dark.emotion(), 0.75);
    let (mut wins, mut to_warm, mut to_dark) = (0, 0.0, 0.0);
    for k in 0..sizes.trials {
        let warm = generate(Mood::Warm.prompt(), 1000 + k, schedule.steps(), &h).unwrap().image;
        let dark = generate(Mood::Dark.prompt(), 1000 + k, schedule.steps(), &h).unwrap().image;
        wins += (warm_statistic(&warm) > warm_statistic(&dark)) as usize;
        let p = EmotionDistribution::from_logits(&classifier.logits(&warm).unwrap()).unwrap();
        to_warm += kld_score(&p, &warm_target, KLD_EPS, KlDirection::default());
        to_dark += kld_score(&p, &dark_target, KLD_EPS, KlDirection::default());
    }
    let n = sizes.trials as f64;
    EndToEndRun {
        wins,
        trials: sizes.trials as usize,
        kld_to_warm: to_warm / n,
        kld_to_dark: to_dark / n,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn end_to_end_suite() -> Outcome {
    let run = end_to_end_run(&END_TO_END_SIZES);
    let rate = run.wins as f64 / run.trials as f64;
    Outcome::new(
        "end-to-end toy conditioning",
        rate >= 0.9 && run.kld_to_warm < run.kld_to_dark,
        format!(
            "warm wins {}/{} ({:.0}%), mean KLD to warm {:.3} vs dark {:.3}, {:.0}s",
            run.wins,
            run.trials,
            100.0 * rate,
            run.kld_to_warm,
            run.kld_to_dark,
            run.seconds
        ),
    )
}
