use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use affedit_core::dataset::{
    AnnotationRecord, CotTemplates, KeywordEmotionClassifier, LexiconScale, PaletteRetriever, PolarityLexicon,
    PrototypeEmotionClassifier, RecordStatus, RecordStore, ValidationHandles, annotate_store, build_eval_split,
    validate_store,
};
use affedit_core::editing::{EditRequest, edit, edit_masked, generate};
use affedit_core::evaluation::{EvalHandles, EvalRecord, LatentFeatures, PaletteClassifier, evaluate_suite};
use affedit_core::image_io::{load_mask, load_png, save_png};
use affedit_core::params::ParamStore;
use affedit_core::pipeline::{
    BACKBONE_KIND, Backbone, MAPPER_KIND, MapperModel, MapperSample, ModelConfig, Pipeline, SPECTRUM_KIND,
    SpectrumModel, build_spectrum, load_latest, prepare_mapper_batch, save_checkpoint, train_backbone, train_mapper,
};
use affedit_core::spectrum::{SpectrumSource, color_features};
use affedit_core::supervision::{
    HttpChatClient, MllmClient, ResponseCache, StubSupervisor, default_prompts, write_loss_log,
};
use affedit_core::synthetic::{dataset_fixture, warm_dark_corpus};
use affedit_core::{EmotionDistribution, WheelGeometry};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::{Failure, missing_checkpoint};
use crate::{Command, ConfigCmd, DatasetCmd, SynthCmd};

/// One line of the training corpus; `image` is relative to the image
/// directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub image: PathBuf,
    pub caption: String,
    pub distribution: EmotionDistribution,
}

type Outcome = Result<(), Failure>;

pub fn dispatch(command: Command, cfg: &RunConfig, hash: &str) -> Outcome {
    match command {
        Command::Init => init(cfg),
        Command::Synth(SynthCmd::Corpus { n }) => synth_corpus(cfg, n),
        Command::Synth(SynthCmd::Fixture) => synth_fixture(cfg),
        Command::TrainBackbone => cmd_train_backbone(cfg),
        Command::BuildSpectrum => cmd_build_spectrum(cfg),
        Command::TrainMapper => cmd_train_mapper(cfg),
        Command::Edit { image, text, mask, out, .. } => cmd_edit(cfg, &image, &text, mask.as_deref(), &out),
        Command::Generate { text, out } => cmd_generate(cfg, &text, &out),
        Command::Evaluate { manifest, out, csv } => cmd_evaluate(cfg, hash, &manifest, out.as_deref(), csv.as_deref()),
        Command::Dataset(DatasetCmd::Add) => dataset_add(cfg),
        Command::Dataset(DatasetCmd::Annotate) => dataset_annotate(cfg),
        Command::Dataset(DatasetCmd::Validate) => dataset_validate(cfg),
        Command::Dataset(DatasetCmd::Split { out }) => dataset_split(cfg, &out),
        Command::Schedule { out } => schedule(cfg, out.as_deref()),
        Command::Config(ConfigCmd::Show) => {
            let text = toml::to_string_pretty(cfg).map_err(|e| Failure::new("config", e.to_string()))?;
            println!("# hash {hash}\n{text}");
            Ok(())
        }
        Command::Config(ConfigCmd::Schema) => unreachable!("handled before the config is loaded"),
    }
}

fn load_kind(store: &ParamStore, cfg: &RunConfig, kind: &str) -> Outcome {
    let path = load_latest(store, &cfg.paths.checkpoints, kind).map_err(|e| missing_checkpoint(e, kind))?;
    log::info!("loaded {}", path.display());
    Ok(())
}

fn save_kind(store: &ParamStore, cfg: &RunConfig, kind: &str) -> Result<PathBuf, Failure> {
    let path = save_checkpoint(store, &cfg.paths.checkpoints, kind, &cfg.model)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn load_pipeline(cfg: &RunConfig) -> Result<Pipeline, Failure> {
    let p = Pipeline::new(cfg.model.clone(), cfg.seed)?;
    load_kind(&p.backbone.store, cfg, BACKBONE_KIND)?;
    load_kind(&p.spectrum.store, cfg, SPECTRUM_KIND)?;
    load_kind(&p.mapper.store, cfg, MAPPER_KIND)?;
    Ok(p)
}

fn client(cfg: &RunConfig) -> Result<Box<dyn MllmClient>, Failure> {
    if cfg.client.offline {
        log::info!("using the offline stub supervisor");
        Ok(Box::new(StubSupervisor::default()))
    } else {
        Ok(Box::new(HttpChatClient::new(cfg.client.http.clone())?))
    }
}

fn init(cfg: &RunConfig) -> Outcome {
    let p = Pipeline::new(cfg.model.clone(), cfg.seed)?;
    save_kind(&p.backbone.store, cfg, BACKBONE_KIND)?;
    save_kind(&p.spectrum.store, cfg, SPECTRUM_KIND)?;
    save_kind(&p.mapper.store, cfg, MAPPER_KIND)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Outcome {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = File::create(path)?;
    for it in items {
        writeln!(f, "{}", serde_json::to_string(it)?)?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let f = File::open(path).map_err(|e| Failure::new("io", format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Failure::new("invalid-input", format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn synth_corpus(cfg: &RunConfig, n: usize) -> Outcome {
    std::fs::create_dir_all(&cfg.paths.images)?;
    let corpus = warm_dark_corpus(n, cfg.model.autoencoder.image_size as u32, cfg.seed);
    let mut entries = Vec::with_capacity(n);
    for s in corpus {
        let file = PathBuf::from(format!("{}.png", s.id));
        save_png(&s.image, &cfg.paths.images.join(&file))?;
        entries.push(CorpusEntry {
            id: s.id,
            image: file,
            caption: s.caption,
            distribution: s.distribution,
        });
    }
    write_jsonl(&cfg.paths.corpus, &entries)?;
    log::info!("wrote {n} images and {}", cfg.paths.corpus.display());
    Ok(())
}

fn synth_fixture(cfg: &RunConfig) -> Outcome {
    let fx = dataset_fixture(cfg.seed);
    std::fs::create_dir_all(&cfg.paths.images)?;
    for (id, img) in &fx.pool {
        save_png(img, &cfg.paths.images.join(format!("{id}.png")))?;
    }
    if let Some(dir) = cfg.paths.records.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let store = RecordStore::open(&cfg.paths.records)?;
    for r in &fx.records {
        store.put(r)?;
    }
    let lexicon = cfg
        .paths
        .lexicon
        .clone()
        .unwrap_or_else(|| cfg.paths.records.with_file_name("lexicon.tsv"));
    std::fs::write(&lexicon, &fx.lexicon_tsv)?;
    let planted: BTreeMap<String, Vec<&String>> =
        fx.planted.iter().map(|(c, ids)| (format!("{c:?}").to_lowercase(), ids.iter().collect())).collect();
    println!("{}", serde_json::to_string_pretty(&planted)?);
    log::info!("wrote {} records, {} images and {}", fx.records.len(), fx.pool.len(), lexicon.display());
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<(Vec<CorpusEntry>, Vec<RgbImage>), Failure> {
    if !cfg.paths.corpus.is_file() {
        return Err(Failure::new("invalid-input", format!("no corpus at {}", cfg.paths.corpus.display()))
            .hint("run `affedit synth corpus` first"));
    }
    let entries: Vec<CorpusEntry> = read_jsonl(&cfg.paths.corpus)?;
    if entries.is_empty() {
        return Err(Failure::new("invalid-input", "the corpus is empty"));
    }
    let images = entries
        .iter()
        .map(|e| load_png(&cfg.paths.images.join(&e.image)))
        .collect::<affedit_core::Result<Vec<_>>>()?;
    Ok((entries, images))
}

fn cmd_train_backbone(cfg: &RunConfig) -> Outcome {
    let (entries, images) = load_corpus(cfg)?;
    let backbone = Backbone::new(&cfg.model, cfg.seed, true)?;
    let schedule = affedit_core::diffusion::NoiseSchedule::build(&cfg.model.schedule)?;
    let refs: Vec<&RgbImage> = images.iter().collect();
    let captions: Vec<&str> = entries.iter().map(|e| e.caption.as_str()).collect();
    let log = train_backbone(&backbone, &refs, &captions, &cfg.train.autoencoder, &cfg.train.denoiser, &schedule)?;
    if let (Some(a), Some(d)) = (log.autoencoder.last(), log.denoiser.last()) {
        log::info!("final reconstruction loss {a:.5}, noise loss {d:.5}");
    }
    save_kind(&backbone.store, cfg, BACKBONE_KIND)?;
    Ok(())
}

fn cmd_build_spectrum(cfg: &RunConfig) -> Outcome {
    let (entries, _) = load_corpus(cfg)?;
    let model = SpectrumModel::new(&cfg.model, cfg.seed, true)?;
    let sources: Vec<SpectrumSource> = entries
        .into_iter()
        .map(|e| SpectrumSource {
            id: e.id,
            text: e.caption,
            distribution: e.distribution,
        })
        .collect();
    let log = build_spectrum(&model, &sources, &WheelGeometry::default(), &cfg.train.spectrum)?;
    if let Some(last) = log.last() {
        log::info!("final triplet loss {:.5}", last.loss);
    }
    save_kind(&model.store, cfg, SPECTRUM_KIND)?;
    Ok(())
}

fn cmd_train_mapper(cfg: &RunConfig) -> Outcome {
    let backbone = Backbone::new(&cfg.model, cfg.seed, false)?;
    load_kind(&backbone.store, cfg, BACKBONE_KIND)?;
    let spectrum = SpectrumModel::new(&cfg.model, cfg.seed, false)?;
    load_kind(&spectrum.store, cfg, SPECTRUM_KIND)?;
    let (entries, images) = load_corpus(cfg)?;
    let samples: Vec<MapperSample<'_>> = entries
        .iter()
        .zip(&images)
        .map(|(e, image)| MapperSample { image, text: &e.caption })
        .collect();
    let client = client(cfg)?;
    let cache = ResponseCache::open(&cfg.paths.cache)?;
    let (batch, skipped) =
        prepare_mapper_batch(&samples, &backbone, &spectrum.encoder, &default_prompts(), client.as_ref(), Some(&cache))?;
    if skipped > 0 {
        log::warn!("skipped {skipped} samples with flagged supervisor responses");
    }
    let schedule = affedit_core::diffusion::NoiseSchedule::build(&cfg.model.schedule)?;
    let mapper = MapperModel::new(&cfg.model, cfg.seed, true)?;
    let log = train_mapper(&mapper, &backbone, &spectrum, &schedule, &batch, &cfg.train.mapper)?;
    let path = save_kind(&mapper.store, cfg, MAPPER_KIND)?;
    let log_path = path.with_extension("loss.csv");
    write_loss_log(&log_path, &log)?;
    log::info!("wrote {}", log_path.display());
    Ok(())
}

fn check_size(image: &RgbImage, model: &ModelConfig, what: &str) -> Outcome {
    let s = model.autoencoder.image_size as u32;
    if image.dimensions() != (s, s) {
        return Err(Failure::new(
            "invalid-input",
            format!("{what} is {}x{}, the model works on {s}x{s}", image.width(), image.height()),
        )
        .hint(format!("resize the input to {s}x{s}")));
    }
    Ok(())
}

fn cmd_edit(cfg: &RunConfig, image: &Path, text: &str, mask: Option<&Path>, out: &Path) -> Outcome {
    let input = load_png(image)?;
    check_size(&input, &cfg.model, "the image")?;
    let p = load_pipeline(cfg)?;
    let cond = p.conditioner();
    let h = p.handles(&cond);
    let mut req = EditRequest::new(input, text, cfg.edit.t, cfg.seed);
    let result = match mask {
        Some(m) => {
            req = req.with_mask(load_mask(m)?);
            edit_masked(&req, &h)?
        }
        None => edit(&req, &h)?,
    };
    save_png(&result.image, out)?;
    log::info!("wrote {} (t = {}, seed = {})", out.display(), cfg.edit.t, cfg.seed);
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, text: &str, out: &Path) -> Outcome {
    let p = load_pipeline(cfg)?;
    let cond = p.conditioner();
    let h = p.handles(&cond);
    let result = generate(text, cfg.seed, p.schedule.steps(), &h)?;
    save_png(&result.image, out)?;
    log::info!("wrote {} (seed = {})", out.display(), cfg.seed);
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, hash: &str, manifest: &Path, out: Option<&Path>, csv: Option<&Path>) -> Outcome {
    let mut records: Vec<EvalRecord> = read_jsonl(manifest)?;
    if records.is_empty() {
        return Err(Failure::new("invalid-input", format!("manifest {} has no records", manifest.display()))
            .hint("list one JSON object per line with id, original, edited, target and text"));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    for r in &mut records {
        for p in [&mut r.original, &mut r.edited] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    let backbone = Backbone::new(&cfg.model, cfg.seed, false)?;
    load_kind(&backbone.store, cfg, BACKBONE_KIND)?;
    let features = LatentFeatures(&backbone.autoencoder);
    let objects = PaletteClassifier::objects();
    let scenes = PaletteClassifier::scenes();
    let emotions = PrototypeEmotionClassifier::default();
    let h = EvalHandles {
        features: &features,
        objects: &objects,
        scenes: &scenes,
        emotions: &emotions,
    };
    let report = evaluate_suite(&records, &h, &cfg.evaluate, hash)?;
    for (metric, e) in &report.errors {
        log::warn!("{metric} unavailable: {e}");
    }
    match out {
        Some(path) => {
            report.write_json(path)?;
            log::info!("wrote {}", path.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if let Some(path) = csv {
        report.write_csv(path)?;
    }
    Ok(())
}

fn open_store(cfg: &RunConfig) -> Result<RecordStore, Failure> {
    if let Some(dir) = cfg.paths.records.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(RecordStore::open(&cfg.paths.records)?)
}

/// Id-sorted PNGs of the image directory, keyed by file stem.
fn image_files(cfg: &RunConfig) -> Result<Vec<(String, PathBuf)>, Failure> {
    let dir = &cfg.paths.images;
    let rd = std::fs::read_dir(dir).map_err(|e| Failure::new("io", format!("cannot list {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn dataset_add(cfg: &RunConfig) -> Outcome {
    let store = open_store(cfg)?;
    let mut added = 0;
    for (id, path) in image_files(cfg)? {
        if store.get(&id).is_none() {
            let file = path.file_name().map(PathBuf::from).unwrap_or_default();
            store.put(&AnnotationRecord::new(id, file))?;
            added += 1;
        }
    }
    println!("{}", serde_json::json!({ "added": added, "total": store.len() }));
    Ok(())
}

fn dataset_annotate(cfg: &RunConfig) -> Outcome {
    let store = open_store(cfg)?;
    let client = client(cfg)?;
    let images = cfg.paths.images.clone();
    let summary = annotate_store(
        &store,
        &|r: &AnnotationRecord| load_png(&images.join(&r.image)),
        client.as_ref(),
        &CotTemplates::default(),
    )?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn dataset_validate(cfg: &RunConfig) -> Outcome {
    let lexicon_path = cfg.paths.lexicon.as_ref().ok_or_else(|| {
        Failure::new("config", "validation needs a polarity lexicon").hint("set `paths.lexicon` to a word<TAB>valence file")
    })?;
    let lexicon = PolarityLexicon::from_tsv(&std::fs::read_to_string(lexicon_path)?, LexiconScale::default())?;
    let store = open_store(cfg)?;
    let mut pool = Vec::new();
    for (id, path) in image_files(cfg)? {
        pool.push((id, load_png(&path)?));
    }
    let mut images = BTreeMap::new();
    for r in store.records() {
        if r.status == RecordStatus::Annotated {
            images.insert(r.id.clone(), load_png(&cfg.paths.images.join(&r.image))?);
        }
    }
    let text_classifier = KeywordEmotionClassifier::default();
    let image_classifier = PrototypeEmotionClassifier::default();
    let wheel = WheelGeometry::default();
    let h = ValidationHandles {
        lexicon: &lexicon,
        text_classifier: &text_classifier,
        image_classifier: &image_classifier,
        retriever: &PaletteRetriever,
        wheel: &wheel,
    };
    let summary = validate_store(&store, &images, &pool, &h, &cfg.dataset.validation)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn dataset_split(cfg: &RunConfig, out: &Path) -> Outcome {
    let store = open_store(cfg)?;
    let records: Vec<AnnotationRecord> =
        store.records().into_iter().filter(|r| r.status == RecordStatus::Validated).collect();
    let mut embeddings = Vec::with_capacity(records.len());
    for r in &records {
        embeddings.push(color_features(&load_png(&cfg.paths.images.join(&r.image))?).to_vec());
    }
    let split = build_eval_split(&records, &embeddings, &cfg.dataset.split)?;
    write_jsonl(out, &split.samples)?;
    log::info!("wrote {} pairs to {}", split.samples.len(), out.display());
    Ok(())
}

fn schedule(cfg: &RunConfig, out: Option<&Path>) -> Outcome {
    let s = affedit_core::diffusion::NoiseSchedule::build(&cfg.model.schedule)?;
    match out {
        Some(path) => s.write_csv(path)?,
        None => {
            let rows: Vec<_> = (1..=s.steps())
                .map(|t| serde_json::json!({"t": t, "alpha": s.alpha(t), "alpha_bar": s.alpha_bar(t), "sigma": s.sigma(t)}))
                .collect();
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
    }
    Ok(())
}
