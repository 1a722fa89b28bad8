use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_io::warmth;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factor {
    ColorTone,
    Objects,
    FacialExpression,
    Atmosphere,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisorPrompt {
    pub id: String,
    /// The emotional factor probed, if the prompt targets one.
    #[serde(default)]
    pub factor: Option<Factor>,
    pub text: String,
}

impl SupervisorPrompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            factor: None,
            text: text.into(),
        }
    }
}

/// One question per emotional factor.
pub fn default_prompts() -> Vec<SupervisorPrompt> {
    let p = |id: &str, factor, text: &str| SupervisorPrompt {
        id: id.into(),
        factor: Some(factor),
        text: text.into(),
    };
    vec![
        p(
            "color-tone",
            Factor::ColorTone,
            "Describe the dominant color tone of this image and how it feels.",
        ),
        p(
            "objects",
            Factor::Objects,
            "Which objects or scene elements in this image carry its emotion?",
        ),
        p(
            "facial-expression",
            Factor::FacialExpression,
            "If there are faces, describe their expressions; otherwise describe the implied mood of any figures.",
        ),
        p(
            "atmosphere",
            Factor::Atmosphere,
            "Summarize the overall atmosphere of this image in one sentence.",
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisorResponse {
    pub prompt_id: String,
    pub text: String,
    /// Set when the supervisor returned nothing usable.
    #[serde(default)]
    pub flagged: bool,
}

/// A multimodal model that answers a prompt about an image.
pub trait MllmClient: Send + Sync {
    fn respond(&self, image: &RgbImage, prompt: &SupervisorPrompt) -> Result<String>;
}

/// SHA-256 over the image dimensions and raw RGB bytes.
pub fn image_digest(image: &RgbImage) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    h.finalize().into()
}

pub fn cache_key(image: &RgbImage, prompt_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(image_digest(image));
    h.update(prompt_id.as_bytes());
    hex::encode(h.finalize())
}

/// Offline supervisor. Fixture answers take precedence; otherwise the answer
/// is derived from the image's colour statistics.
#[derive(Debug, Default)]
pub struct StubSupervisor {
    fixtures: HashMap<(String, String), String>,
    calls: AtomicUsize,
}

impl StubSupervisor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixture(mut self, image: &RgbImage, prompt_id: &str, answer: &str) -> Self {
        self.fixtures
            .insert((hex::encode(image_digest(image)), prompt_id.to_string()), answer.to_string());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn mean_luminance(image: &RgbImage) -> f64 {
    let n = (image.width() * image.height()).max(1) as f64;
    image
        .pixels()
        .map(|p| (0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64) / 255.0)
        .sum::<f64>()
        / n
}

/// Colour-driven answer using the same vocabulary as the synthetic captions.
pub fn describe_by_color(image: &RgbImage, factor: Factor) -> String {
    let warm = warmth(image);
    let lum = mean_luminance(image);
    let bright = lum > 0.45;
    let text = match (factor, warm > 0.05, bright) {
        (Factor::ColorTone, true, true) => "warm golden orange light",
        (Factor::ColorTone, true, false) => "warm but dim amber light",
        (Factor::ColorTone, false, true) => "pale cool light",
        (Factor::ColorTone, false, false) => "dark cold blue shadows",
        (Factor::Objects, true, _) => "a sunny meadow with flowers",
        (Factor::Objects, false, true) => "an open quiet field",
        (Factor::Objects, false, false) => "a gloomy alley with shadows",
        (Factor::FacialExpression, true, _) => "relaxed smiling faces",
        (Factor::FacialExpression, false, true) => "calm neutral faces",
        (Factor::FacialExpression, false, false) => "tense frightened faces",
        (Factor::Atmosphere, true, _) => "a peaceful cozy content atmosphere",
        (Factor::Atmosphere, false, true) => "a still calm atmosphere",
        (Factor::Atmosphere, false, false) => "a threatening fearful atmosphere",
    };
    text.to_string()
}

/// Answers for prompts without a factor, chosen by prompt id.
fn answer_by_id(image: &RgbImage, id: &str) -> String {
    match id {
        "cot-objects" => describe_by_color(image, Factor::Objects),
        "cot-cues" => format!(
            "{} and {}",
            describe_by_color(image, Factor::ColorTone),
            describe_by_color(image, Factor::FacialExpression)
        ),
        "cot-description" => format!(
            "{} under {}, {}",
            describe_by_color(image, Factor::Objects),
            describe_by_color(image, Factor::ColorTone),
            describe_by_color(image, Factor::Atmosphere)
        ),
        _ => describe_by_color(image, Factor::Atmosphere),
    }
}

impl MllmClient for StubSupervisor {
    fn respond(&self, image: &RgbImage, prompt: &SupervisorPrompt) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = (hex::encode(image_digest(image)), prompt.id.clone());
        Ok(match (self.fixtures.get(&key), prompt.factor) {
            (Some(answer), _) => answer.clone(),
            (None, Some(f)) => describe_by_color(image, f),
            (None, None) => answer_by_id(image, &prompt.id),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpClientConfig {
    /// Chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub min_interval_ms: u64,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: "AFFEDIT_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 3,
            min_interval_ms: 200,
        }
    }
}

/// Client for OpenAI-compatible chat-completion endpoints, sending the image
/// as a base64 PNG data URL.
pub struct HttpChatClient {
    config: HttpClientConfig,
    http: reqwest::blocking::Client,
    last_request: Mutex<Option<Instant>>,
}

impl HttpChatClient {
    pub fn new(config: HttpClientConfig) -> Result<Self> {
        if config.max_retries == 0 {
            return Err(Error::invalid_config("max_retries must be at least 1"));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(Self {
            config,
            http,
            last_request: Mutex::new(None),
        })
    }

    fn wait_for_slot(&self) {
        let interval = Duration::from_millis(self.config.min_interval_ms);
        let mut last = self.last_request.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, String> {
        self.wait_for_slot();
        let mut req = self.http.post(&self.config.endpoint).json(body);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let value: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl MllmClient for HttpChatClient {
    fn respond(&self, image: &RgbImage, prompt: &SupervisorPrompt) -> Result<String> {
        let mut png = Vec::new();
        image.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
        let url = format!(
            "data:image/png;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(&png)
        );
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt.text},
                    {"type": "image_url", "image_url": {"url": url}},
                ],
            }],
        });
        let mut last_err = String::new();
        for attempt in 0..self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 << (attempt - 1)));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("supervisor attempt {} failed: {e}", attempt + 1);
                    last_err = e;
                }
            }
        }
        Err(Error::SupervisionUnavailable(format!(
            "{} failed after {} attempts: {last_err}",
            self.config.endpoint, self.config.max_retries
        )))
    }
}

/// Content-addressed on-disk response store, one file per key.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> Result<Option<String>> {
        match std::fs::read_to_string(self.path(key)) {
            Ok(text) => {
                self.hits.fetch_add(1, Ordering::SeqCst);
                Ok(Some(text))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.misses.fetch_add(1, Ordering::SeqCst);
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn put(&self, key: &str, text: &str) -> Result<()> {
        let tmp = self.dir.join(format!("{key}.tmp"));
        std::fs::write(&tmp, text)?;
        std::fs::rename(tmp, self.path(key))?;
        Ok(())
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }
}

/// One response per prompt, in prompt order. Empty answers come back flagged
/// and are not cached.
pub fn collect_responses(
    image: &RgbImage,
    prompts: &[SupervisorPrompt],
    client: &dyn MllmClient,
    cache: Option<&ResponseCache>,
) -> Result<Vec<SupervisorResponse>> {
    if prompts.is_empty() {
        return Err(Error::invalid_input("at least one prompt is required"));
    }
    let mut out = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let key = cache_key(image, &prompt.id);
        let cached = match cache {
            Some(c) => c.get(&key)?,
            None => None,
        };
        let text = match cached {
            Some(t) => t,
            None => {
                let t = client.respond(image, prompt)?.trim().to_string();
                if let (Some(c), false) = (cache, t.is_empty()) {
                    c.put(&key, &t)?;
                }
                t
            }
        };
        out.push(SupervisorResponse {
            prompt_id: prompt.id.clone(),
            flagged: text.is_empty(),
            text,
        });
    }
    Ok(out)
}

/// `collect_responses` over many images with at most `workers` in flight.
pub fn collect_responses_many(
    images: &[&RgbImage],
    prompts: &[SupervisorPrompt],
    client: &dyn MllmClient,
    cache: Option<&ResponseCache>,
    workers: usize,
) -> Result<Vec<Vec<SupervisorResponse>>> {
    let workers = workers.max(1);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(workers) {
        let results: Vec<Result<Vec<SupervisorResponse>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|img| s.spawn(move || collect_responses(img, prompts, client, cache)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Client("supervisor worker panicked".into()))))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}
