use std::path::{Path, PathBuf};

use affedit_core::dataset::{SplitConfig, ValidationConfig};
use affedit_core::diffusion::AutoencoderTrainConfig;
use affedit_core::evaluation::EvalConfig;
use affedit_core::pipeline::{DenoiserTrainConfig, MapperTrainConfig, ModelConfig};
use affedit_core::spectrum::SpectrumTrainConfig;
use affedit_core::supervision::HttpClientConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Value, json};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub paths: Paths,
    pub edit: EditSection,
    pub client: ClientSection,
    pub train: TrainSection,
    pub dataset: DatasetSection,
    pub evaluate: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::toy(),
            paths: Paths::default(),
            edit: EditSection::default(),
            client: ClientSection::default(),
            train: TrainSection::default(),
            dataset: DatasetSection::default(),
            evaluate: EvalConfig::default(),
        }
    }
}

/// Relative paths are taken from the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub checkpoints: PathBuf,
    pub cache: PathBuf,
    /// Annotation record log (JSONL).
    pub records: PathBuf,
    pub images: PathBuf,
    /// Training corpus written by `synth corpus` (JSONL).
    pub corpus: PathBuf,
    /// Polarity lexicon (TSV), needed by `dataset validate`.
    pub lexicon: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            checkpoints: "checkpoints".into(),
            cache: "cache".into(),
            records: "records.jsonl".into(),
            images: "images".into(),
            corpus: "corpus.jsonl".into(),
            lexicon: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub t: usize,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            t: affedit_core::editing::DEFAULT_EDIT_STEP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSection {
    /// Use the deterministic stub instead of the HTTP client.
    pub offline: bool,
    pub http: HttpClientConfig,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            offline: true,
            http: HttpClientConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub autoencoder: AutoencoderTrainConfig,
    pub denoiser: DenoiserTrainConfig,
    pub spectrum: SpectrumTrainConfig,
    pub mapper: MapperTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub validation: ValidationConfig,
    pub split: SplitConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub t: Option<usize>,
    pub endpoint: Option<String>,
    pub offline: bool,
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`), applies `overrides` and
    /// resolves every path.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, Failure> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::new("config", format!("cannot read {}: {e}", p.display())))?;
                let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
                    Failure::new("config", format!("{}: {}", p.display(), e.message()))
                        .hint("`affedit config schema` prints the accepted keys")
                })?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (cfg, base)
            }
            None => (RunConfig::default(), PathBuf::new()),
        };
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(t) = overrides.t {
            cfg.edit.t = t;
        }
        if let Some(endpoint) = &overrides.endpoint {
            cfg.client.http.endpoint = endpoint.clone();
            cfg.client.offline = false;
        }
        if overrides.offline {
            cfg.client.offline = true;
        }
        cfg.resolve(&base)?;
        cfg.model.validate().map_err(Failure::from)?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) -> Result<(), Failure> {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for path in [&mut p.checkpoints, &mut p.cache, &mut p.records, &mut p.images, &mut p.corpus] {
            join(path);
        }
        if let Some(lex) = &mut p.lexicon {
            join(lex);
            if !lex.is_file() {
                return Err(Failure::new("config", format!("lexicon {} does not exist", lex.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&serde_json::to_value(self).expect("config serializes"))
            .expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// A JSON Schema describing the accepted config, derived from the defaults.
/// Keys holding `null` by default accept any value.
pub fn schema() -> Value {
    let mut s = schema_of(&serde_json::to_value(RunConfig::default()).expect("config serializes"));
    if let Value::Object(m) = &mut s {
        m.insert("$schema".into(), json!("https://json-schema.org/draft/2020-12/schema"));
        m.insert("title".into(), json!("affedit run config"));
    }
    s
}

fn schema_of(v: &Value) -> Value {
    match v {
        Value::Null => json!({}),
        Value::Bool(_) => json!({"type": "boolean"}),
        Value::Number(n) if n.is_u64() || n.is_i64() => json!({"type": "integer"}),
        Value::Number(_) => json!({"type": "number"}),
        Value::String(_) => json!({"type": "string"}),
        Value::Array(items) => match items.first() {
            Some(first) => json!({"type": "array", "items": schema_of(first)}),
            None => json!({"type": "array"}),
        },
        Value::Object(m) => {
            let props: serde_json::Map<String, Value> = m.iter().map(|(k, v)| (k.clone(), schema_of(v))).collect();
            json!({"type": "object", "properties": props, "additionalProperties": false})
        }
    }
}
