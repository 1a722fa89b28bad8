use affedit_core::Error;
use affedit_core::pipeline::{BACKBONE_KIND, MAPPER_KIND, SPECTRUM_KIND};
use serde::Serialize;

/// The error report printed as JSON on stderr.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
}

impl Failure {
    pub fn new(error: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            error: error.into(),
            message: message.into(),
            hint: None,
        }
    }

    pub fn hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("failure serializes")
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new("json", e.to_string())
    }
}

/// The command that writes checkpoints of `kind`.
pub fn producer(kind: &str) -> &'static str {
    match kind {
        BACKBONE_KIND => "affedit train-backbone",
        SPECTRUM_KIND => "affedit build-spectrum",
        MAPPER_KIND => "affedit train-mapper",
        _ => "affedit init",
    }
}

pub fn missing_checkpoint(e: Error, kind: &str) -> Failure {
    let f = Failure::from(e);
    match f.error.as_str() {
        "checkpoint" => f.hint(format!(
            "run `{}` first (or `affedit init` for untrained weights)",
            producer(kind)
        )),
        _ => f,
    }
}
