use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, RecordStatus, RecordStore};
use crate::error::{Error, Result};
use crate::supervision::{MllmClient, SupervisorPrompt};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Objects,
    Cues,
    Description,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Objects, Phase::Cues, Phase::Description];

    pub fn prompt_id(self) -> &'static str {
        match self {
            Phase::Objects => "cot-objects",
            Phase::Cues => "cot-cues",
            Phase::Description => "cot-description",
        }
    }
}

/// Prompt templates with `{objects}` and `{cues}` slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotTemplates {
    pub objects: String,
    pub cues: String,
    pub description: String,
}

impl Default for CotTemplates {
    fn default() -> Self {
        Self {
            objects: "Identify the main objects in this image and describe what they are doing.".into(),
            cues: "The image shows: {objects}. Which visual cues (colors, lighting, expressions, \
                   composition) suggest an emotion, and which emotion?"
                .into(),
            description: "Content: {objects}. Emotional cues: {cues}. Write one sentence describing the \
                          emotion this image evokes and why. Intentionally exclude descriptions of object \
                          appearances."
                .into(),
        }
    }
}

impl CotTemplates {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn render(template: &str, slots: &BTreeMap<&str, &str>) -> String {
        let mut out = template.to_string();
        for (k, v) in slots {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out
    }

    fn prompt(&self, phase: Phase, record: &AnnotationRecord) -> SupervisorPrompt {
        let mut slots = BTreeMap::new();
        if let Some(p) = &record.phase1 {
            slots.insert("objects", p.as_str());
        }
        if let Some(p) = &record.phase2 {
            slots.insert("cues", p.as_str());
        }
        let template = match phase {
            Phase::Objects => &self.objects,
            Phase::Cues => &self.cues,
            Phase::Description => &self.description,
        };
        SupervisorPrompt::new(phase.prompt_id(), Self::render(template, &slots))
    }
}

/// Runs one phase. Earlier phases must be complete and this one must not be.
/// A client failure bumps the retry count and leaves the record pending.
pub fn run_phase(
    record: &mut AnnotationRecord,
    phase: Phase,
    image: &RgbImage,
    client: &dyn MllmClient,
    templates: &CotTemplates,
) -> Result<()> {
    if record.status != RecordStatus::Pending {
        return Err(Error::Sequencing(format!("record `{}` is no longer pending", record.id)));
    }
    let (ready, done) = match phase {
        Phase::Objects => (true, record.phase1.is_some()),
        Phase::Cues => (record.phase1.is_some(), record.phase2.is_some()),
        Phase::Description => (record.phase1.is_some() && record.phase2.is_some(), record.phase3.is_some()),
    };
    if !ready {
        return Err(Error::Sequencing(format!("{phase:?} requested before the earlier phases of `{}`", record.id)));
    }
    if done {
        return Err(Error::Sequencing(format!("{phase:?} of `{}` is already complete", record.id)));
    }
    let prompt = templates.prompt(phase, record);
    let answer = match client.respond(image, &prompt) {
        Ok(a) if !a.trim().is_empty() => a.trim().to_string(),
        Ok(_) => {
            record.retries += 1;
            record.last_error = Some(format!("{phase:?}: empty response"));
            return Err(Error::Client(format!("empty response for {phase:?}")));
        }
        Err(e) => {
            record.retries += 1;
            record.last_error = Some(e.to_string());
            return Err(e);
        }
    };
    record.last_error = None;
    match phase {
        Phase::Objects => record.phase1 = Some(answer),
        Phase::Cues => record.phase2 = Some(answer),
        Phase::Description => {
            record.phase3 = Some(answer);
            record.status = RecordStatus::Annotated;
        }
    }
    Ok(())
}

/// Runs the remaining phases in order. Records that are past annotation are
/// returned unchanged; a failing client leaves the record pending.
pub fn annotate_cot(
    mut record: AnnotationRecord,
    image: &RgbImage,
    client: &dyn MllmClient,
    templates: &CotTemplates,
) -> AnnotationRecord {
    if record.status != RecordStatus::Pending {
        return record;
    }
    for phase in Phase::ALL {
        let done = match phase {
            Phase::Objects => record.phase1.is_some(),
            Phase::Cues => record.phase2.is_some(),
            Phase::Description => record.phase3.is_some(),
        };
        if done {
            continue;
        }
        if let Err(e) = run_phase(&mut record, phase, image, client, templates) {
            log::warn!("annotation of `{}` stopped at {phase:?}: {e}", record.id);
            break;
        }
    }
    record
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AnnotateSummary {
    pub annotated: usize,
    pub pending: usize,
    pub skipped: usize,
}

/// Annotates every pending record in the store, persisting each result.
pub fn annotate_store(
    store: &RecordStore,
    load_image: &dyn Fn(&AnnotationRecord) -> Result<RgbImage>,
    client: &dyn MllmClient,
    templates: &CotTemplates,
) -> Result<AnnotateSummary> {
    let mut summary = AnnotateSummary::default();
    for record in store.records() {
        if record.status != RecordStatus::Pending {
            summary.skipped += 1;
            continue;
        }
        let image = load_image(&record)?;
        let out = annotate_cot(record, &image, client, templates);
        if out.status == RecordStatus::Annotated {
            summary.annotated += 1;
        } else {
            summary.pending += 1;
        }
        store.put(&out)?;
    }
    Ok(summary)
}
