//! Affective image editing at desk scale: a contrastively trained emotional
//! spectrum, an emotional mapper that turns text into diffusion conditioning,
//! partial-noising edits, evaluation metrics and a dataset validation
//! pipeline.

pub mod dataset;
pub mod diffusion;
pub mod editing;
pub mod emotion;
pub mod error;
pub mod evaluation;
pub mod image_io;
pub mod mapper;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod spectrum;
pub mod supervision;
pub mod synthetic;
pub mod text;

pub use emotion::{Emotion, EmotionDistribution, PairRelation, Polarity, WheelGeometry};
pub use error::{Error, Result};
