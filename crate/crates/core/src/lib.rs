//! Synthetic scenario generation for robot life-support assistance.
//!
//! The crate covers the whole offline toolchain:
//!
//! * [`catalog`] loads the closed action set and the everyday-location list.
//! * [`prompt`] renders dialogue and image prompts from template files.
//! * [`parser`] turns free-text chat output into [`Scenario`] records.
//! * [`backends`] wraps chat, image and embedding services (HTTP or mock)
//!   behind one retrying, rate-limited facade.
//! * [`dataset`] drives the place and action routes and writes the
//!   instruction-tuning dataset.
//! * [`eval`] matches free-text responses to catalog actions by cosine
//!   similarity and reports accuracy, significance and label buckets.
//!
//! Data-parallel work (per-seed generation units, bootstrap resampling,
//! batch matching) goes through [`exec::Execution`]; with the `parallel`
//! feature disabled every path runs sequentially with identical results.

pub mod backends;
pub mod catalog;
pub mod dataset;
pub mod digest;
pub mod eval;
pub mod exec;
pub mod parser;
pub mod prompt;
pub mod scenario;

pub use catalog::{ActionCatalog, ActionLabel, LocationCatalog};
pub use prompt::{PromptText, PromptVariant, Route};
pub use scenario::Scenario;
