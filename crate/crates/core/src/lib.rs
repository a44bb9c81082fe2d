//! Interaction-consistent object removal: remove a named object together with
//! every element its absence would leave implausible (shadows, held items,
//! produced traces, context-bound objects).
//!
//! The crate wires a multimodal reasoner, an open-vocabulary segmenter and a
//! mask-guided remover into an analyze, segment, remove and self-correct
//! pipeline, and ships the tooling around it: record/replay fixtures, a
//! ground-truth synthetic world, image metrics, a benchmark runner and a
//! dataset diversity analysis.

pub mod backends;
pub mod bench;
pub mod cli;
pub mod config;
pub mod diversity;
pub mod metrics;
pub mod oracle;
pub mod parse;
pub mod pipeline;
pub mod prompts;
pub mod raster;
