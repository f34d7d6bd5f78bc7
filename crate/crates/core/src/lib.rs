//! Desk-scale RGB-Event sign language translation pipeline.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`event`] — event-stream data model, file formats, event-to-frame
//!   conversion, and RGB/event temporal alignment.
//! - [`numkit`] — dense matrices, MLPs with exact backpropagation, SGD with
//!   cosine annealing, checkpoint I/O, and a finite-difference gradient
//!   checker.
//! - [`mir`] — micro-sign retrieval: memory-augmented enhancement of
//!   per-modality features and their fused sum.
//! - [`segment`] — informative-frame selection: RGB motion proposals,
//!   adaptive event-count proposals, and event-anchored merging.
//! - [`prototype`] — macro-sign prototype construction: sliding windows,
//!   cross-modal averaging, DBSCAN clustering, centroid extraction.
//! - [`hopfield`] — modern Hopfield retrieval over prototypes and the
//!   residual enhancement it drives.
//! - [`translate`] — the end-to-end model: shared visual encoder,
//!   micro/macro fusion, autoregressive toy decoder, training loop.
//! - [`metrics`] — corpus-level BLEU-1..4 and ROUGE-L.
//! - [`synth`] — synthetic RGB-Event gesture generator with ground-truth
//!   segments and token labels.

pub mod event;
pub mod hopfield;
pub mod metrics;
pub mod mir;
pub mod numkit;
pub mod prototype;
pub mod segment;
pub mod synth;
pub mod translate;
