//! Minimally supervised stance detection and narrative analytics for
//! energy-advertising corpora.
//!
//! The crate implements a complete pipeline:
//!
//! 1. [`corpus`] — ad ingestion (JSONL/CSV), keyword filtering, weak stance
//!    labels propagated from a funding-entity registry, and entity-disjoint
//!    train/validation/test splits.
//! 2. [`embedder`] — a small from-scratch sentence encoder (token embeddings,
//!    mean pooling, tanh projection, L2 normalization) trained with a
//!    multiple-negatives ranking loss over (body, description) pairs.
//! 3. [`themes`] — a fixed phrase bank of campaign narratives; ads are mapped
//!    to the theme whose phrases are closest in embedding space.
//! 4. [`stance`] — a three-way stance classifier on top of the encoder,
//!    fine-tuned end-to-end from a shared initialization across a grid of
//!    hyperparameter configurations, plus a TF-IDF logistic-regression
//!    baseline.
//! 5. [`soup`] — uniform and greedy weight averaging ("model soups") over the
//!    fine-tuned checkpoints, pooling the sweep into one model with no extra
//!    inference cost.
//! 6. [`metrics`] — accuracy, macro-F1, and chi-square independence tests.
//! 7. [`analytics`] — spend/impression-weighted aggregation of themes,
//!    demographics, geography, and funders per stance.
//!
//! [`nncore`] provides the dense f64 building blocks (tensors, kernels, Adam,
//! checkpoint serialization, gradient checking) that the learned components
//! share. [`synth`] generates self-consistent synthetic corpora for tests and
//! demos, and [`cli`] wires every stage into a deterministic, manifest-guarded
//! command-line pipeline.
//!
//! Determinism is a design requirement throughout: every source of randomness
//! is seeded explicitly, serialized maps are ordered, and rerunning any stage
//! with the same config and seeds reproduces its outputs byte for byte.

pub mod analytics;
pub mod cli;
pub mod corpus;
pub mod embedder;
pub mod metrics;
pub mod nncore;
pub mod soup;
pub mod stance;
pub mod synth;
pub mod themes;

pub use corpus::{AdRecord, FundingEntity, LabeledAd, SplitAssignment, StanceLabel};
pub use nncore::{Checkpoint, HyperConfig, ParamSet, Tensor2};
pub use themes::{Theme, ThemeAssignment, ThemeBank};
