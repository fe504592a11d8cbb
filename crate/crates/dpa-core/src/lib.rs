//! Deterministic building blocks for parameter-augmented transfer attacks on
//! embedding models: a minimal reverse-mode tensor tape, an angular-margin
//! training head, dual-trajectory checkpoint collection and selection,
//! hard-model-aggregation attack crafting, and verification-style evaluation.
//!
//! The crate is `no_std` (alloc only) and free of platform entropy or IO;
//! every sampled quantity is driven by an explicit seed, so whole pipelines
//! reproduce bit-for-bit. File formats, reports, and the command-line surface
//! live in the companion `dpa-cli` crate.

#![no_std]

extern crate alloc;

pub mod attack;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use attack::{craft, craft_dma, AttackConfig, AttackTrace, HardState};
pub use model::{BackboneParams, BackboneSpec, HeadParams, MarginSpec};
pub use synth::{IdentityDataset, PairSet};
pub use tensor::{clip_box, sign, GradientMap, NodeId, Tape, Tensor};
pub use train::{run_dpo, select_checkpoints, selection_stride, Checkpoint, CheckpointStore, TrainConfig, TrajectoryTag};
