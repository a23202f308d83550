//! Asymmetry-driven tumor transplantation for multi-modal brain MRI, plus
//! distillation-based post-training for missing-modality segmentation.
//!
//! Stages:
//! - [`symmetry`] finds the mirror plane of a brain and reflects volumes across it.
//! - [`aem`] turns left-right asymmetry into a per-modality tumor intensity field.
//! - [`synth`] transplants that field into a healthy-looking host and fuses labels.
//! - [`dataset`] builds manifests and synthetic corpora.
//! - [`kdtrain`] trains a compact per-voxel model, then post-trains it with a
//!   full-modality teacher and a student that misses one modality.
//! - [`eval`] scores every modality combination with region Dice.

pub mod aem;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod kdtrain;
pub mod phantom;
pub mod symmetry;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Axis, BrainMask, Dims, LabelVolume, Modality, MultiModalVolume, Sample, Volume3D};
