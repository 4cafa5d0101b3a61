//! A parameter-efficient classification head over frozen, all-layer encoder
//! hidden states.
//!
//! The head learns three vectors and a linear map: `v1` mixes layers,
//! `v2` softly masks hidden dimensions, `v3` pools tokens by attention, and
//! `W` classifies the pooled vector. The encoder is never touched; it only
//! has to export its hidden states in the [`tensorio`] format.

pub mod error;
pub mod grad;
pub mod head;
pub mod report;
pub mod tensorio;
pub mod toygen;
pub mod train;

pub use error::{Error, Result};
pub use head::{AblationFlags, ForwardTrace, HeadGradients, HeadParams, Pooling};
pub use tensorio::{DatasetBundle, HiddenStates, Label, LabeledExample, TaskKind};
pub use train::{TrainConfig, TrainReport};
