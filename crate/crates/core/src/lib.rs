//! Three-tower contrastive pretraining over synthetic multimodal satellite-style
//! chips, plus the downstream probing and visualization protocol.
//!
//! The pipeline: build a chip grid with banded train/val/test splits
//! ([`grid`]), generate deterministic synthetic chips with shared latent
//! terrain ([`synth`]), persist them ([`datastore`]), pretrain three
//! single-channel ViT towers with a pairwise CLIP objective ([`model`],
//! [`loss`], [`trainer`]), probe the frozen embeddings with Random Forests
//! over a few-shot ablation grid ([`probe`]), and project embeddings to 2D
//! for label-colored scatter plots ([`viz`]).

pub mod datastore;
pub mod error;
pub mod grid;
pub mod loss;
pub mod model;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod viz;

pub use ndarray;

pub use error::{Error, Result};
pub use grid::{ChipIndex, Split};
pub use model::{EncoderConfig, Modality, TowerSet};
pub use synth::{LatentFields, ModalityChip, Task};
