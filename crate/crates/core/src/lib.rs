//! Parameter-efficient tuning of a HuBERT-shaped speech encoder.
//!
//! The crate builds a strided-conv feature extractor plus transformer
//! backbone on a small reverse-mode tape, injects CNN adapters and Houlsby
//! adapters according to a [`PetStrategy`], counts trainable parameters
//! exactly, and trains downstream heads on synthetic classification tasks.

pub mod accounting;
pub mod adapters;
pub mod backbone;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod param;
pub mod report;
pub mod rng;
pub mod strategy;
pub mod tensor;
pub mod train;

pub use accounting::{count_params, count_strategy, diff_reports, trainable_ratio, Convention, ModelLayout, ParamReport};
pub use backbone::{Backbone, BackboneConfig, ConvBlockSpec};
pub use data::{gen_synthetic_dataset, Dataset, SyntheticTaskSpec};
pub use error::{PetError, Result};
pub use exec::Execution;
pub use graph::{Graph, NodeId, Precision};
pub use model::{attach_head, HeadKind, TaskModel};
pub use optim::{Optimizer, OptimizerKind};
pub use param::{ParamId, ParamStore};
pub use strategy::{apply_strategy, CnnStrategy, FreezeMask, InjectedModel, PetStrategy};
pub use tensor::Tensor;
pub use train::{low_resource_sweep, lr_grid_search, train, ExperimentSpec, RunRecord, TrainConfig};
