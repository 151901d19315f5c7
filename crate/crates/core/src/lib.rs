//! Online deep metric learning on a stream of class-disjoint tasks.
//!
//! Each new stage trains a copy of the previous model (the frozen teacher)
//! alongside a randomly initialized peer. The copy is pulled towards the
//! teacher's batch correlation structure and towards its peer via symmetric
//! KL distillation of softmax-normalized Gram matrices. From the third stage
//! on, correlation targets for every earlier task are reconstructed from the
//! teacher's features using prototype drift estimated offline at each stage
//! boundary, so older models never need to be loaded during training.
//!
//! Module map:
//! - [`tensor`]: matrices, softmax, KL, cosine similarity
//! - [`model`]: the MLP embedding network, backprop, Adam, model files
//! - [`losses`]: batch-hard triplet, Gram correlation and mutual losses
//! - [`drift`]: prototypes, drift tables, virtual features, stage state files
//! - [`dataset`]: synthetic clusters, CSV, task splits, P×K sampling
//! - [`evaluation`]: Recall@1 retrieval
//! - [`pipeline`]: stage training, baseline modes
//! - [`registry`]: the on-disk stage chain

pub mod dataset;
pub mod drift;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod tensor;

pub use dataset::{Dataset, LabeledVector, SplitMode, SyntheticParams, TaskDataset, TaskSplitPlan};
pub use drift::{DriftTable, Prototype, StageState};
pub use error::{OdmlError, Result};
pub use evaluation::{recall_at_1, EvalReport};
pub use losses::{Gram, LossConfig, LossReport, LossWeights};
pub use model::{AdamState, Embedder, EmbeddingModel};
pub use pipeline::{run_baseline, run_mode, Mode, ModeRun, StageReport, TrainingConfig};
pub use registry::Registry;
pub use tensor::Matrix;
