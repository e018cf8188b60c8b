//! Rehearsal-free continual learning on a frozen transformer backbone.
//!
//! A frozen encoder is adapted to each task in a class-incremental stream by
//! training a small set of prompt vectors per task, while a prototype store
//! accumulates key centroids (frozen features, used to route a query to
//! candidate tasks) and value centroids (prompted features, used as the
//! classifier). Inference never revisits old data: routing plus
//! nearest-class-mean over stored centroids replaces a trained head.

pub mod backbone;
pub mod binio;
pub mod cluster;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod neck_loss;
pub mod optim;
pub mod rng;
pub mod store;
pub mod streams;

pub use backbone::{
    layer_forward, BackboneConfig, BackboneGrads, BackboneWeights, ForwardTrace, PromptSet,
    TokenSequence,
};
pub use engine::{
    pretrain_backbone, ClassEnergy, Engine, InferOutcome, NcmScope, PretrainConfig,
    PretrainReport, RunOutcome, RunVariant, SessionRecord, TaskEval, TaskTrainReport, TrainConfig,
};
pub use error::{CppError, Result};
pub use linalg::{cosine_sim, l2_normalize, log_sum_exp, pairwise_cosine, Matrix, Vector};
pub use neck_loss::{
    augment_prototype, cpl_backward, cpl_grad_similarities, cpl_loss, variant_loss, CplVariant,
    LinearHead, LossBatch, MlpNeck,
};
pub use metrics::{energy, memory_per_class, run_report, AccuracyMatrix, Protocol, RunSummary};
pub use optim::{AdamW, CosineSchedule};
pub use rng::SplitRng;
pub use store::{class_mean, multi_centroid, ClassRecord, PrototypeStore};
pub use streams::{
    generate, jitter_augment, preset, ClassSpec, GeneratorKind, MaterializedStream, Sample,
    TaskData, TaskStream,
};
