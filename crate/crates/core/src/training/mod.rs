//! Optimization and evaluation: AdamW, cosine annealing, aligned-pair Mixup,
//! minority oversampling, and clip/video ACC and AUC.

pub mod ablation;
pub mod metrics;
pub mod mixup;
pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use metrics::{auc, auc_brute_force, Auc, Confusion};
pub use mixup::{mix_with_beta, mixup_pair};
pub use optim::{adamw_step, AdamW, AdamWConfig};
pub use sampler::build_epoch_plan;
pub use schedule::cosine_lr;
pub use trainer::{evaluate, train, EvalReport, TrainConfig, TrainOutcome};
