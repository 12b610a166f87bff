//! Identity-loss training: batch-hard triplet and cross-entropy losses, PK
//! sampling, augmentation, SGD with a cosine schedule, checkpoints and the
//! step loop.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod optim;
pub mod sampler;
pub mod trainer;

pub use augment::{augment, AugmentConfig, Rect};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::TrainConfig;
pub use loss::{batch_hard_triplet, hinge, pairwise_distances, total_loss, LossTerms};
pub use optim::{cosine_lr, sgd_step, SgdConfig, SgdState};
pub use sampler::{pk_sample, BatchItem, IdentityIndex};
pub use trainer::{restore_model, StepLog, TrainData, Trainer};
