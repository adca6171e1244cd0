//! Classifier pre-training and joint rate, distortion and classification training.

pub mod config;
pub mod data;
pub mod head;
pub mod loss;
pub mod runner;

pub use config::{DatasetConfig, LrSchedule, Phase, TrainConfig, LAMBDA_BY_QUALITY};
pub use data::{synthetic, synthetic_image, Dataset};
pub use head::{accuracy_topk, classification_loss, ClassifierHead};
pub use loss::{batch_loss, joint_loss, BatchLoss, LossParts, ObjectiveWeights};
pub use runner::{evaluate, read_log, run_phase, run_phase_on, EpochRecord, Evaluation, TrainOutcome};
