//! The analysis transform as a loss network.

pub mod sr;
pub mod style;

pub use sr::{
    evaluate_sr, split_holdout, sr_perceptual_loss, sr_perceptual_var, train_sr, Discriminator, SrConfig, SrEpoch,
    SrEvaluation, SrGenerator, SrOutcome,
};
pub use style::{gram_matrix, gram_var, style_transfer, StyleConfig, StyleInit, StyleOutcome, StyleStep};
