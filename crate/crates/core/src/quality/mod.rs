//! Reference metrics, 2AFC scoring, rate-distortion curves and BD deltas.

pub mod bd;
pub mod metrics;
pub mod rd;
pub mod synthetic;
pub mod twoafc;
pub mod unitary;

pub use bd::{bd_delta, bd_fits, BdMode, Fit};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use rd::{collect_rd_curve, LearnedCodec, RawStorage, RdCodec, RdCurve, RdPoint};
pub use synthetic::{synthetic_triplets, Distortion, Observer};
pub use twoafc::{credit, score_distances, two_afc_score, TripletRecord, TwoAfcTriplet};
pub use unitary::{orthonormal_from, unitary_preservation_check};
