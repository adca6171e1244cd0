//! The CPIPS perceptual distance built on the codec's analysis transform.

pub mod calibrate;
pub mod distance;
pub mod extractor;

pub use calibrate::{calibrate, calibrate_profiles, Calibration, CalibrationConfig, CalibrationSet, RankingHead};
pub use distance::{
    cpips_distance, cpips_layers, distance_profile, layer_distance, normalize_channelwise, profile_distance,
    DistanceReport, MetricWeights, NORM_EPS,
};
pub use extractor::{FeatureExtractor, PixelTaps};
