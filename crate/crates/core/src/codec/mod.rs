//! The learned codec: transforms, entropy model, rANS coder and bitstream.

pub mod bitstream;
pub mod entropy;
pub mod gdn;
pub mod model;
pub mod rans;
pub mod spec;

pub use bitstream::{compress, decompress, entropy_code, entropy_decode, Compressed, StreamHeader};
pub use entropy::{
    estimate_bits, estimate_rate_bpp, likelihood, quantize, FactorizedPrior, LatentCode, LikelihoodModel, QuantMode,
    LIKELIHOOD_MIN,
};
pub use gdn::{gdn_forward, gdn_inverse_diagonal, GdnParams, BETA_MIN};
pub use model::{Analysis, Codec, FeatureStack, SIGMA_MIN};
pub use spec::{Activation, EncoderSpec, LayerSpec, Variant, BOTTLENECK_TAP};
