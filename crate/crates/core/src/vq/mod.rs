//! Vector-quantized autoencoders that turn images and BEV grids into token
//! grids and back.

mod autoencoder;
mod codebook;

pub use autoencoder::{
    bev_loss_terms, FrozenAssignment, ReconKind, VqAutoencoder, VqConfig, VqForward, VqStepStats,
    VqTrainer,
};
pub use codebook::{nearest_code, nearest_codes, Codebook};
