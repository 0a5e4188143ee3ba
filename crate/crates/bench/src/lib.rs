//! Inputs shared by the benchmarks.

use ddm_core::nn::{Heads, NetConfig, RestorationNet};
use ddm_core::{RngStream, Schedule, Tensor};

/// The desk network: 16×16 single-channel input, width 16, σ head.
pub fn desk_net(seed: u64) -> RestorationNet<f32> {
    let cfg = NetConfig {
        in_channels: 1,
        base_width: 16,
        time_embed_width: 32,
        dropout: 0.1,
        heads: Heads::MeanLogVar,
    };
    RestorationNet::new(cfg, &mut RngStream::new(seed)).expect("valid config")
}

pub fn desk_schedule() -> Schedule {
    Schedule::alpha_cosine(20).expect("positive horizon")
}

pub fn uniform(seed: u64, dims: &[usize]) -> Tensor<f32> {
    RngStream::new(seed).uniform(dims)
}
