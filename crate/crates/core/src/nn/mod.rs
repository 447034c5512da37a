//! Parameter storage, layers and the optimizer shared by every network.

mod check;
mod layers;
mod optim;
mod params;

pub use check::{all_coords, param_gradient_error};
pub use layers::{norm_groups, timestep_embedding, Conv2d, CrossAttention, Downsample, GroupNorm, Linear, ResBlock, Upsample};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, Builder, ParamId, ParamStore};
