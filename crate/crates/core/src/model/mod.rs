//! The SpLIIF architecture: parameters, forward stages and checkpoints.

pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::SpliifConfig;
pub use forward::{decode, edsr_trunk, encode, field, forward, forward_full, fuse_topography, lift, ModelInputs};
pub use params::{param_layout, Conv, Dense, ParamVars, ResBlock, SpliifParams, Weights};
