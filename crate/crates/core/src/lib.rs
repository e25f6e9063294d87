//! Region-sliced structure/texture autoencoder toolkit.
//!
//! A compact generative autoencoder whose spatial latent is partitioned into
//! channel slices, one per semantic region. Training drives each slice to
//! control exactly one region, which is then measured with activeness maps
//! and harnessed for multi-class segmentation via masked forward passes.

pub mod autodiff;
pub mod data;
pub mod eval_disentangle;
pub mod eval_segment;
pub mod latent;
pub mod losses;
pub mod model;
pub mod nn;
pub mod render;
pub mod train;
pub mod util;

pub use latent::{LatentPair, NoiseLocus, Slice, SliceScheme, StructureTensor, TextureVector};
pub use model::{Autoencoder, Model, ModelConfig, ModelParams};
