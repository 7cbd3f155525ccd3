//! Unified visual tokenizer over a sparse 4D `(t, x, y, z)` token space.
//!
//! Images, videos and voxelized 3D assets are patchified into one
//! [`sparse4d::TokenSet`] representation, encoded by a shared transformer
//! with 4D rotary embeddings, and decoded back to pixels or Gaussian splats.

#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments
)]

pub mod autodiff;
pub mod codec;
pub mod error;
pub mod evalkit;
pub mod gsplat;
pub mod losses;
pub mod media;
pub mod nnet;
pub mod patchify;
pub mod quantize;
pub mod rope4d;
pub mod sparse4d;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
