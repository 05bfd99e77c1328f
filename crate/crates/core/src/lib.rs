//! Unified visual tokens for images, volumes and video.
//!
//! Every input becomes a sequence of 2D planes. Planes are cut into patches,
//! embedded, merged 2×2 and pruned against the previous plane, then encoded
//! with 2D rotary attention and projected into a language model's embedding
//! space.

pub mod autograd;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod numkit;
pub mod pipeline;
pub mod projector;
pub mod rope2d;
pub mod synth;
pub mod tokred;
pub mod verify;
pub mod transformer;
pub mod vistream;

pub use error::{Error, Result};
pub use numkit::Matrix;
