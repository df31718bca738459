//! Anchor-based Gaussian splatting with second-order feature augmentation.

pub mod anchor;
pub mod camera;
pub mod error;
pub mod heads;
pub mod image;
pub mod io;
pub mod loss;
pub mod mlp;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
