//! A small CPU deep-learning engine for finger-vein identification: a two
//! stage convolutional network, an optional channel-then-spatial attention
//! block, and a softmax head, with every backward pass written by hand and
//! checked against finite differences.

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Shape4, Tensor, Tensor32, Tensor64};
