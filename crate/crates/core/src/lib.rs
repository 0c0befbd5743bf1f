#![no_std]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod backbone;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod heads;
pub mod image;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod template;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
