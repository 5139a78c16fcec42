//! Minimal convolutional network machinery: parameters, a stride-1
//! convolution and a reverse-mode tape.

mod conv;
mod graph;
mod params;

pub use conv::{conv2d_backward, conv2d_forward, Activation};
pub use graph::{Eager, Graph, NodeId, Tape};
pub use params::{Conv2d, Param, ParamGroup, ParamId, ParamStore};
