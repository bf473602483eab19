//! Reverse-mode automatic differentiation on dense f64 tensors: the value
//! type, the tape, named parameter storage, Adam, and checkpoint I/O.

pub mod adam;
pub mod checkpoint;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{ParamStore, Parameter, TapeParams};
pub use tape::{NodeId, Tape, ABS_SMOOTH_EPS};
pub use tensor::Tensor;
