//! Dense numeric core: matrices and kernels, stacked LSTM layers with BPTT,
//! linear layers, the Adam optimizer and a finite-difference gradient oracle.
//!
//! Everything is generic over [`Scalar`] — `f32` for production speed (SIMD
//! kernels), `f64` for gradient verification. Forward and backward passes are
//! pure given parameters; only the optimizer mutates state.

mod adam;
mod dense;
pub mod gradcheck;
mod linalg;
mod lstm;
mod simd;

pub use adam::{Adam, AdamConfig};
pub use dense::{relu_backward, relu_mut, Linear, LinearGrads};
pub use linalg::{Mat, Scalar};
pub use lstm::{
    LayerTape, Lstm, LstmGrads, LstmStack, LstmState, StackGrads, StackState, StackTape,
    StepScratch,
};
