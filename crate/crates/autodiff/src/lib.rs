//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! The engine is a tape: every operation appends a node holding its output
//! value and a backward closure. [`Graph::backward`] walks the tape in
//! reverse, accumulating gradients into leaves and [`Param`]s. Everything is
//! computed in `f64` on the CPU and is bit-deterministic for fixed inputs,
//! including under the `parallel` feature (work is partitioned so that no
//! reduction order depends on thread scheduling).

mod graph;
mod init;
mod nn;
mod ops;
mod optim;
pub mod par;
mod sum;

pub use graph::{Gradients, Graph, Param, Var};
pub use init::{he_normal, normal, zeros, Rng};
pub use nn::{AvgPool2d, Conv2d, Linear, Module};
pub use ops::{concat_c, PadMode};
pub use optim::{Adam, AdamState};
pub use sum::pairwise_sum;
