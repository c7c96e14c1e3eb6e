//! Deterministic desk-scale simulator for multi-dimensional tensor
//! parallelism (1D/2D/2.5D/3D), ring self-attention, and zero-redundancy
//! sharded data parallelism.
//!
//! Every simulated transfer is decomposed into point-to-point sends and
//! counted in a [`comm::CommLedger`], so communication volumes can be
//! reconciled against closed-form cost models in [`analytic`]. All
//! arithmetic is 64-bit with fixed summation order; results are
//! bit-identical across runs and across both scheduler modes.

pub mod analytic;
pub mod comm;
pub mod mesh;
pub mod ring_attention;
pub mod tensor;
pub mod tp_linear;
pub mod zero;

pub use comm::{CommError, CommLedger, Scheduler};
pub use mesh::{CommGroup, DeviceMesh, MeshError, ParallelMode};
pub use tensor::{DenseTensor, Rng};
