//! Potential theory of spatially coupled systems: uncoupled density
//! evolution and its potentials, coupled iteration on `K`-dimensional
//! lattices, and the continuum gradient-flow limit.

// Negated comparisons are how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod continuum;
pub mod error;
pub mod lattice;
pub mod model;
pub mod numeric;
pub mod potential;
pub mod verify;

pub use continuum::{ContinuumField, EnergyRow, PdeOptions, PdeRun};
pub use error::{GscError, Result};
pub use lattice::{CouplingConfig, GscRun, HistoryRow, Init, LatticeField, RunLimits};
pub use model::{
    shipped_models, Chart, DomainBox, Matrix, ModelSpec, ProductModel, RegularBec, SystemModel,
    Tensor3, Vector, VectorState,
};
pub use potential::{
    FixedPoint, FixedPointReport, RegularBecFamily, Stability, ThresholdKind, ThresholdOptions,
};
pub use verify::InvariantCheck;
