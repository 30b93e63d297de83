//! Forward propagation of deep residual networks as a nonlinear multigrid
//! solve over the layer dimension, with layer-block parallel relaxation and
//! a training loop that can consume early-stopped (approximate) states.

pub mod architecture;
pub mod error;
pub mod idx;
pub mod mg;
pub mod numerics;
pub mod parallel;
pub mod resnet;
pub mod train;

pub use architecture::{InitSpec, NetworkSpec, TransformSpec};
pub use error::{Error, Result};
pub use mg::{
    build_hierarchy, mg_cycle, solve, solve_from, CycleReport, MgHierarchy, MgLevel, SolveOptions,
};
pub use numerics::{l2_norm, Activation, TransformKind, TransformParams};
pub use parallel::{make_partition, BlockPartition, BoundaryMessage, LayerExecutor, Transport};
pub use resnet::{
    apply_operator, sequential_forward, LayerArray, Propagator, ResidualArray, ResidualNetwork,
    SourceArray, StateArray,
};
