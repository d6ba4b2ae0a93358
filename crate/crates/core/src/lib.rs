//! Hookean bead-spring chains in a dilute polymer solution: stochastic
//! chain dynamics, a kinetic Fokker–Planck solver with specular walls, an
//! Oseen flow solver driven by the Kramers stress, and the small-mass limit.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod chain_dynamics;
pub mod error;
pub mod flow;
pub mod fokker_planck;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod macro_limit;
pub mod oseen;
pub mod quadrature;
pub mod stress;

pub use chain_dynamics::{ChainParams, ChainState, Dynamics, Ensemble, StepOptions};
pub use error::{Error, Result};
pub use flow::{CellularFlow, VelocitySampler, ZeroFlow};
pub use geometry::{ConfigurationDomain, ConvexDomain, DomainKind};
pub use grid::TensorGrid;
pub use stress::StressField;
