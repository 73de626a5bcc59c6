//! Desk-scale laboratory for studying redundancy in low-light enhancement
//! networks.
//!
//! The crate bundles a small reverse-mode differentiation engine
//! ([`numerics`]), orthogonal parameter generation ([`pog`]), attention
//! reallocation ([`adr`]), a candidate-weighting dynamic convolution
//! baseline ([`dynbaseline`]), the parameter-reset probing protocol and
//! redundancy metric ([`redundancy`]), a toy U-shaped enhancer ([`model`]),
//! a synthetic paired corpus ([`datagen`]), and the checkpoint/config
//! persistence used by the command-line front end ([`checkpoint`],
//! [`config`]).

pub mod adr;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dynbaseline;
pub mod error;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pog;
pub mod redundancy;

pub use error::{Error, Result};
pub use numerics::{Rng, Tape, Tensor, Var};
pub use params::{ParamRole, ParamVars, Parameterized};
