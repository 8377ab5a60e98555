//! Decoupled skeleton/shape parametric body-mesh engine.
//!
//! Surface shape lives in vertex space and never moves joints; skeletal
//! attributes (per-joint log2 scales and bone-length offsets) enter forward
//! kinematics directly. Posed meshes come from linear blend skinning of the
//! shaped template plus sparse non-linear pose correctives.

#![allow(clippy::type_complexity, clippy::needless_range_loop)]

pub mod autodiff;
pub mod correctives;
pub mod error;
pub mod fitting;
pub mod io;
pub mod kinematics;
pub mod math;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prior;
pub mod rig;
pub mod shape;
pub mod skinning;
pub mod training;

pub use error::{Error, Result};
