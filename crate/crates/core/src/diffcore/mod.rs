//! Dense tensors with reverse-mode gradients, a seeded parameter store, the
//! momentum optimizer, checkpoints and a central-difference gradient checker.

pub mod checkpoint;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Sgd, SgdConfig};
pub use params::{Init, ParamId, Parameter, ParameterStore};
pub use tape::{Gradients, NodeId, Tape, LAYER_NORM_EPS};
