//! Primitive layers: forward/backward kernels, parameter storage, the SGD
//! update, checkpoint files and finite-difference gradient checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod spec;

pub use gradcheck::{gradient_check, Differentiable, GradCheckReport, LayerChain};
pub use ops::{backward, forward, Cache, Forward, StatUpdate};
pub use optim::sgd_step;
pub use params::{Mode, Param, ParamStore, GDN_BETA_MIN};
pub use spec::{LayerSpec, ParamKind};
