//! Metropolized normalizing-flow Markov kernels trained by auxiliary-ELBO
//! variational inference, with classical RWM, MALA and HMC kernels in the
//! same framework.

pub mod config;
pub mod density;
pub mod elbo;
pub mod error;
pub mod flows;
pub mod grad;
pub mod kernels;
pub mod rng;
pub mod sampler;
pub mod targets;
pub mod train;

pub use error::{Error, Result};
pub use flows::{FlowSpec, FlowStack, Transform};
pub use grad::{ParamTree, Tape};
pub use targets::{SharedTarget, TargetModel};
