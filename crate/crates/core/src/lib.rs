//! Bidirectional selective state-space diffusion generator for stochastic
//! long-term dense action anticipation, with everything needed to train and
//! evaluate it on CPU: a small reverse-mode autodiff engine, the state-space
//! kernels, the diffusion process, a synthetic action-grammar corpus and the
//! anticipation metrics.

mod binio;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fastmath;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{Init, Tensor};
