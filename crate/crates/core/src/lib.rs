//! Taylorized training laboratory.
//!
//! Truncated Taylor expansions of neural networks around their initialization,
//! trained side by side with the full network, plus the diagnostics used to
//! compare their trajectories.

pub mod data;
pub mod error;
pub mod exp;
pub mod jet;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use jet::{Elementary, Jet, ScalarSeries, MAX_ORDER};
pub use rng::{gaussian_fill, RngStream};
pub use tensor::Tensor;
pub use nn::{
    forward_full, forward_taylorized, init_params, loss_eval, ActivationKind, Architecture, InitScheme,
    LossKind, ModelKind, ParamSet,
};
pub use tape::{GradientMap, NodeId, Tape};
