//! Stochastic receding-horizon control of linear plants whose actuator
//! commands travel over a lossy (erasure) channel.
//!
//! The crate is organised bottom-up: [`model`] holds the plant and its
//! reachability data, [`lifting`] the stacked-horizon matrices, [`channel`]
//! the dropout models and transmission protocols, [`moments`] the saturated
//! noise statistics, [`smpc`] the policy optimisation problem, [`qp`] the
//! solver, and [`simulator`] the closed loop. [`config`] and [`experiment`]
//! drive whole experiments from a configuration file.

pub mod channel;
pub mod config;
pub mod error;
pub mod experiment;
pub mod lifting;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod qp;
pub mod simulator;
pub mod smpc;

pub use channel::{ChannelModel, MarkovChannel, Protocol};
pub use error::{Result, SmpcError};
pub use model::{LinearSystem, NoiseModel, ReachabilityData};
pub use moments::SaturationSpec;
pub use qp::{QuadraticProgram, SolveStatus, Solution, SolverSettings, WarmStart};
