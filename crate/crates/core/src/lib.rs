//! Simulation, learning, estimation and control for a torque-actuated double
//! inverted pendulum.
//!
//! The crate is organized as a pipeline:
//!
//! * [`dynamics`] — rigid-body model of the pendulum and a fixed-step
//!   Dormand–Prince integrator (the "true plant" everywhere else).
//! * [`tustin_net`] — a recurrent neural state-space model whose position
//!   update uses the trapezoidal (Tustin) rule and whose velocity update is a
//!   learned forward-Euler increment, with exact analytic derivatives.
//! * [`lqr`] — discrete-time LQR around the upright equilibrium, used to
//!   collect informative training data.
//! * [`training`] — dataset generation, the periodic `1 − cos` loss,
//!   truncated BPTT and Adam.
//! * [`estimation`] — EKF/UKF state estimation on the learned model and a
//!   joint UKF that additionally adapts the network's output layer online.
//! * [`mpc`] — box-constrained receding-horizon control on the learned model
//!   plus the closed-loop driver that ties everything together.
//! * [`config`] — experiment configuration (TOML) shared by the CLI.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod lqr;
pub mod mpc;
pub mod training;
pub mod tustin_net;

pub use config::ExperimentConfig;
pub use dynamics::{PendulumParams, PlantState, Torque};
pub use error::{Error, Result};
pub use estimation::{FilterChoice, FilterSetup, GaussianBelief, NoiseConfig, UkfConfig};
pub use mpc::{MpcConfig, MpcSolution};
pub use training::{Episode, Regime, TrainConfig};
pub use tustin_net::{MlpParams, NetState, TustinNetModel};
