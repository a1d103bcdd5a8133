//! Emergency control of lossless power networks: equilibrium analysis,
//! LMI-based stability certificates, and susceptance tuning during and after
//! line faults.

pub mod certifier;
pub mod error;
pub mod faulton;
pub mod linalg;
pub mod lmi;
pub mod model;
pub mod network;
pub mod postfault;
pub mod powerflow;
pub mod simulator;

pub use error::{Error, Result};
pub use model::{assemble_matrices, State, SystemMatrices};
pub use network::{load_network, PowerNetwork};
