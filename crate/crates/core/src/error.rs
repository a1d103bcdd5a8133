use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("network graph is disconnected: buses {unreachable:?} unreachable from bus {root}")]
    Disconnected { root: u32, unreachable: Vec<u32> },

    #[error("power imbalance: sum of injections is {sum:.3e} p.u. (tolerance {tolerance:.0e})")]
    Imbalance { sum: f64, tolerance: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("equilibrium residual {residual:.3e} exceeds {tolerance:.0e}")]
    EquilibriumResidual { residual: f64, tolerance: f64 },

    #[error("equilibrium outside the polytope: |delta*_kj| = {angle:.6} >= pi/2 on edge {edge:?}")]
    OutsidePolytope { edge: (u32, u32), angle: f64 },

    #[error("newton iteration diverged after {iterations} iterations (residual {residual:.3e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("singular power-flow jacobian (gauge-deflated rank {rank} of {size})")]
    SingularJacobian { rank: usize, size: usize },

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    Asymmetric(f64),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("LMI infeasible: {0}")]
    Infeasible(String),

    #[error("simulation diverged at t = {time}")]
    SimulationDiverged { time: f64 },

    #[error("scenario has no fault phase")]
    NoFaultPhase,

    #[error("no feasible fault-on design after {restarts} restarts")]
    NoFeasibleDesign { restarts: usize },
}

impl Error {
    /// Numerical failures (as opposed to bad input) map to CLI exit code 2.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NewtonDivergence { .. }
                | Error::SingularJacobian { .. }
                | Error::NotPositiveDefinite
                | Error::Infeasible(_)
                | Error::SimulationDiverged { .. }
                | Error::NoFeasibleDesign { .. }
                | Error::OutsidePolytope { .. }
                | Error::EquilibriumResidual { .. }
        )
    }
}
