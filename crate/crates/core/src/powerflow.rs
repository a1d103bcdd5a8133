//! Equilibria of the lossless network: `Σ_j a_kj sin(δ_k − δ_j) = P_k`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::PowerNetwork;

/// Residual a returned equilibrium is guaranteed to meet.
pub const EQUILIBRIUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub angles: DVector<f64>,
    /// Max abs mismatch.
    pub residual: f64,
    pub iterations: usize,
    /// `|δ*_kj| < π/2` on every edge.
    pub in_polytope: bool,
}

impl EquilibriumResult {
    /// `δ*_kj` in edge order.
    pub fn differences(&self, net: &PowerNetwork) -> Vec<f64> {
        edge_differences(net, &self.angles)
    }
}

pub fn edge_differences(net: &PowerNetwork, angles: &DVector<f64>) -> Vec<f64> {
    net.edge_endpoints()
        .iter()
        .map(|&(k, j)| angles[k] - angles[j])
        .collect()
}

/// `y_k = P_k − Σ_j a_kj sin(δ_k − δ_j)`.
pub fn residual(net: &PowerNetwork, angles: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::from_vec(net.injections());
    for ((k, j), a) in net.edge_endpoints().into_iter().zip(net.coupling_coefficients()) {
        let flow = a * (angles[k] - angles[j]).sin();
        y[k] -= flow;
        y[j] += flow;
    }
    y
}

fn flow_jacobian(net: &PowerNetwork, angles: &DVector<f64>) -> DMatrix<f64> {
    let n = net.num_buses();
    let mut jac = DMatrix::zeros(n, n);
    for ((k, j), a) in net.edge_endpoints().into_iter().zip(net.coupling_coefficients()) {
        let w = a * (angles[k] - angles[j]).cos();
        jac[(k, k)] += w;
        jac[(j, j)] += w;
        jac[(k, j)] -= w;
        jac[(j, k)] -= w;
    }
    jac
}

pub fn solve_equilibrium(net: &PowerNetwork, initial_guess: Option<&DVector<f64>>) -> Result<EquilibriumResult> {
    solve_equilibrium_with(net, initial_guess, &NewtonOptions::default())
}

/// Damped Newton with bus 1 (the first bus in order) pinned to the initial
/// guess.
pub fn solve_equilibrium_with(
    net: &PowerNetwork,
    initial_guess: Option<&DVector<f64>>,
    opts: &NewtonOptions,
) -> Result<EquilibriumResult> {
    let n = net.num_buses();
    let mut angles = match initial_guess {
        Some(g) if g.len() == n => g.clone(),
        Some(g) => {
            return Err(Error::Dimension(format!(
                "initial guess has {} angles for {n} buses",
                g.len()
            )))
        }
        None => DVector::zeros(n),
    };
    if n == 1 {
        let r = residual(net, &angles).amax();
        return Ok(EquilibriumResult {
            angles,
            residual: r,
            iterations: 0,
            in_polytope: true,
        });
    }
    let scale = net
        .coupling_coefficients()
        .iter()
        .chain(net.injections().iter())
        .fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let target = 1e-14 * scale;

    let mut y = residual(net, &angles);
    let mut norm = y.amax();
    let mut iterations = 0;
    while norm > target && iterations < opts.max_iterations {
        iterations += 1;
        let jac = flow_jacobian(net, &angles);
        let reduced = jac.view((1, 1), (n - 1, n - 1)).into_owned();
        let rhs = y.rows(1, n - 1).into_owned();
        let step = match reduced.clone().lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                let rank = reduced.svd(false, false).rank(1e-12 * scale);
                return Err(Error::SingularJacobian { rank, size: n - 1 });
            }
        };
        let mut alpha = 1.0;
        let mut candidate = angles.clone();
        let mut cand_y = y.clone();
        let mut cand_norm = f64::INFINITY;
        for _ in 0..=opts.max_halvings {
            candidate = angles.clone();
            for i in 1..n {
                candidate[i] += alpha * step[i - 1];
            }
            cand_y = residual(net, &candidate);
            cand_norm = cand_y.amax();
            if cand_norm < norm {
                break;
            }
            alpha *= 0.5;
        }
        if !(cand_norm < norm) {
            // no descent: at the round-off floor or stuck
            break;
        }
        angles = candidate;
        y = cand_y;
        norm = cand_norm;
    }

    if !(norm <= EQUILIBRIUM_TOL) {
        return Err(Error::NewtonDivergence {
            iterations,
            residual: norm,
        });
    }
    let in_polytope = edge_differences(net, &angles).iter().all(|d| d.abs() < FRAC_PI_2);
    Ok(EquilibriumResult {
        angles,
        residual: norm,
        iterations,
        in_polytope,
    })
}
