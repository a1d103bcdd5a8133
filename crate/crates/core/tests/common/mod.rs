#![allow(dead_code)]

use std::f64::consts::FRAC_PI_2;
use std::path::PathBuf;

use emctl_core::certifier::{self, block_reduction, riccati_form, state_reduction};
use emctl_core::linalg;
use emctl_core::simulator::{self, ScenarioSpec};
use emctl_core::{assemble_matrices, load_network, powerflow, PowerNetwork, State, SystemMatrices};
use nalgebra::{DMatrix, DVector};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn network(name: &str) -> PowerNetwork {
    load_network(fixture(name)).unwrap()
}

pub fn operating_point(net: &PowerNetwork) -> SystemMatrices {
    let eq = powerflow::solve_equilibrium(net, None).unwrap();
    assemble_matrices(net, &eq.angles).unwrap()
}

/// Minimum of `xᵀPx` on `cᵀx = b` by steepest descent inside the
/// hyperplane with exact line search.
pub fn hyperplane_min(p: &DMatrix<f64>, c: &DVector<f64>, b: f64) -> f64 {
    let cc = c.dot(c);
    let project = |v: &DVector<f64>| v - c * (c.dot(v) / cc);
    let mut x = c * (b / cc);
    for _ in 0..200_000 {
        let d = -project(&(p * &x * 2.0));
        let dd = d.dot(&d);
        if dd <= 1e-30 {
            break;
        }
        let curv = 2.0 * d.dot(&(p * &d));
        x += &d * (dd / curv);
    }
    x.dot(&(p * &x))
}

/// `V_min` from the hyperplane minimizer over generator edges and both signs.
pub fn vmin_oracle(p: &DMatrix<f64>, mats: &SystemMatrices) -> f64 {
    let mut best = f64::INFINITY;
    for e in mats.generator_edges() {
        let c = mats.c.row(e).transpose();
        for sigma in [1.0, -1.0] {
            best = best.min(hyperplane_min(p, &c, sigma * FRAC_PI_2 - mats.edge_angles[e]));
        }
    }
    best
}

/// Right-hand side of the absolute swing equations laid out as a deviation
/// derivative.
pub fn swing_rhs_as_deviation(net: &PowerNetwork, mats: &SystemMatrices, x: &DVector<f64>) -> DVector<f64> {
    let r = simulator::rhs(net, &mats.absolute(x));
    let g = mats.num_generators;
    let mut out = DVector::zeros(mats.state_dim());
    for pos in 0..mats.num_buses {
        out[mats.angle_slot(pos)] = r.angles[pos];
    }
    for i in 0..g {
        out[g + i] = r.velocities[i];
    }
    out
}

/// Observed convergence order of RK4 from three step sizes.
pub fn rk4_order(net: &PowerNetwork, x0: &State, t_end: f64, dt: f64) -> f64 {
    let end = |h: f64| {
        let spec = ScenarioSpec::steady(net.clone(), t_end, h);
        simulator::simulate(&spec, x0).unwrap().final_state().to_flat()
    };
    let (a, b, c) = (end(dt), end(dt / 2.0), end(dt / 4.0));
    ((&a - &b).norm() / (&b - &c).norm()).log2()
}

/// Signs of the reduced LMI block and of its Riccati form agree; `None`
/// when either eigenvalue is too close to zero to call.
pub fn schur_signs(mats: &SystemMatrices, b_bar: &DMatrix<f64>, g: f64, p: &DMatrix<f64>) -> Option<(bool, bool)> {
    let t = block_reduction(mats, b_bar.ncols());
    let s = state_reduction(mats);
    let l = certifier::lyapunov_block(&mats.a, &mats.b, b_bar, &mats.c, g, p);
    let r = riccati_form(&mats.a, &mats.b, b_bar, &mats.c, g, p);
    let ll = linalg::lambda_max(&linalg::symmetrize(&(t.transpose() * l * &t))).unwrap();
    let rr = linalg::lambda_max(&linalg::symmetrize(&(s.transpose() * r * &s))).unwrap();
    let tol = 1e-9 * (1.0 + p.norm());
    if ll.abs() < tol || rr.abs() < tol {
        return None;
    }
    Some((ll < 0.0, rr < 0.0))
}

/// Random symmetric matrix with entries in `[-1, 1)` from a flat sample.
pub fn symmetric_from(n: usize, values: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut it = values.iter().cycle();
    for i in 0..n {
        for j in i..n {
            let v = *it.next().unwrap();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `LLᵀ + shift·I` from a flat sample: positive definite.
pub fn spd_from(n: usize, values: &[f64], shift: f64) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    let mut it = values.iter().cycle();
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = *it.next().unwrap();
        }
    }
    &l * l.transpose() + DMatrix::identity(n, n) * shift
}

/// Sector condition `(F − g·y)(F − y) ≤ 0` for `F = sin(d + y) − sin d`.
pub fn sector_violation(d: f64, y: f64, g: f64) -> f64 {
    let f = (d + y).sin() - d.sin();
    (f - g * y) * (f - y)
}
