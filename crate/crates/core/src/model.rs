//! State-space form `ẋ = A x − B F(C x)` of the structure-preserving model.
//!
//! The deviation state is `x = [x1, x2, x3]`: generator angle deviations,
//! generator speeds, load angle deviations. Generators precede loads
//! everywhere.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::PowerNetwork;
use crate::powerflow;

/// Residual an equilibrium must meet before matrices are assembled.
pub const ASSEMBLY_TOL: f64 = 1e-8;

/// Absolute angles of all buses and speeds of the generators.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub angles: DVector<f64>,
    pub velocities: DVector<f64>,
}

impl State {
    pub fn new(angles: DVector<f64>, velocities: DVector<f64>) -> Self {
        Self { angles, velocities }
    }

    pub fn at_rest(angles: DVector<f64>, generators: usize) -> Self {
        Self {
            angles,
            velocities: DVector::zeros(generators),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.angles.iter().chain(self.velocities.iter()).all(|v| v.is_finite())
    }

    /// `[angles; velocities]`.
    pub fn to_flat(&self) -> DVector<f64> {
        let n = self.angles.len();
        let m = self.velocities.len();
        DVector::from_iterator(n + m, self.angles.iter().chain(self.velocities.iter()).copied())
    }

    pub fn from_flat(z: &DVector<f64>, n: usize) -> Self {
        let m = z.len() - n;
        Self {
            angles: z.rows(0, n).into_owned(),
            velocities: z.rows(n, m).into_owned(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub num_buses: usize,
    pub num_generators: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Diagonal of `S`: `a_kj` in edge order.
    pub s: DVector<f64>,
    /// Edge-to-bus incidence, `+1` at the lower-id bus.
    pub incidence: DMatrix<f64>,
    /// Diagonal of `M`: inertias of generators then dampings of loads.
    pub m: DVector<f64>,
    pub m1: DVector<f64>,
    pub d1: DVector<f64>,
    /// Dampings of all buses.
    pub damping: DVector<f64>,
    /// Bus ids per edge, lower id first.
    pub edge_order: Vec<(u32, u32)>,
    /// Bus positions per edge.
    pub edge_endpoints: Vec<(usize, usize)>,
    /// `V_k V_j` per edge.
    pub voltage_products: Vec<f64>,
    pub equilibrium: DVector<f64>,
    /// `δ*_kj` per edge.
    pub edge_angles: DVector<f64>,
}

impl SystemMatrices {
    pub fn state_dim(&self) -> usize {
        self.num_buses + self.num_generators
    }

    pub fn num_edges(&self) -> usize {
        self.edge_order.len()
    }

    /// Index of bus `pos`'s angle inside the deviation state.
    pub fn angle_slot(&self, pos: usize) -> usize {
        if pos < self.num_generators {
            pos
        } else {
            self.num_generators + pos
        }
    }

    /// Edges whose both endpoints are generators.
    pub fn generator_edges(&self) -> Vec<usize> {
        self.edge_endpoints
            .iter()
            .enumerate()
            .filter(|(_, &(k, j))| k < self.num_generators && j < self.num_generators)
            .map(|(e, _)| e)
            .collect()
    }

    /// `B` for an arbitrary coupling vector on this edge set.
    pub fn input_matrix(&self, coupling: &[f64]) -> DMatrix<f64> {
        input_matrix(
            &self.incidence,
            &self.m,
            self.num_generators,
            coupling,
        )
    }

    /// Direction along which every angle shifts uniformly. `C v = 0` and
    /// `A v = 0`, so `vᵀ L v = 0` for every Lyapunov LMI built on these
    /// matrices.
    pub fn gauge_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.state_dim());
        for pos in 0..self.num_buses {
            v[self.angle_slot(pos)] = 1.0;
        }
        v
    }

    /// Weights `q` of the conserved quantity `qᵀx = Σ_gen m ω + Σ_all d δ`.
    pub fn gauge_weights(&self) -> DVector<f64> {
        let g = self.num_generators;
        let mut q = DVector::zeros(self.state_dim());
        for pos in 0..self.num_buses {
            q[self.angle_slot(pos)] = self.damping[pos];
        }
        for i in 0..g {
            q[g + i] = self.m1[i];
        }
        q
    }

    /// Deviation from the equilibrium without any gauge shift.
    pub fn raw_deviation(&self, state: &State) -> DVector<f64> {
        let g = self.num_generators;
        let mut x = DVector::zeros(self.state_dim());
        for pos in 0..self.num_buses {
            x[self.angle_slot(pos)] = state.angles[pos] - self.equilibrium[pos];
        }
        for i in 0..g {
            x[g + i] = state.velocities[i];
        }
        x
    }

    /// Deviation from the member of the equilibrium family `δ* + c·1` that a
    /// trajectory through `state` converges to: the shift is chosen so that
    /// the conserved quantity `qᵀx` vanishes.
    pub fn deviation(&self, state: &State) -> DVector<f64> {
        let x = self.raw_deviation(state);
        let v = self.gauge_vector();
        let q = self.gauge_weights();
        let shift = q.dot(&x) / q.dot(&v);
        x - v * shift
    }

    /// Absolute state for a deviation `x`.
    pub fn absolute(&self, x: &DVector<f64>) -> State {
        let g = self.num_generators;
        let angles = DVector::from_iterator(
            self.num_buses,
            (0..self.num_buses).map(|pos| self.equilibrium[pos] + x[self.angle_slot(pos)]),
        );
        State::new(angles, x.rows(g, g).into_owned())
    }

    /// `F(Cx)`: `sin(δ*_kj + (Cx)_kj) − sin δ*_kj` per edge.
    pub fn nonlinearity(&self, x: &DVector<f64>) -> DVector<f64> {
        let cx = &self.c * x;
        DVector::from_iterator(
            self.num_edges(),
            cx.iter()
                .zip(self.edge_angles.iter())
                .map(|(&z, &d)| (d + z).sin() - d.sin()),
        )
    }

    pub fn bilinear_rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.b * self.nonlinearity(x)
    }

    /// `|δ_kj| ≤ π/2` on every edge for the absolute angles implied by `x`.
    pub fn in_polytope(&self, x: &DVector<f64>) -> bool {
        let cx = &self.c * x;
        cx.iter()
            .zip(self.edge_angles.iter())
            .all(|(&z, &d)| (d + z).abs() <= FRAC_PI_2)
    }
}

fn input_matrix(incidence: &DMatrix<f64>, m: &DVector<f64>, generators: usize, coupling: &[f64]) -> DMatrix<f64> {
    let n = m.len();
    let ne = coupling.len();
    // M⁻¹ Eᵀ S, then stack [0; S1 ·; S2 ·]
    let mut core = incidence.transpose();
    for e in 0..ne {
        for k in 0..n {
            core[(k, e)] *= coupling[e] / m[k];
        }
    }
    let mut b = DMatrix::zeros(n + generators, ne);
    b.view_mut((generators, 0), (n, ne)).copy_from(&core);
    b
}

pub fn assemble_matrices(net: &PowerNetwork, equilibrium: &DVector<f64>) -> Result<SystemMatrices> {
    let n = net.num_buses();
    let g = net.num_generators();
    if equilibrium.len() != n {
        return Err(Error::Dimension(format!(
            "equilibrium has {} angles for {n} buses",
            equilibrium.len()
        )));
    }
    let residual = powerflow::residual(net, equilibrium).amax();
    if residual > ASSEMBLY_TOL {
        return Err(Error::EquilibriumResidual {
            residual,
            tolerance: ASSEMBLY_TOL,
        });
    }
    let buses = net.buses();
    let endpoints = net.edge_endpoints();
    let ne = endpoints.len();
    let dim = n + g;

    let m = DVector::from_iterator(
        n,
        buses
            .iter()
            .map(|b| if b.is_generator() { b.inertia.unwrap() } else { b.damping }),
    );
    let m1 = m.rows(0, g).into_owned();
    let d1 = DVector::from_iterator(g, buses[..g].iter().map(|b| b.damping));
    let damping = DVector::from_iterator(n, buses.iter().map(|b| b.damping));

    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..g {
        a[(i, g + i)] = 1.0;
        a[(g + i, g + i)] = -d1[i] / m1[i];
    }

    let mut incidence = DMatrix::zeros(ne, n);
    for (e, &(k, j)) in endpoints.iter().enumerate() {
        incidence[(e, k)] = 1.0;
        incidence[(e, j)] = -1.0;
    }
    let slot = |pos: usize| if pos < g { pos } else { g + pos };
    let mut c = DMatrix::zeros(ne, dim);
    for (e, &(k, j)) in endpoints.iter().enumerate() {
        c[(e, slot(k))] = 1.0;
        c[(e, slot(j))] = -1.0;
    }

    let coupling = net.coupling_coefficients();
    let b = input_matrix(&incidence, &m, g, &coupling);
    let edge_angles = DVector::from_iterator(
        ne,
        endpoints.iter().map(|&(k, j)| equilibrium[k] - equilibrium[j]),
    );

    Ok(SystemMatrices {
        num_buses: n,
        num_generators: g,
        a,
        b,
        c,
        s: DVector::from_vec(coupling),
        incidence,
        m,
        m1,
        d1,
        damping,
        edge_order: net.lines().iter().map(|l| l.key()).collect(),
        edge_endpoints: endpoints,
        voltage_products: net.voltage_products(),
        equilibrium: equilibrium.clone(),
        edge_angles,
    })
}

/// Sector slope `(1 − sin γ)/(π/2 − γ)` for a uniform bound `|δ*_kj| ≤ γ`.
///
/// The bound is read with an absolute value. At `γ = 0` this is `2/π`.
pub fn uniform_sector_gain(gamma: f64) -> Result<f64> {
    if !(0.0..FRAC_PI_2).contains(&gamma) {
        return Err(Error::InvalidInput(format!(
            "gamma must lie in [0, pi/2), got {gamma}"
        )));
    }
    Ok((1.0 - gamma.sin()) / (FRAC_PI_2 - gamma))
}

/// `min_e (1 − sin|δ*_e|)/(π/2 − |δ*_e|)` over the given edge angles.
pub fn sector_gain_for_angles(edge_angles: &[f64], edge_order: &[(u32, u32)]) -> Result<f64> {
    let mut g = 2.0 / std::f64::consts::PI;
    for (e, &d) in edge_angles.iter().enumerate() {
        if !(d.abs() < FRAC_PI_2) {
            return Err(Error::OutsidePolytope {
                edge: edge_order.get(e).copied().unwrap_or((0, 0)),
                angle: d.abs(),
            });
        }
        g = g.min((1.0 - d.abs().sin()) / (FRAC_PI_2 - d.abs()));
    }
    Ok(g)
}

pub fn sector_gain(mats: &SystemMatrices) -> Result<f64> {
    sector_gain_for_angles(mats.edge_angles.as_slice(), &mats.edge_order)
}

/// Largest `|δ*_kj|`, i.e. the tightest uniform `γ` for this equilibrium.
pub fn max_edge_angle(mats: &SystemMatrices) -> f64 {
    mats.edge_angles.amax()
}
