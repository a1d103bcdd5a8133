//! Fixed-step integration of the swing dynamics with a fault-on phase.
//!
//! During `[0, τ_clearing)` the tripped line is removed and tuned
//! susceptances are applied; at `τ_clearing` the base network is restored.
//! A sample always lands exactly on `τ_clearing`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{State, SystemMatrices};
use crate::network::PowerNetwork;

pub const DEFAULT_DT: f64 = 1e-3;

/// Raw swing-equation parameters. Built from a validated network, or
/// directly when a study needs parameters a network file would reject
/// (zero damping, for instance).
#[derive(Debug, Clone)]
pub struct SwingDynamics {
    pub num_buses: usize,
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    pub injection: Vec<f64>,
    /// `(k, j, a_kj)` by bus position.
    pub edges: Vec<(usize, usize, f64)>,
}

impl SwingDynamics {
    pub fn from_network(net: &PowerNetwork) -> Self {
        let buses = net.buses();
        Self {
            num_buses: buses.len(),
            inertia: buses.iter().filter_map(|b| b.inertia.filter(|_| b.is_generator())).collect(),
            damping: buses.iter().map(|b| b.damping).collect(),
            injection: buses.iter().map(|b| b.injection).collect(),
            edges: net
                .edge_endpoints()
                .into_iter()
                .zip(net.coupling_coefficients())
                .map(|((k, j), a)| (k, j, a))
                .collect(),
        }
    }

    pub fn num_generators(&self) -> usize {
        self.inertia.len()
    }

    /// Derivative of the flat state `[δ; ω]`.
    pub fn derivative(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.num_buses;
        let g = self.num_generators();
        let mut net_power = DVector::from_column_slice(&self.injection);
        for &(k, j, a) in &self.edges {
            let flow = a * (z[k] - z[j]).sin();
            net_power[k] -= flow;
            net_power[j] += flow;
        }
        let mut dz = DVector::zeros(n + g);
        for k in 0..g {
            let w = z[n + k];
            dz[k] = w;
            dz[n + k] = (net_power[k] - self.damping[k] * w) / self.inertia[k];
        }
        for k in g..n {
            dz[k] = net_power[k] / self.damping[k];
        }
        dz
    }

    /// Kinetic plus potential energy; conserved when damping is zero and no
    /// load buses exist.
    pub fn energy(&self, z: &DVector<f64>) -> f64 {
        let n = self.num_buses;
        let kinetic: f64 = self
            .inertia
            .iter()
            .enumerate()
            .map(|(k, m)| 0.5 * m * z[n + k] * z[n + k])
            .sum();
        let injected: f64 = self.injection.iter().enumerate().map(|(k, p)| p * z[k]).sum();
        let coupling: f64 = self.edges.iter().map(|&(k, j, a)| a * (z[k] - z[j]).cos()).sum();
        kinetic - injected - coupling
    }

    pub fn rk4_step(&self, z: &DVector<f64>, h: f64) -> DVector<f64> {
        let k1 = self.derivative(z);
        let k2 = self.derivative(&(z + &k1 * (0.5 * h)));
        let k3 = self.derivative(&(z + &k2 * (0.5 * h)));
        let k4 = self.derivative(&(z + &k3 * h));
        z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }
}

/// Time derivative of `state` under the structure-preserving dynamics.
/// `angles` of the result are `δ̇`, `velocities` are `δ̈` of generators.
pub fn rhs(net: &PowerNetwork, state: &State) -> State {
    let n = net.num_buses();
    let dz = SwingDynamics::from_network(net).derivative(&state.to_flat());
    State::from_flat(&dz, n)
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub base: PowerNetwork,
    /// Edge position of the tripped line.
    pub tripped_line: Option<usize>,
    /// `(edge position, susceptance)` applied during the fault.
    pub tuned_susceptances: Vec<(usize, f64)>,
    pub clearing_time: f64,
    pub t_end: f64,
    pub dt: f64,
}

impl ScenarioSpec {
    /// No fault: the base network throughout.
    pub fn steady(base: PowerNetwork, t_end: f64, dt: f64) -> Self {
        Self {
            base,
            tripped_line: None,
            tuned_susceptances: Vec::new(),
            clearing_time: 0.0,
            t_end,
            dt,
        }
    }

    pub fn has_fault(&self) -> bool {
        self.tripped_line.is_some() || !self.tuned_susceptances.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(Error::InvalidInput(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        let lines = self.base.lines().len();
        if let Some(e) = self.tripped_line {
            if e >= lines {
                return Err(Error::InvalidInput(format!("tripped line {e} not in network")));
            }
        }
        for &(e, _) in &self.tuned_susceptances {
            if e >= lines {
                return Err(Error::InvalidInput(format!("tuned line {e} not in network")));
            }
        }
        if self.has_fault() {
            let tau = self.clearing_time;
            if !(tau.is_finite() && tau >= 0.0 && tau <= self.t_end) {
                return Err(Error::InvalidInput(format!(
                    "clearing time must lie in [0, t_end], got {tau}"
                )));
            }
            if tau > 0.0 && self.dt > tau / 10.0 * (1.0 + 1e-12) {
                return Err(Error::InvalidInput(format!(
                    "dt = {} exceeds clearing_time/10 = {}",
                    self.dt,
                    tau / 10.0
                )));
            }
        }
        Ok(())
    }

    /// Network in force during `[0, τ_clearing)`.
    pub fn fault_network(&self) -> Result<PowerNetwork> {
        let tuned = self.base.with_susceptances(&self.tuned_susceptances)?;
        match self.tripped_line {
            Some(e) => tuned.without_line(e),
            None => Ok(tuned),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub lyapunov: Option<Vec<f64>>,
    /// Sample indices where the fault-on phase ends (the clearing sample).
    pub phase_marks: Vec<usize>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn clearing_index(&self) -> Option<usize> {
        self.phase_marks.first().copied()
    }

    /// Fills `lyapunov` with `xᵀPx`, `x` the gauge-aligned deviation from
    /// `mats.equilibrium`.
    pub fn attach_lyapunov(&mut self, p: &DMatrix<f64>, mats: &SystemMatrices) {
        self.lyapunov = Some(
            self.states
                .iter()
                .map(|s| {
                    let x = mats.deviation(s);
                    x.dot(&(p * &x))
                })
                .collect(),
        );
    }

    /// Earliest time from which `max |δ_kj − δ*_kj| < angle_tol` and
    /// `max |δ̇| < speed_tol` hold through the end, provided that stretch lasts
    /// at least `hold` seconds.
    pub fn converged_since(
        &self,
        endpoints: &[(usize, usize)],
        target_differences: &[f64],
        criteria: &Convergence,
    ) -> Option<f64> {
        let ok = |s: &State| {
            let angle_err = endpoints
                .iter()
                .zip(target_differences)
                .map(|(&(k, j), &d)| (s.angles[k] - s.angles[j] - d).abs())
                .fold(0.0, f64::max);
            angle_err < criteria.angle_tol && s.velocities.amax() < criteria.speed_tol
        };
        if self.diverged {
            return None;
        }
        let mut since = None;
        for (t, s) in self.times.iter().zip(&self.states).rev() {
            if ok(s) {
                since = Some(*t);
            } else {
                break;
            }
        }
        let t_end = *self.times.last()?;
        since.filter(|&t0| t_end - t0 >= criteria.hold)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.states[0].angles.len();
        let g = self.states[0].velocities.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("delta_{i}")));
        header.extend((1..=g).map(|i| format!("omega_{i}")));
        header.push("V".into());
        w.write_record(&header).map_err(csv_err)?;
        for (i, (t, s)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(s.angles.iter().map(f64::to_string));
            row.extend(s.velocities.iter().map(f64::to_string));
            row.push(self.lyapunov.as_ref().map(|v| v[i].to_string()).unwrap_or_default());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<csv>".into(),
            source,
        })
    }

    /// `(t, V)` pairs keeping every `stride`-th sample plus the phase marks
    /// and the last sample.
    pub fn lyapunov_series(&self, stride: usize) -> Vec<(f64, f64)> {
        let Some(v) = &self.lyapunov else {
            return Vec::new();
        };
        let stride = stride.max(1);
        let last = self.times.len() - 1;
        (0..=last)
            .filter(|&i| i % stride == 0 || i == last || self.phase_marks.contains(&i))
            .map(|i| (self.times[i], v[i]))
            .collect()
    }

    pub fn write_series_csv<W: Write>(&self, out: W, stride: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "V"]).map_err(csv_err)?;
        for (t, v) in self.lyapunov_series(stride) {
            w.write_record([t.to_string(), v.to_string()]).map_err(csv_err)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<csv>".into(),
            source,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io {
        path: "<csv>".into(),
        source: std::io::Error::other(e.to_string()),
    }
}

#[derive(Debug, Clone)]
pub struct Convergence {
    pub angle_tol: f64,
    pub speed_tol: f64,
    pub hold: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            angle_tol: 1e-3,
            speed_tol: 1e-4,
            hold: 1.0,
        }
    }
}

/// Integrates `dynamics` from `start` over `[t0, t1]` with steps of at most
/// `dt`; the last step is shortened to land on `t1`. Returns `false` on
/// blow-up.
fn integrate_phase(
    dynamics: &SwingDynamics,
    z: &mut DVector<f64>,
    t0: f64,
    t1: f64,
    dt: f64,
    uniform: bool,
    times: &mut Vec<f64>,
    states: &mut Vec<State>,
) -> bool {
    let n = dynamics.num_buses;
    let span = t1 - t0;
    if span <= 0.0 {
        return true;
    }
    let (steps, h) = if uniform {
        let steps = (span / dt - 1e-9).ceil().max(1.0) as usize;
        (steps, span / steps as f64)
    } else {
        let full = (span / dt + 1e-9).floor() as usize;
        let rem = span - full as f64 * dt;
        (if rem > 1e-9 * dt { full + 1 } else { full }, dt)
    };
    for k in 1..=steps {
        let t_next = if k == steps { t1 } else { t0 + k as f64 * h };
        let h_k = t_next - times.last().copied().unwrap_or(t0);
        let next = dynamics.rk4_step(z, h_k);
        if !next.iter().all(|v| v.is_finite()) {
            return false;
        }
        *z = next;
        times.push(t_next);
        states.push(State::from_flat(z, n));
    }
    true
}

pub fn simulate(spec: &ScenarioSpec, x0: &State) -> Result<Trajectory> {
    spec.validate()?;
    let n = spec.base.num_buses();
    let g = spec.base.num_generators();
    if x0.angles.len() != n || x0.velocities.len() != g {
        return Err(Error::Dimension(format!(
            "initial state has {}+{} entries, network needs {n}+{g}",
            x0.angles.len(),
            x0.velocities.len()
        )));
    }
    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    let mut phase_marks = Vec::new();
    let mut z = x0.to_flat();
    let mut diverged = !x0.is_finite();

    let post_start = if spec.has_fault() {
        let tau = spec.clearing_time;
        if tau > 0.0 {
            let faulted = SwingDynamics::from_network(&spec.fault_network()?);
            diverged = !integrate_phase(&faulted, &mut z, 0.0, tau, spec.dt, true, &mut times, &mut states);
        }
        if !diverged {
            phase_marks.push(times.len() - 1);
        }
        tau
    } else {
        0.0
    };
    if !diverged {
        let post = SwingDynamics::from_network(&spec.base);
        diverged = !integrate_phase(&post, &mut z, post_start, spec.t_end, spec.dt, false, &mut times, &mut states);
    }
    Ok(Trajectory {
        times,
        states,
        lyapunov: None,
        phase_marks,
        diverged,
    })
}

/// State at exactly `τ_clearing`.
pub fn fault_cleared_state(traj: &Trajectory) -> Result<State> {
    match traj.clearing_index() {
        Some(i) => Ok(traj.states[i].clone()),
        None if traj.diverged => Err(Error::SimulationDiverged {
            time: *traj.times.last().unwrap(),
        }),
        None => Err(Error::NoFaultPhase),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Bus, BusKind, Line};

    fn pair() -> PowerNetwork {
        PowerNetwork::new(
            vec![
                Bus {
                    id: 1,
                    kind: BusKind::Generator,
                    voltage: 1.0,
                    inertia: Some(2.0),
                    damping: 1.0,
                    injection: 0.3,
                },
                Bus {
                    id: 2,
                    kind: BusKind::Generator,
                    voltage: 1.0,
                    inertia: Some(2.0),
                    damping: 1.0,
                    injection: -0.3,
                },
            ],
            vec![Line {
                from: 1,
                to: 2,
                susceptance: 1.0,
                bounds: None,
            }],
        )
        .unwrap()
    }

    #[test]
    fn clearing_sample_is_exact() {
        let spec = ScenarioSpec {
            base: pair(),
            tripped_line: None,
            tuned_susceptances: vec![(0, 0.9)],
            clearing_time: 0.1,
            t_end: 0.5,
            dt: 0.003,
        };
        let x0 = State::at_rest(DVector::from_vec(vec![0.0, 0.0]), 2);
        let traj = simulate(&spec, &x0).unwrap();
        let i = traj.clearing_index().unwrap();
        assert_eq!(traj.times[i], 0.1);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*traj.times.last().unwrap(), 0.5);
        assert_eq!(traj.states[0], x0);
    }

    #[test]
    fn zero_clearing_time_returns_start() {
        let spec = ScenarioSpec {
            base: pair(),
            tripped_line: Some(0),
            tuned_susceptances: vec![],
            clearing_time: 0.0,
            t_end: 0.1,
            dt: 0.01,
        };
        let x0 = State::at_rest(DVector::from_vec(vec![0.1, -0.2]), 2);
        let traj = simulate(&spec, &x0).unwrap();
        assert_eq!(fault_cleared_state(&traj).unwrap(), x0);
    }

    #[test]
    fn no_fault_phase_is_an_error() {
        let spec = ScenarioSpec::steady(pair(), 0.1, 0.01);
        let x0 = State::at_rest(DVector::zeros(2), 2);
        let traj = simulate(&spec, &x0).unwrap();
        assert!(matches!(fault_cleared_state(&traj), Err(Error::NoFaultPhase)));
    }

    #[test]
    fn coarse_step_rejected() {
        let spec = ScenarioSpec {
            base: pair(),
            tripped_line: Some(0),
            tuned_susceptances: vec![],
            clearing_time: 0.1,
            t_end: 1.0,
            dt: 0.02,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn blow_up_truncates() {
        let dynamics = SwingDynamics {
            num_buses: 1,
            inertia: vec![1.0],
            damping: vec![1.0],
            injection: vec![f64::INFINITY],
            edges: vec![],
        };
        let mut z = DVector::zeros(2);
        let (mut t, mut s) = (vec![0.0], vec![State::from_flat(&z, 1)]);
        assert!(!integrate_phase(&dynamics, &mut z, 0.0, 1.0, 0.1, false, &mut t, &mut s));
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn csv_header_and_blank_v() {
        let spec = ScenarioSpec::steady(pair(), 0.02, 0.01);
        let traj = simulate(&spec, &State::at_rest(DVector::zeros(2), 2)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,delta_1,delta_2,omega_1,omega_2,V");
        assert!(lines.next().unwrap().ends_with(','));
    }
}
