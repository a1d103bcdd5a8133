//! Susceptance tuning during the fault-on stage.
//!
//! With `μ = τ_clearing / V_min`, the tuned network must satisfy
//!
//! ```text
//!   [[Ā(s)ᵀP̃ + P̃Ā(s) + ((1−g)²/4)CᵀC, P̃B̄(s)], [B̄(s)ᵀP̃, −I]] ⪯ 0,   P̃ ⪰ P,
//!   B̄(s) = [B(s), √μ·B(s)D_uv],
//! ```
//!
//! which is affine in `s` for fixed `P̃` and affine in `P̃` for fixed `s`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certifier::{self, block_reduction, lyapunov_block, Certificate, GaugeBasis};
use crate::error::{Error, Result};
use crate::linalg;
use crate::lmi::{self, AffineLmi, AffineMatrix, SolverOptions};
use crate::model::{State, SystemMatrices};
use crate::network::{format_line_key, parse_line_key, PowerNetwork, SusceptanceBounds};
use crate::simulator::{self, Convergence, ScenarioSpec, Trajectory};

pub const DEFAULT_RESTARTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignMode {
    /// `P̃ = P`, susceptances free.
    FixedMatrix,
    /// Susceptances at their base values, `P̃` free.
    FixedSusceptance,
}

impl std::str::FromStr for DesignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-matrix" => Ok(Self::FixedMatrix),
            "fixed-susceptance" => Ok(Self::FixedSusceptance),
            _ => Err(Error::InvalidInput(format!(
                "mode must be fixed-matrix or fixed-susceptance, got {s:?}"
            ))),
        }
    }
}

/// Which side of the bilinear condition is free.
#[derive(Debug, Clone)]
pub enum FaultOnVariables<'a> {
    /// Variables are the susceptances of these edges, in order.
    Susceptances { p_tilde: &'a DMatrix<f64>, lines: &'a [usize] },
    /// Variables are `P̃` on the gauge basis (plus the conserved direction);
    /// `values` fixes the adjustable susceptances.
    Matrix { values: &'a [(usize, f64)] },
    /// Both sides free: bilinear, rejected.
    Both,
}

#[derive(Debug, Clone)]
pub struct FaultOnLmi {
    pub lmi: AffineLmi,
    pub extra: Vec<AffineMatrix>,
    pub basis: Option<GaugeBasis>,
}

/// Couplings `a_e` with the listed edges set to `V_kV_j·B`.
fn couplings(mats: &SystemMatrices, overrides: &[(usize, f64)]) -> Vec<f64> {
    let mut a: Vec<f64> = mats.s.iter().copied().collect();
    for &(e, b) in overrides {
        a[e] = mats.voltage_products[e] * b;
    }
    a
}

/// Full fault-on block for given couplings and `P̃`.
pub fn faulton_block(
    mats: &SystemMatrices,
    coupling: &[f64],
    tripped: usize,
    g: f64,
    mu: f64,
    p_tilde: &DMatrix<f64>,
) -> DMatrix<f64> {
    let b = mats.input_matrix(coupling);
    let b_bar = bar_matrix(&b, tripped, mu);
    lyapunov_block(&mats.a, &b, &b_bar, &mats.c, g, p_tilde)
}

/// `[B, √μ·B D_uv]`.
pub fn bar_matrix(b: &DMatrix<f64>, tripped: usize, mu: f64) -> DMatrix<f64> {
    let ne = b.ncols();
    let mut out = DMatrix::zeros(b.nrows(), ne + 1);
    out.view_mut((0, 0), (b.nrows(), ne)).copy_from(b);
    out.set_column(ne, &(b.column(tripped) * mu.sqrt()));
    out
}

pub fn build_faulton_lmi(
    mats: &SystemMatrices,
    vars: FaultOnVariables<'_>,
    g: f64,
    mu: f64,
    tripped: usize,
    p: &DMatrix<f64>,
) -> Result<FaultOnLmi> {
    if !(g > 0.0 && g <= 1.0) {
        return Err(Error::InvalidInput(format!("sector gain must lie in (0, 1], got {g}")));
    }
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::InvalidInput(format!("mu must be finite and >= 0, got {mu}")));
    }
    if tripped >= mats.num_edges() {
        return Err(Error::InvalidInput(format!("tripped edge {tripped} out of range")));
    }
    let t = block_reduction(mats, mats.num_edges() + 1);
    match vars {
        FaultOnVariables::Both => Err(Error::InvalidInput(
            "both P_tilde and the susceptances free makes the condition bilinear".into(),
        )),
        FaultOnVariables::Susceptances { p_tilde, lines } => {
            if lines.contains(&tripped) {
                return Err(Error::InvalidInput("the tripped line cannot be tuned".into()));
            }
            let zeroed: Vec<(usize, f64)> = lines.iter().map(|&e| (e, 0.0)).collect();
            let constant = faulton_block(mats, &couplings(mats, &zeroed), tripped, g, mu, p_tilde);
            let coefficients = lines
                .iter()
                .map(|&e| {
                    let unit: Vec<(usize, f64)> = lines.iter().map(|&l| (l, if l == e { 1.0 } else { 0.0 })).collect();
                    faulton_block(mats, &couplings(mats, &unit), tripped, g, mu, p_tilde) - &constant
                })
                .collect();
            let block = AffineMatrix::new(constant, coefficients)?.congruence(&t);
            Ok(FaultOnLmi {
                lmi: AffineLmi::new(block),
                extra: Vec::new(),
                basis: None,
            })
        }
        FaultOnVariables::Matrix { values } => {
            if values.iter().any(|&(e, _)| e == tripped) {
                return Err(Error::InvalidInput("the tripped line cannot be tuned".into()));
            }
            let a = couplings(mats, values);
            let basis = GaugeBasis::new(mats)?;
            let block = basis.lift(|pt| faulton_block(mats, &a, tripped, g, mu, pt), &t, true)?;
            // P̃ − P ⪰ εI, and a cap keeping the free directions bounded
            let mut dominance = basis.affine(true);
            dominance.constant = -linalg::symmetrize(p);
            let cap = p.trace() + certifier::TRACE_CAP_PER_STATE * mats.state_dim() as f64;
            Ok(FaultOnLmi {
                lmi: AffineLmi::new(block),
                extra: vec![dominance, basis.trace_cap(cap, true)],
                basis: Some(basis),
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdjustableLine {
    pub edge: usize,
    pub bounds: SusceptanceBounds,
}

/// Adjustable lines `keys` with a symmetric `±pct` % box around the base
/// susceptance.
pub fn percent_boxes(net: &PowerNetwork, keys: &[String], pct: f64) -> Result<Vec<AdjustableLine>> {
    if !(pct >= 0.0 && pct < 100.0) {
        return Err(Error::InvalidInput(format!("bound percentage must lie in [0, 100), got {pct}")));
    }
    keys.iter()
        .map(|k| {
            let edge = net.find_line(k)?;
            let b = net.lines()[edge].susceptance;
            Ok(AdjustableLine {
                edge,
                bounds: SusceptanceBounds {
                    min: b * (1.0 - pct / 100.0),
                    max: b * (1.0 + pct / 100.0),
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FaultOnProblem {
    pub network: PowerNetwork,
    pub mats: SystemMatrices,
    pub tripped: usize,
    pub adjustable: Vec<AdjustableLine>,
    pub clearing_time: f64,
    pub mode: DesignMode,
}

#[derive(Debug, Clone)]
pub struct DesignOptions {
    pub restarts: usize,
    pub seed: u64,
    /// Gain used when a certificate has to be synthesized.
    pub gain: f64,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FaultOnDesign {
    pub tripped: (u32, u32),
    /// `(edge position, susceptance)` for every adjustable line.
    pub tuned: Vec<(usize, f64)>,
    pub tuned_keys: Vec<(u32, u32)>,
    pub mu: f64,
    pub p_tilde: DMatrix<f64>,
    pub mode: DesignMode,
    /// `λ_max` of the reduced fault-on block at the solution.
    pub margin: f64,
    pub clearing_time: f64,
    pub certificate: Certificate,
    /// Restarts used (0 when the first certificate worked).
    pub restarts: usize,
}

/// One attempt with a fixed certificate; `Ok(None)` when infeasible.
pub fn design_with_certificate(problem: &FaultOnProblem, cert: &Certificate) -> Result<Option<FaultOnDesign>> {
    let mats = &problem.mats;
    let mu = problem.clearing_time / cert.v_min;
    let lines: Vec<usize> = problem.adjustable.iter().map(|l| l.edge).collect();
    let base: Vec<(usize, f64)> = lines
        .iter()
        .map(|&e| (e, problem.network.lines()[e].susceptance))
        .collect();
    let g = cert.g;
    let (tuned, p_tilde, sol) = match problem.mode {
        DesignMode::FixedMatrix => {
            let faulton_lmi = build_faulton_lmi(
                mats,
                FaultOnVariables::Susceptances {
                    p_tilde: &cert.p,
                    lines: &lines,
                },
                g,
                mu,
                problem.tripped,
                &cert.p,
            )?;
            let bounds = problem.adjustable.iter().map(|l| (l.bounds.min, l.bounds.max)).collect();
            let lmi = faulton_lmi.lmi.with_bounds(bounds);
            let sol = lmi::solve_feasibility(&lmi, &[], &SolverOptions::default())?;
            let tuned: Vec<(usize, f64)> = lines.iter().copied().zip(sol.variables.iter().copied()).collect();
            (tuned, cert.p.clone(), sol)
        }
        DesignMode::FixedSusceptance => {
            let faulton_lmi = build_faulton_lmi(mats, FaultOnVariables::Matrix { values: &base }, g, mu, problem.tripped, &cert.p)?;
            let sol = lmi::solve_feasibility(&faulton_lmi.lmi, &faulton_lmi.extra, &SolverOptions::default())?;
            let p_tilde = faulton_lmi.basis.as_ref().expect("matrix mode has a basis").matrix(&sol.variables);
            (base.clone(), p_tilde, sol)
        }
    };
    if !sol.is_feasible() {
        return Ok(None);
    }
    let report = recheck(problem, cert, &tuned, &p_tilde, mu)?;
    if !report {
        return Ok(None);
    }
    let full = faulton_block(mats, &couplings(mats, &tuned), problem.tripped, g, mu, &p_tilde);
    let t = block_reduction(mats, mats.num_edges() + 1);
    let margin = linalg::lambda_max(&linalg::symmetrize(&(t.transpose() * full * &t)))?;
    let lines_ref = problem.network.lines();
    Ok(Some(FaultOnDesign {
        tripped: lines_ref[problem.tripped].key(),
        tuned_keys: tuned.iter().map(|&(e, _)| lines_ref[e].key()).collect(),
        tuned,
        mu,
        p_tilde,
        mode: problem.mode,
        margin,
        clearing_time: problem.clearing_time,
        certificate: cert.clone(),
        restarts: 0,
    }))
}

/// Solver-independent check of a candidate: reduced fault-on block below `−ε`,
/// `P̃ ⪰ P − εI`, and box bounds.
fn recheck(
    problem: &FaultOnProblem,
    cert: &Certificate,
    tuned: &[(usize, f64)],
    p_tilde: &DMatrix<f64>,
    mu: f64,
) -> Result<bool> {
    let mats = &problem.mats;
    let full = faulton_block(mats, &couplings(mats, tuned), problem.tripped, cert.g, mu, p_tilde);
    let t = block_reduction(mats, mats.num_edges() + 1);
    let reduced = linalg::symmetrize(&(t.transpose() * &full * &t));
    let eps = lmi::DEFAULT_RELATIVE_EPSILON * linalg::max_abs(&full).max(1.0);
    let lmi_ok = linalg::lambda_max(&reduced)? <= -eps;
    let dominance_ok = linalg::lambda_min(&linalg::symmetrize(&(p_tilde - &cert.p)))? >= -eps;
    let bounds_ok = problem
        .adjustable
        .iter()
        .zip(tuned)
        .all(|(l, &(_, v))| v >= l.bounds.min && v <= l.bounds.max);
    Ok(lmi_ok && dominance_ok && bounds_ok)
}

/// Certificate, `V_min`, `μ`, then the fault-on LMI. On failure re-solves the certificate
/// with a seeded random centering and repeat.
pub fn design(problem: &FaultOnProblem, cert: Option<&Certificate>, opts: &DesignOptions) -> Result<FaultOnDesign> {
    if !(problem.clearing_time >= 0.0 && problem.clearing_time.is_finite()) {
        return Err(Error::InvalidInput("clearing time must be finite and >= 0".into()));
    }
    if problem.adjustable.is_empty() && problem.mode == DesignMode::FixedMatrix {
        return Err(Error::InvalidInput("fixed-matrix mode needs at least one adjustable line".into()));
    }
    for l in &problem.adjustable {
        if l.edge == problem.tripped {
            return Err(Error::InvalidInput("the tripped line cannot be tuned".into()));
        }
        if !(l.bounds.min > 0.0 && l.bounds.min <= l.bounds.max) {
            return Err(Error::InvalidInput(format!("empty or non-positive box for edge {}", l.edge)));
        }
    }
    let mut current = match cert {
        Some(c) => c.clone(),
        None => certifier::certify(&problem.mats, opts.gain, opts.gamma, None)?,
    };
    let g = current.g;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for attempt in 0..=opts.restarts {
        if attempt > 0 {
            let n = problem.mats.state_dim();
            let w = DVector::from_fn(n, |_, _| rng.gen_range(0.5..2.0));
            current = match certifier::certify(&problem.mats, g, current.gamma, Some(&w)) {
                Ok(c) => c,
                Err(e) if e.is_numerical() => continue,
                Err(e) => return Err(e),
            };
        }
        if let Some(mut d) = design_with_certificate(problem, &current)? {
            d.restarts = attempt;
            return Ok(d);
        }
    }
    Err(Error::NoFeasibleDesign {
        restarts: opts.restarts,
    })
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub dt: f64,
    pub t_end: f64,
    pub convergence: Convergence,
    /// Relative slack on the `1/μ` growth bound.
    pub rate_slack: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            dt: simulator::DEFAULT_DT,
            t_end: 20.0,
            convergence: Convergence::default(),
            rate_slack: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    /// Largest finite-difference `dṼ/dt` over fault-on steps inside the polytope.
    pub max_rate: f64,
    pub rate_bound: f64,
    pub rate_ok: bool,
    pub v_clearing: f64,
    pub v_min: f64,
    pub clearing_ok: bool,
    pub converged_at: Option<f64>,
    /// `V` (with `P`) along the whole run.
    pub trajectory: Trajectory,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.rate_ok && self.clearing_ok && self.converged_at.is_some()
    }
}

/// Scenario for a design, starting at rest at the equilibrium.
pub fn scenario(network: &PowerNetwork, design: &FaultOnDesign, dt: f64, t_end: f64) -> Result<ScenarioSpec> {
    let tripped = network
        .line_position(design.tripped.0, design.tripped.1)
        .ok_or_else(|| Error::InvalidInput("tripped line not in network".into()))?;
    Ok(ScenarioSpec {
        base: network.clone(),
        tripped_line: Some(tripped),
        tuned_susceptances: design.tuned.clone(),
        clearing_time: design.clearing_time,
        t_end,
        dt,
    })
}

/// Simulates the fault-on and post-fault stages and checks (a) the growth
/// bound `dṼ/dt ≤ 1/μ` inside the polytope, (b) `V(x(τ)) < V_min`, (c)
/// convergence back to `δ*`.
pub fn verify(
    network: &PowerNetwork,
    mats: &SystemMatrices,
    design: &FaultOnDesign,
    opts: &VerifyOptions,
) -> Result<VerifyReport> {
    let spec = scenario(network, design, opts.dt, opts.t_end)?;
    let x0 = State::at_rest(mats.equilibrium.clone(), mats.num_generators);
    let mut traj = simulator::simulate(&spec, &x0)?;
    let clearing = match traj.clearing_index() {
        Some(i) => i,
        None => {
            return Err(Error::SimulationDiverged {
                time: *traj.times.last().unwrap(),
            })
        }
    };
    let mut max_rate = f64::NEG_INFINITY;
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..=clearing {
        let x = mats.deviation(&traj.states[i]);
        let inside = mats.in_polytope(&x);
        let v = x.dot(&(&design.p_tilde * &x));
        if let (Some((t0, v0)), true) = (prev, inside) {
            max_rate = max_rate.max((v - v0) / (traj.times[i] - t0));
        }
        prev = inside.then_some((traj.times[i], v));
    }
    let rate_bound = if design.mu > 0.0 { 1.0 / design.mu } else { f64::INFINITY };
    traj.attach_lyapunov(&design.certificate.p, mats);
    let v_clearing = traj.lyapunov.as_ref().unwrap()[clearing];
    let converged_at = traj.converged_since(&mats.edge_endpoints, mats.edge_angles.as_slice(), &opts.convergence);
    Ok(VerifyReport {
        max_rate,
        rate_bound,
        rate_ok: max_rate <= rate_bound * (1.0 + opts.rate_slack),
        v_clearing,
        v_min: design.certificate.v_min,
        clearing_ok: v_clearing < design.certificate.v_min,
        converged_at,
        trajectory: traj,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DesignFile {
    pub tripped: String,
    pub tuned: BTreeMap<String, f64>,
    pub mu: f64,
    pub mode: DesignMode,
    pub margin: f64,
    pub clearing_time: f64,
}

impl FaultOnDesign {
    pub fn to_file(&self) -> DesignFile {
        DesignFile {
            tripped: format_line_key(self.tripped),
            tuned: self
                .tuned_keys
                .iter()
                .zip(&self.tuned)
                .map(|(&k, &(_, v))| (format_line_key(k), v))
                .collect(),
            mu: self.mu,
            mode: self.mode,
            margin: self.margin,
            clearing_time: self.clearing_time,
        }
    }
}

impl DesignFile {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("design serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        parse_line_key(&file.tripped)?;
        for k in file.tuned.keys() {
            parse_line_key(k)?;
        }
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}
