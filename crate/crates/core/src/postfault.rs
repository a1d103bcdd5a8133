//! Retuning susceptances so a static fault-cleared state lies inside the
//! certified region of a new post-fault equilibrium.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certifier::{self, block_reduction, certificate_block, Certificate, GaugeBasis, Verdict};
use crate::error::{Error, Result};
use crate::linalg;
use crate::lmi::{self, AffineLmi, AffineMatrix, SolverOptions};
use crate::model::{self, assemble_matrices, State, SystemMatrices};
use crate::network::{format_line_key, PowerNetwork, SusceptanceBounds};
use crate::powerflow::{self, EquilibriumResult};

pub const ADAPTATION_ROUNDS: usize = 20;
/// Projected-gradient stopping tolerance on the KKT residual.
pub const KKT_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Selection {
    /// Susceptances in the order of the adjustable lines.
    pub values: Vec<f64>,
    /// `Σ y_k²` at `values`.
    pub objective: f64,
    pub iterations: usize,
    /// Lines whose susceptance does not enter the objective.
    pub indeterminate: Vec<usize>,
}

/// Linear least-squares data: `y(b) = r0 − J b`.
struct Residual {
    r0: DVector<f64>,
    j: DMatrix<f64>,
}

fn residual_model(net: &PowerNetwork, lines: &[usize], desired: &DVector<f64>) -> Residual {
    let n = net.num_buses();
    let endpoints = net.edge_endpoints();
    let coupling = net.coupling_coefficients();
    let vv = net.voltage_products();
    let mut r0 = DVector::from_vec(net.injections());
    for (e, &(k, j)) in endpoints.iter().enumerate() {
        if lines.contains(&e) {
            continue;
        }
        let flow = coupling[e] * (desired[k] - desired[j]).sin();
        r0[k] -= flow;
        r0[j] += flow;
    }
    let mut jac = DMatrix::zeros(n, lines.len());
    for (col, &e) in lines.iter().enumerate() {
        let (k, j) = endpoints[e];
        let w = vv[e] * (desired[k] - desired[j]).sin();
        jac[(k, col)] += w;
        jac[(j, col)] -= w;
    }
    Residual { r0, j: jac }
}

fn objective(res: &Residual, b: &DVector<f64>) -> f64 {
    (&res.r0 - &res.j * b).norm_squared()
}

fn project(b: &DVector<f64>, boxes: &[SusceptanceBounds]) -> DVector<f64> {
    DVector::from_iterator(b.len(), b.iter().zip(boxes).map(|(v, bx)| v.clamp(bx.min, bx.max)))
}

/// Largest violation of the box KKT conditions: `|proj(b − ∇f) − b|_∞`.
pub fn kkt_residual(net: &PowerNetwork, lines: &[usize], boxes: &[SusceptanceBounds], desired: &DVector<f64>, values: &[f64]) -> f64 {
    let res = residual_model(net, lines, desired);
    let b = DVector::from_column_slice(values);
    let grad = res.j.transpose() * (&res.j * &b - &res.r0) * 2.0;
    (project(&(&b - grad), boxes) - b).amax()
}

/// Minimizes `Σ_k (P_k − Σ_j V_kV_jB_kj sin δ_desired,kj)²` over the box by
/// projected gradient with exact line search. Lines with no influence on
/// the objective are put at the middle of their interval.
pub fn select_susceptances(
    net: &PowerNetwork,
    lines: &[usize],
    boxes: &[SusceptanceBounds],
    desired: &DVector<f64>,
) -> Result<Selection> {
    if lines.len() != boxes.len() {
        return Err(Error::Dimension(format!("{} lines but {} boxes", lines.len(), boxes.len())));
    }
    if desired.len() != net.num_buses() {
        return Err(Error::Dimension(format!(
            "desired angles have {} entries for {} buses",
            desired.len(),
            net.num_buses()
        )));
    }
    for (e, bx) in lines.iter().zip(boxes) {
        if *e >= net.lines().len() {
            return Err(Error::InvalidInput(format!("no line at position {e}")));
        }
        if !(bx.min <= bx.max) || !(bx.min > 0.0) {
            return Err(Error::InvalidInput(format!(
                "empty or non-positive box [{}, {}] for line {}",
                bx.min,
                bx.max,
                format_line_key(net.lines()[*e].key())
            )));
        }
    }
    let res = residual_model(net, lines, desired);
    let scale = res.j.amax().max(res.r0.amax()).max(1.0);
    let indeterminate: Vec<usize> = (0..lines.len())
        .filter(|&c| res.j.column(c).amax() <= 1e-14 * scale)
        .collect();
    let mut b = DVector::from_iterator(lines.len(), boxes.iter().map(|bx| 0.5 * (bx.min + bx.max)));

    let h = res.j.transpose() * &res.j * 2.0;
    let lipschitz = linalg::lambda_max(&linalg::symmetrize(&h))?;
    let mut iterations = 0;
    if lipschitz > 0.0 {
        let active: Vec<usize> = (0..lines.len()).filter(|c| !indeterminate.contains(c)).collect();
        for _ in 0..100_000 {
            let grad = res.j.transpose() * (&res.j * &b - &res.r0) * 2.0;
            let mut trial = &b - &grad / lipschitz;
            for &c in &indeterminate {
                trial[c] = b[c];
            }
            let trial = project(&trial, boxes);
            let d = &trial - &b;
            let kkt = {
                let mut full = project(&(&b - &grad), boxes) - &b;
                for &c in &indeterminate {
                    full[c] = 0.0;
                }
                full.amax()
            };
            if kkt <= KKT_TOL * 1e-3 || active.is_empty() {
                break;
            }
            iterations += 1;
            // exact minimizer of the quadratic along d, clipped to the segment
            let curv = d.dot(&(&h * &d));
            let theta = if curv > 0.0 { (-grad.dot(&d) / curv).clamp(0.0, 1.0) } else { 1.0 };
            let next = project(&(&b + &d * theta), boxes);
            if (&next - &b).amax() == 0.0 {
                break;
            }
            b = next;
        }
    }
    Ok(Selection {
        objective: objective(&res, &b),
        values: b.iter().copied().collect(),
        iterations,
        indeterminate,
    })
}

#[derive(Debug, Clone)]
pub struct Adaptation {
    pub certificate: Certificate,
    pub contained: bool,
    /// Round that produced the certificate; 0 is the plain certificate solve.
    pub round: usize,
    pub v_x0: f64,
}

/// Scale `β_k` for round `k ≥ 1`: `β0·2^s` with `s = 0, 1, −1, 2, −2, …`.
fn round_scale(beta0: f64, k: usize) -> f64 {
    let i = (k - 1) as i32;
    let s = if i % 2 == 1 { (i + 1) / 2 } else { -(i / 2) };
    beta0 * 2f64.powi(s)
}

/// Looks for `P` satisfying the certificate LMI with `V(x0) < V_min`, `x0` a deviation.
///
/// Round 0 is the plain certificate solve. Each later round `k` fixes a level
/// `β_k` and solves the certificate LMI jointly with `x0ᵀPx0 ≤ β_k` and
/// `[[P, c_e], [c_eᵀ, r_e²/β_k]] ⪰ 0` on every generator–generator edge,
/// `r_e = min_σ |σπ/2 − δ*_e|`; the latter is the Schur form of
/// `r_e²/(c_eᵀP⁻¹c_e) ≥ β_k`, so any strict solution has `V(x0) < V_min`.
pub fn adapt_certificate(mats: &SystemMatrices, x0: &DVector<f64>, g: f64, gamma: Option<f64>) -> Result<Adaptation> {
    let first = certifier::certify(mats, g, gamma, None)?;
    let v0 = first.lyapunov(x0);
    if certifier::assess(&first, mats, x0).is_stable() {
        return Ok(Adaptation {
            certificate: first,
            contained: true,
            round: 0,
            v_x0: v0,
        });
    }
    if !mats.in_polytope(x0) {
        return Ok(Adaptation {
            certificate: first,
            contained: false,
            round: 0,
            v_x0: v0,
        });
    }

    let n = mats.state_dim();
    let basis = GaugeBasis::new(mats)?;
    let t = block_reduction(mats, mats.num_edges());
    let block = basis.lift(|p| certificate_block(mats, g, p), &t, true)?;
    let nv = basis.dim() + 1;
    let cap = certifier::TRACE_CAP_PER_STATE * n as f64;
    let x0_coeffs: Vec<f64> = basis
        .dirs
        .iter()
        .chain(std::iter::once(&basis.conserved))
        .map(|d| x0.dot(&(d * x0)))
        .collect();
    let edges: Vec<(DVector<f64>, f64)> = mats
        .generator_edges()
        .into_iter()
        .map(|e| {
            let d = mats.edge_angles[e];
            let r = (FRAC_PI_2 - d).abs().min((FRAC_PI_2 + d).abs());
            (mats.c.row(e).transpose(), r)
        })
        .collect();

    for k in 1..=ADAPTATION_ROUNDS {
        let beta = round_scale(first.v_min, k);
        let mut extra = vec![basis.restricted(true), basis.trace_cap(cap, true)];
        extra.push(AffineMatrix {
            constant: DMatrix::from_element(1, 1, beta),
            coefficients: x0_coeffs.iter().map(|&c| DMatrix::from_element(1, 1, -c)).collect(),
        });
        for (c, r) in &edges {
            let mut constant = DMatrix::zeros(n + 1, n + 1);
            constant.view_mut((0, n), (n, 1)).copy_from(c);
            constant.view_mut((n, 0), (1, n)).copy_from(&c.transpose());
            constant[(n, n)] = r * r / beta;
            let coefficients = basis
                .dirs
                .iter()
                .chain(std::iter::once(&basis.conserved))
                .map(|d| {
                    let mut m = DMatrix::zeros(n + 1, n + 1);
                    m.view_mut((0, 0), (n, n)).copy_from(d);
                    m
                })
                .collect();
            extra.push(AffineMatrix::new(constant, coefficients)?);
        }
        debug_assert!(extra.iter().all(|m| m.num_vars() == nv));
        let sol = lmi::solve_feasibility(&AffineLmi::new(block.clone()), &extra, &SolverOptions::default())?;
        if !sol.is_feasible() {
            continue;
        }
        let p = basis.matrix(&sol.variables);
        let Ok(cert) = Certificate::new(p, g, gamma, mats) else {
            continue;
        };
        let check = certifier::check_certificate(mats, g, &cert.p)?;
        if !(check.reduced_lambda_max < 0.0) {
            continue;
        }
        if let Verdict::Stable { v, .. } = certifier::assess(&cert, mats, x0) {
            return Ok(Adaptation {
                certificate: cert,
                contained: true,
                round: k,
                v_x0: v,
            });
        }
    }
    Ok(Adaptation {
        certificate: first,
        contained: false,
        round: ADAPTATION_ROUNDS,
        v_x0: v0,
    })
}

#[derive(Debug, Clone)]
pub struct PostFaultDesign {
    /// `(edge position, susceptance)` per adjustable line.
    pub tuned: Vec<(usize, f64)>,
    pub network: PowerNetwork,
    pub new_equilibrium: EquilibriumResult,
    pub mats: SystemMatrices,
    pub certificate: Certificate,
    pub contained: bool,
    pub v_x0: f64,
    pub selection: Selection,
    pub round: usize,
}

/// Select susceptances for `δ_desired = δ_fault-cleared`, solve for the new
/// equilibrium, and adapt a certificate around it.
pub fn design_postfault(
    net: &PowerNetwork,
    x0: &State,
    lines: &[usize],
    boxes: &[SusceptanceBounds],
) -> Result<PostFaultDesign> {
    if x0.angles.len() != net.num_buses() {
        return Err(Error::Dimension(format!(
            "fault-cleared state has {} angles for {} buses",
            x0.angles.len(),
            net.num_buses()
        )));
    }
    if x0.velocities.iter().any(|w| *w != 0.0) {
        return Err(Error::InvalidInput("the fault-cleared state must be static (zero velocities)".into()));
    }
    let selection = select_susceptances(net, lines, boxes, &x0.angles)?;
    let overrides: Vec<(usize, f64, SusceptanceBounds)> = lines
        .iter()
        .zip(&selection.values)
        .zip(boxes)
        .map(|((&e, &v), &bx)| (e, v, bx))
        .collect();
    let tuned_net = net.retuned(&overrides)?;
    let new_equilibrium = powerflow::solve_equilibrium(&tuned_net, Some(&x0.angles))?;
    let mats = assemble_matrices(&tuned_net, &new_equilibrium.angles)?;
    let g = model::sector_gain(&mats)?;
    let gamma = model::max_edge_angle(&mats);
    let deviation = mats.deviation(x0);
    let adaptation = adapt_certificate(&mats, &deviation, g, Some(gamma))?;
    Ok(PostFaultDesign {
        tuned: lines.iter().copied().zip(selection.values.iter().copied()).collect(),
        network: tuned_net,
        new_equilibrium,
        mats,
        certificate: adaptation.certificate,
        contained: adaptation.contained,
        v_x0: adaptation.v_x0,
        selection,
        round: adaptation.round,
    })
}

/// Angles (rad) per bus id; velocities per generator id, default 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StateFile {
    pub angles: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub velocities: BTreeMap<String, f64>,
}

impl StateFile {
    pub fn from_state(net: &PowerNetwork, state: &State) -> Self {
        let buses = net.buses();
        let g = net.num_generators();
        Self {
            angles: buses.iter().zip(state.angles.iter()).map(|(b, &a)| (b.id.to_string(), a)).collect(),
            velocities: buses[..g]
                .iter()
                .zip(state.velocities.iter())
                .filter(|(_, &w)| w != 0.0)
                .map(|(b, &w)| (b.id.to_string(), w))
                .collect(),
        }
    }

    pub fn to_state(&self, net: &PowerNetwork) -> Result<State> {
        let mut angles = DVector::from_element(net.num_buses(), f64::NAN);
        for (id, &a) in &self.angles {
            let pos = bus_of(net, id)?;
            angles[pos] = a;
        }
        if let Some(pos) = angles.iter().position(|a| a.is_nan()) {
            return Err(Error::Schema(format!("no angle for bus {}", net.buses()[pos].id)));
        }
        let mut velocities = DVector::zeros(net.num_generators());
        for (id, &w) in &self.velocities {
            let pos = bus_of(net, id)?;
            if pos >= net.num_generators() {
                return Err(Error::Schema(format!("bus {id} is a load and has no velocity")));
            }
            velocities[pos] = w;
        }
        let state = State::new(angles, velocities);
        if !state.is_finite() {
            return Err(Error::Schema("state has non-finite entries".into()));
        }
        Ok(state)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
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

fn bus_of(net: &PowerNetwork, id: &str) -> Result<usize> {
    let parsed: u32 = id
        .parse()
        .map_err(|_| Error::Schema(format!("bus id must be an integer, got {id:?}")))?;
    net.bus_position(parsed)
        .ok_or_else(|| Error::Schema(format!("unknown bus {parsed}")))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PostFaultFile {
    pub tuned: BTreeMap<String, f64>,
    pub equilibrium: BTreeMap<String, f64>,
    pub contained: bool,
    #[serde(rename = "V_x0")]
    pub v_x0: f64,
    #[serde(rename = "V_min")]
    pub v_min: f64,
    pub g: f64,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
}

impl PostFaultDesign {
    pub fn to_file(&self) -> PostFaultFile {
        let lines = self.network.lines();
        PostFaultFile {
            tuned: self.tuned.iter().map(|&(e, v)| (format_line_key(lines[e].key()), v)).collect(),
            equilibrium: self
                .network
                .buses()
                .iter()
                .zip(self.new_equilibrium.angles.iter())
                .map(|(b, &a)| (b.id.to_string(), a))
                .collect(),
            contained: self.contained,
            v_x0: self.v_x0,
            v_min: self.certificate.v_min,
            g: self.certificate.g,
            p: self.certificate.p.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl PostFaultFile {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("design serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Bus, BusKind, Line};

    fn triangle() -> PowerNetwork {
        let gen = |id, p| Bus {
            id,
            kind: BusKind::Generator,
            voltage: 1.0,
            inertia: Some(2.0),
            damping: 1.0,
            injection: p,
        };
        let line = |from, to, b| Line {
            from,
            to,
            susceptance: b,
            bounds: None,
        };
        PowerNetwork::new(
            vec![gen(1, 0.2), gen(2, -0.1), gen(3, -0.1)],
            vec![line(1, 2, 1.0), line(1, 3, 1.2), line(2, 3, 0.8)],
        )
        .unwrap()
    }

    fn boxes(v: &[(f64, f64)]) -> Vec<SusceptanceBounds> {
        v.iter().map(|&(min, max)| SusceptanceBounds { min, max }).collect()
    }

    #[test]
    fn current_equilibrium_keeps_current_values() {
        let net = triangle();
        let eq = powerflow::solve_equilibrium(&net, None).unwrap();
        let bx = boxes(&[(0.5, 1.5), (0.4, 1.2)]);
        let sel = select_susceptances(&net, &[0, 2], &bx, &eq.angles).unwrap();
        assert!(sel.objective < 1e-20, "{}", sel.objective);
        assert!((sel.values[0] - 1.0).abs() < 1e-9 && (sel.values[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn indeterminate_line_takes_midpoint() {
        let net = triangle();
        let desired = DVector::from_vec(vec![0.0, 0.3, 0.3]);
        let bx = boxes(&[(0.5, 1.5), (0.6, 1.8)]);
        let sel = select_susceptances(&net, &[0, 2], &bx, &desired).unwrap();
        assert_eq!(sel.indeterminate, vec![1]);
        assert_eq!(sel.values[1], 1.2);
    }

    #[test]
    fn empty_box_rejected() {
        let net = triangle();
        let desired = DVector::zeros(3);
        assert!(select_susceptances(&net, &[0], &boxes(&[(1.0, 0.5)]), &desired).is_err());
    }

    #[test]
    fn round_scales_alternate() {
        let s: Vec<f64> = (1..=5).map(|k| round_scale(1.0, k)).collect();
        assert_eq!(s, vec![1.0, 2.0, 0.5, 4.0, 0.25]);
    }

    #[test]
    fn state_file_round_trip_and_defaults() {
        let net = triangle();
        let file = StateFile::from_json_str(r#"{"angles": {"1": 0.0, "2": 0.5, "3": 0.5}}"#).unwrap();
        let state = file.to_state(&net).unwrap();
        assert_eq!(state.velocities, DVector::zeros(3));
        assert_eq!(StateFile::from_state(&net, &state), file);
        assert!(StateFile::from_json_str(r#"{"angles": {"1": 0.0}}"#).unwrap().to_state(&net).is_err());
    }

    #[test]
    fn equilibrium_start_is_trivially_contained() {
        let net = triangle();
        let eq = powerflow::solve_equilibrium(&net, None).unwrap();
        let x0 = State::at_rest(eq.angles.clone(), 3);
        let bx = boxes(&[(0.5, 1.5), (0.4, 1.2)]);
        let d = design_postfault(&net, &x0, &[0, 2], &bx).unwrap();
        assert!(d.contained);
        assert_eq!(d.round, 0);
    }
}
