//! Quadratic Lyapunov certificates `V(x) = xᵀPx` for the post-fault dynamics.
//!
//! Every Lyapunov block built here annihilates `z = [v; 0]`, `v` the uniform
//! angle shift, whenever `Pv ∥ q` (`q` the conserved-quantity weights). A
//! negative semidefinite block forces that alignment, so `P` is parametrized
//! on the subspace where it holds and strict margins are measured on the
//! complement of `z`.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, complement_basis, eig_sym};
use crate::lmi::{self, AffineLmi, AffineMatrix, LmiSolution, SolverOptions};
use crate::model::{self, State, SystemMatrices};

/// `[[ĀᵀP + PĀ + ((1−g)²/4)CᵀC, PB̄], [B̄ᵀP, −I]]` with `Ā = A − ½(1+g)BC`.
pub fn lyapunov_block(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    b_bar: &DMatrix<f64>,
    c: &DMatrix<f64>,
    g: f64,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b_bar.ncols();
    let abar = a - b * c * (0.5 * (1.0 + g));
    let k = 0.25 * (1.0 - g) * (1.0 - g);
    let top = abar.transpose() * p + p * &abar + c.transpose() * c * k;
    let pb = p * b_bar;
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(&top);
    out.view_mut((0, n), (n, m)).copy_from(&pb);
    out.view_mut((n, 0), (m, n)).copy_from(&pb.transpose());
    for i in 0..m {
        out[(n + i, n + i)] = -1.0;
    }
    linalg::symmetrize(&out)
}

/// Riccati form `ĀᵀP + PĀ + ((1−g)²/4)CᵀC + PB̄B̄ᵀP`, the Schur complement of
/// [`lyapunov_block`] with respect to its `−I` corner.
pub fn riccati_form(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    b_bar: &DMatrix<f64>,
    c: &DMatrix<f64>,
    g: f64,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let abar = a - b * c * (0.5 * (1.0 + g));
    let k = 0.25 * (1.0 - g) * (1.0 - g);
    let pb = p * b_bar;
    linalg::symmetrize(&(abar.transpose() * p + p * &abar + c.transpose() * c * k + &pb * pb.transpose()))
}

pub fn certificate_block(mats: &SystemMatrices, g: f64, p: &DMatrix<f64>) -> DMatrix<f64> {
    lyapunov_block(&mats.a, &mats.b, &mats.b, &mats.c, g, p)
}

/// Orthonormal basis of the complement of `[v; 0]` in a block with `extra`
/// trailing rows.
pub fn block_reduction(mats: &SystemMatrices, extra: usize) -> DMatrix<f64> {
    let v = mats.gauge_vector();
    let z = DVector::from_iterator(v.len() + extra, v.iter().copied().chain(std::iter::repeat(0.0).take(extra)));
    complement_basis(&z)
}

/// Orthonormal basis of the complement of `v` in state space.
pub fn state_reduction(mats: &SystemMatrices) -> DMatrix<f64> {
    complement_basis(&mats.gauge_vector())
}

/// Frobenius-orthonormal basis of `{P = Pᵀ : Pv ∥ q}` with the rank-one
/// direction `Q = q̂q̂ᵀ` split off.
///
/// `Q` lies in the kernel of every Lyapunov block and `V` never sees it on
/// aligned deviations (`qᵀx = 0`), so it is left out of the search and added
/// back afterwards to make `P` positive definite.
#[derive(Debug, Clone)]
pub struct GaugeBasis {
    pub dirs: Vec<DMatrix<f64>>,
    pub conserved: DMatrix<f64>,
    /// Orthonormal basis of `q⊥`.
    pub complement: DMatrix<f64>,
}

fn symmetric_unit(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n);
    if i == j {
        e[(i, i)] = 1.0;
    } else {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        e[(i, j)] = s;
        e[(j, i)] = s;
    }
    e
}

fn symmetric_units(n: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(symmetric_unit(n, i, j));
        }
    }
    out
}

impl GaugeBasis {
    pub fn new(mats: &SystemMatrices) -> Result<Self> {
        let n = mats.state_dim();
        let v = mats.gauge_vector();
        let q = mats.gauge_weights();
        let qn = &q / q.norm();
        let units = symmetric_units(n);
        // rows 0..n: component of Pv off q; row n: <P, q̂q̂ᵀ>
        let mut k = DMatrix::zeros(n + 1, units.len());
        for (col, e) in units.iter().enumerate() {
            let w = e * &v;
            let w = &w - &qn * qn.dot(&w);
            k.view_mut((0, col), (n, 1)).copy_from(&w);
            k[(n, col)] = qn.dot(&(e * &qn));
        }
        let eig = eig_sym(&(k.transpose() * &k))?;
        let top = eig.max().max(1.0);
        let dirs = (0..units.len())
            .filter(|&i| eig.values[i] <= 1e-12 * top)
            .map(|i| {
                let coeffs = eig.vectors.column(i);
                let mut m = DMatrix::zeros(n, n);
                for (c, e) in coeffs.iter().zip(&units) {
                    m += e * *c;
                }
                linalg::symmetrize(&m)
            })
            .collect();
        Ok(Self {
            dirs,
            conserved: &qn * qn.transpose(),
            complement: complement_basis(&qn),
        })
    }

    pub fn dim(&self) -> usize {
        self.dirs.len()
    }

    pub fn matrix(&self, y: &[f64]) -> DMatrix<f64> {
        let n = self.conserved.nrows();
        let mut p = DMatrix::zeros(n, n);
        for (d, &c) in self.dirs.iter().zip(y) {
            p += d * c;
        }
        if y.len() > self.dirs.len() {
            p += &self.conserved * y[self.dirs.len()];
        }
        linalg::symmetrize(&p)
    }

    /// Frobenius projection of `p` onto the searched directions.
    pub fn coordinates(&self, p: &DMatrix<f64>) -> Vec<f64> {
        self.dirs.iter().map(|d| d.dot(p)).collect()
    }

    /// `P(y)` as an affine matrix (zero constant); with `conserved` the last
    /// variable multiplies `Q`.
    pub fn affine(&self, conserved: bool) -> AffineMatrix {
        let n = self.conserved.nrows();
        let mut coefficients = self.dirs.clone();
        if conserved {
            coefficients.push(self.conserved.clone());
        }
        AffineMatrix {
            constant: DMatrix::zeros(n, n),
            coefficients,
        }
    }

    /// `Uᵀ P(y) U`, `U` spanning `q⊥`; with `conserved` a trailing variable
    /// with zero coefficient keeps the variable count aligned.
    pub fn restricted(&self, conserved: bool) -> AffineMatrix {
        let mut out = self.affine(false).congruence(&self.complement);
        if conserved {
            let k = out.dim();
            out.coefficients.push(DMatrix::zeros(k, k));
        }
        out
    }

    /// `cap − tr P(y)` as a 1×1 block. Directions such as the mean speed
    /// mode only ever improve the margin, so without a cap the max-margin
    /// problem has no finite solution.
    pub fn trace_cap(&self, cap: f64, conserved: bool) -> AffineMatrix {
        let mut coefficients: Vec<_> = self
            .dirs
            .iter()
            .map(|d| DMatrix::from_element(1, 1, -d.trace()))
            .collect();
        if conserved {
            coefficients.push(DMatrix::from_element(1, 1, -1.0));
        }
        AffineMatrix {
            constant: DMatrix::from_element(1, 1, cap),
            coefficients,
        }
    }

    /// `block(P(y))` for `block` affine in `P`, reduced by `Tᵀ · T`.
    pub fn lift<F>(&self, block: F, t: &DMatrix<f64>, conserved: bool) -> Result<AffineMatrix>
    where
        F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
    {
        let n = self.conserved.nrows();
        let constant = block(&DMatrix::zeros(n, n));
        let mut coefficients: Vec<_> = self.dirs.iter().map(|d| block(d) - &constant).collect();
        if conserved {
            coefficients.push(block(&self.conserved) - &constant);
        }
        Ok(AffineMatrix::new(constant, coefficients)?.congruence(t))
    }

    /// `P' + αQ` with the smallest `α ≥ λ_max(UᵀP'U)` (doubling) for which
    /// `λ_min ≥ ½ λ_min(UᵀP'U)`. Requires `UᵀP'U ≻ 0`.
    pub fn complete(&self, p_perp: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let u = &self.complement;
        let inner = eig_sym(&linalg::symmetrize(&(u.transpose() * p_perp * u)))?;
        if !(inner.min() > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let mut alpha = inner.max();
        for _ in 0..200 {
            let p = linalg::symmetrize(&(p_perp + &self.conserved * alpha));
            if linalg::lambda_min(&p)? >= 0.5 * inner.min() {
                return Ok(p);
            }
            alpha *= 2.0;
        }
        Err(Error::NotPositiveDefinite)
    }
}

/// Certificate LMI on the gauge subspace, with the paired `P ⪰ εI` block (taken on
/// `q⊥`, see [`GaugeBasis`]).
#[derive(Debug, Clone)]
pub struct CertificateProblem {
    pub lmi: AffineLmi,
    pub extra: Vec<AffineMatrix>,
    pub basis: GaugeBasis,
}

fn check_gain(g: f64) -> Result<()> {
    if g > 0.0 && g <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("sector gain must lie in (0, 1], got {g}")))
    }
}

/// `tr P ≤ 100·N` (before completion) for synthesized certificates.
pub const TRACE_CAP_PER_STATE: f64 = 100.0;

pub fn build_certificate_lmi(mats: &SystemMatrices, g: f64) -> Result<CertificateProblem> {
    check_gain(g)?;
    let basis = GaugeBasis::new(mats)?;
    let t = block_reduction(mats, mats.num_edges());
    let block = basis.lift(|p| certificate_block(mats, g, p), &t, false)?;
    Ok(CertificateProblem {
        lmi: AffineLmi::new(block),
        extra: vec![basis.restricted(false), basis.trace_cap(TRACE_CAP_PER_STATE * mats.state_dim() as f64, false)],
        basis,
    })
}

/// Certificate LMI over all `N(N+1)/2` entries of `P`, without the gauge reduction.
/// The strict form is infeasible by construction; used for verification of
/// given matrices.
pub fn build_certificate_lmi_full(mats: &SystemMatrices, g: f64) -> Result<AffineLmi> {
    check_gain(g)?;
    let n = mats.state_dim();
    let constant = certificate_block(mats, g, &DMatrix::zeros(n, n));
    let coefficients = symmetric_units(n)
        .iter()
        .map(|e| certificate_block(mats, g, e) - &constant)
        .collect();
    Ok(AffineLmi::new(AffineMatrix::new(constant, coefficients)?))
}

/// Spectral summary of the certificate LMI for a given `P`.
#[derive(Debug, Clone)]
pub struct CertificateCheck {
    pub full_lambda_max: f64,
    pub reduced_lambda_max: f64,
    /// Largest absolute entry of the full block.
    pub block_scale: f64,
    pub p_lambda_min: f64,
}

pub fn check_certificate(mats: &SystemMatrices, g: f64, p: &DMatrix<f64>) -> Result<CertificateCheck> {
    let full = certificate_block(mats, g, p);
    let t = block_reduction(mats, mats.num_edges());
    let reduced = linalg::symmetrize(&(t.transpose() * &full * &t));
    Ok(CertificateCheck {
        full_lambda_max: linalg::lambda_max(&full)?,
        reduced_lambda_max: linalg::lambda_max(&reduced)?,
        block_scale: linalg::max_abs(&full),
        p_lambda_min: linalg::lambda_min(&linalg::symmetrize(p))?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub p: DMatrix<f64>,
    pub g: f64,
    /// Uniform polytope bound the gain was derived from, when known.
    pub gamma: Option<f64>,
    pub v_min: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateFile {
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(rename = "V_min", default, skip_serializing_if = "Option::is_none")]
    v_min: Option<f64>,
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Schema("P must be a non-empty square array of rows".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Schema("P has non-finite entries".into()));
    }
    let p = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    let asym = linalg::asymmetry(&p);
    if asym > 1e-9 * linalg::max_abs(&p).max(1.0) {
        return Err(Error::Asymmetric(asym));
    }
    Ok(p)
}

impl Certificate {
    /// Computes `V_min` for `p` on `mats`.
    pub fn new(p: DMatrix<f64>, g: f64, gamma: Option<f64>, mats: &SystemMatrices) -> Result<Self> {
        check_gain(g)?;
        let v_min = compute_vmin(&p, mats)?;
        Ok(Self { p, g, gamma, v_min })
    }

    pub fn lyapunov(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x))
    }

    pub fn to_json_string(&self) -> String {
        let file = CertificateFile {
            p: self.p.row_iter().map(|r| r.iter().copied().collect()).collect(),
            g: Some(self.g),
            gamma: self.gamma,
            v_min: Some(self.v_min),
        };
        serde_json::to_string_pretty(&file).expect("certificate serializes")
    }

    /// Complete certificate as exported by [`Certificate::to_json_string`].
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: CertificateFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let p = matrix_from_rows(&file.p)?;
        let (Some(g), Some(v_min)) = (file.g, file.v_min) else {
            return Err(Error::Schema("certificate needs g and V_min".into()));
        };
        Ok(Self {
            p,
            g,
            gamma: file.gamma,
            v_min,
        })
    }

    /// A matrix file (only `P` required) checked against `mats`. The gain
    /// comes from `g`, else from `gamma`, else from the equilibrium itself;
    /// `V_min` is always recomputed.
    pub fn import(text: &str, mats: &SystemMatrices) -> Result<Self> {
        let file: CertificateFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let p = matrix_from_rows(&file.p)?;
        if p.nrows() != mats.state_dim() {
            return Err(Error::Dimension(format!(
                "P is {0}x{0}, state has dimension {1}",
                p.nrows(),
                mats.state_dim()
            )));
        }
        let g = match (file.g, file.gamma) {
            (Some(g), _) => g,
            (None, Some(gamma)) => model::uniform_sector_gain(gamma)?,
            (None, None) => model::sector_gain(mats)?,
        };
        Self::new(p, g, file.gamma, mats)
    }

    pub fn load(path: impl AsRef<Path>, mats: &SystemMatrices) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::import(&text, mats)
    }
}

/// `min (σπ/2 − δ*_e)² / (c_eᵀP⁻¹c_e)` over generator–generator edges and
/// both signs.
pub fn compute_vmin(p: &DMatrix<f64>, mats: &SystemMatrices) -> Result<f64> {
    let edges = mats.generator_edges();
    if edges.is_empty() {
        return Err(Error::InvalidInput("no line connects two generator buses".into()));
    }
    if p.nrows() != mats.state_dim() || p.ncols() != mats.state_dim() {
        return Err(Error::Dimension(format!(
            "P is {}x{}, state has dimension {}",
            p.nrows(),
            p.ncols(),
            mats.state_dim()
        )));
    }
    let chol = linalg::cholesky(&linalg::symmetrize(p)).ok_or(Error::NotPositiveDefinite)?;
    let mut best = f64::INFINITY;
    for e in edges {
        let d = mats.edge_angles[e];
        if !(d.abs() < FRAC_PI_2) {
            return Err(Error::OutsidePolytope {
                edge: mats.edge_order[e],
                angle: d,
            });
        }
        let c = mats.c.row(e).transpose();
        let quad = c.dot(&chol.solve(&c));
        for sigma in [1.0, -1.0] {
            let r = sigma * FRAC_PI_2 - d;
            best = best.min(r * r / quad);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Stable { v: f64, v_min: f64 },
    Uncertified { reason: String },
}

impl Verdict {
    pub fn is_stable(&self) -> bool {
        matches!(self, Verdict::Stable { .. })
    }
}

/// Verdict for a deviation state `x`.
pub fn assess(cert: &Certificate, mats: &SystemMatrices, x: &DVector<f64>) -> Verdict {
    if x.len() != cert.p.nrows() {
        return Verdict::Uncertified {
            reason: format!("state has {} entries, P is {}x{}", x.len(), cert.p.nrows(), cert.p.nrows()),
        };
    }
    if !mats.in_polytope(x) {
        return Verdict::Uncertified {
            reason: "state lies outside the polytope |delta_kj| <= pi/2".into(),
        };
    }
    let v = cert.lyapunov(x);
    if v < cert.v_min {
        Verdict::Stable { v, v_min: cert.v_min }
    } else {
        Verdict::Uncertified {
            reason: format!("V(x0) = {v} is not below V_min = {}", cert.v_min),
        }
    }
}

/// [`assess`] on the gauge-aligned deviation of an absolute state.
pub fn assess_state(cert: &Certificate, mats: &SystemMatrices, state: &State) -> Verdict {
    assess(cert, mats, &mats.deviation(state))
}

/// Solve `problem`; returns the completed `P` (when the solve produced a
/// usable one) with the raw solver result.
pub fn solve_certificate_lmi(problem: &CertificateProblem, opts: &SolverOptions) -> Result<(Option<DMatrix<f64>>, LmiSolution)> {
    let sol = lmi::solve_feasibility(&problem.lmi, &problem.extra, opts)?;
    let p = problem.basis.complete(&problem.basis.matrix(&sol.variables)).ok();
    Ok((p, sol))
}

/// Finds `P` for the certificate LMI. `weights` re-centers the search by requiring
/// `W^{-1/2} P W^{-1/2} ⪰ εI` in place of `P ⪰ εI`.
pub fn certify(mats: &SystemMatrices, g: f64, gamma: Option<f64>, weights: Option<&DVector<f64>>) -> Result<Certificate> {
    let mut problem = build_certificate_lmi(mats, g)?;
    if let Some(w) = weights {
        if w.len() != mats.state_dim() || w.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput("centering weights must be positive, one per state".into()));
        }
        let s = DMatrix::from_diagonal(&w.map(|v| 1.0 / v.sqrt()));
        problem.extra[0] = problem.basis.affine(false).congruence(&(s * &problem.basis.complement));
    }
    let (p, sol) = solve_certificate_lmi(&problem, &SolverOptions::default())?;
    let Some(p) = p.filter(|_| sol.is_feasible()) else {
        return Err(Error::Infeasible(format!(
            "certificate LMI at g = {g}: best eigenvalue {} above -{} ({:?})",
            sol.witness_eigenvalue, sol.epsilon, sol.status
        )));
    };
    Certificate::new(p, g, gamma, mats)
}
