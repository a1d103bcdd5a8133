//! Feasibility of affine linear matrix inequalities.
//!
//! The solver maximizes a common margin `t` over all blocks,
//!
//! ```text
//!   maximize t  s.t.  -(G0 + Σ y_i G_i) ⪰ t·I,   H_b(y) ⪰ t·I,   lo ≤ y ≤ hi,
//! ```
//!
//! with a log-barrier interior-point method (damped Newton on the barrier,
//! geometric increase of the barrier weight). A point is reported feasible
//! only after [`check_solution`] confirms every block clears the margin `ε`.
//! There is no dual certificate, so failure is only ever "suspected".

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, asymmetry, max_abs};

/// `constant + Σ y_i coefficients[i]`, all symmetric and of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrix {
    pub constant: DMatrix<f64>,
    pub coefficients: Vec<DMatrix<f64>>,
}

impl AffineMatrix {
    pub fn new(constant: DMatrix<f64>, coefficients: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = constant.nrows();
        if !constant.is_square() {
            return Err(Error::Dimension("constant block is not square".into()));
        }
        for (i, c) in std::iter::once(&constant).chain(coefficients.iter()).enumerate() {
            if c.nrows() != n || c.ncols() != n {
                return Err(Error::Dimension(format!(
                    "block {i} is {}x{}, expected {n}x{n}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            let asym = asymmetry(c);
            if asym > 1e-12 * max_abs(c).max(1.0) {
                return Err(Error::Asymmetric(asym));
            }
        }
        Ok(Self {
            constant,
            coefficients,
        })
    }

    /// Constant matrix with no decision variables.
    pub fn constant(m: DMatrix<f64>, num_vars: usize) -> Result<Self> {
        let n = m.nrows();
        Self::new(m, vec![DMatrix::zeros(n, n); num_vars])
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn num_vars(&self) -> usize {
        self.coefficients.len()
    }

    pub fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (c, &v) in self.coefficients.iter().zip(y) {
            if v != 0.0 {
                out += c * v;
            }
        }
        out
    }

    pub fn negated(&self) -> Self {
        Self {
            constant: -&self.constant,
            coefficients: self.coefficients.iter().map(|c| -c).collect(),
        }
    }

    /// `Tᵀ M(y) T` for a fixed basis `T`.
    pub fn congruence(&self, t: &DMatrix<f64>) -> Self {
        let tt = t.transpose();
        let sym = |m: &DMatrix<f64>| linalg::symmetrize(&(&tt * m * t));
        Self {
            constant: sym(&self.constant),
            coefficients: self.coefficients.iter().map(sym).collect(),
        }
    }

    fn scale(&self) -> f64 {
        std::iter::once(&self.constant)
            .chain(self.coefficients.iter())
            .map(|m| m.norm())
            .fold(0.0, f64::max)
    }
}

/// Requires `block(y) ⪯ -ε·I` and optional per-variable bounds.
#[derive(Debug, Clone)]
pub struct AffineLmi {
    pub block: AffineMatrix,
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Absolute margin; `None` means `1e-7 · scale`.
    pub epsilon: Option<f64>,
}

impl AffineLmi {
    pub fn new(block: AffineMatrix) -> Self {
        Self {
            block,
            bounds: None,
            epsilon: None,
        }
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon = Some(eps);
        self
    }

    pub fn num_vars(&self) -> usize {
        self.block.num_vars()
    }

    /// Largest Frobenius norm over every constant and coefficient matrix.
    pub fn scale(&self, extra_psd: &[AffineMatrix]) -> f64 {
        extra_psd
            .iter()
            .map(AffineMatrix::scale)
            .fold(self.block.scale(), f64::max)
    }

    pub fn margin(&self, extra_psd: &[AffineMatrix]) -> f64 {
        self.epsilon
            .unwrap_or_else(|| DEFAULT_RELATIVE_EPSILON * self.scale(extra_psd).max(f64::MIN_POSITIVE))
    }
}

pub const DEFAULT_RELATIVE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmiStatus {
    Feasible,
    InfeasibleSuspected,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct LmiSolution {
    pub variables: Vec<f64>,
    /// Worst violation eigenvalue over all blocks (see [`BlockWitness::worst`]).
    pub witness_eigenvalue: f64,
    pub status: LmiStatus,
    /// Common margin `t` reached by the barrier iterate.
    pub margin: f64,
    pub epsilon: f64,
    pub iterations: usize,
}

impl LmiSolution {
    pub fn is_feasible(&self) -> bool {
        self.status == LmiStatus::Feasible
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Newton-step budget.
    pub max_iters: usize,
    /// Upper bound on the margin `t`; keeps unbounded problems finite.
    pub margin_cap: Option<f64>,
    /// Radius of the implicit ball `|y| ≤ radius`.
    pub radius: f64,
    /// Stop once the barrier duality gap falls below `gap_tol · scale`.
    pub gap_tol: f64,
    pub start: Option<Vec<f64>>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            margin_cap: None,
            radius: 1e6,
            gap_tol: 1e-9,
            start: None,
        }
    }
}

/// Violation eigenvalues: `λ_max(G(y))` for the main block and `λ_max(-H_b(y))`
/// for every extra block. All must be `≤ -ε` for a strict solution.
#[derive(Debug, Clone)]
pub struct BlockWitness {
    pub main: f64,
    pub extra: Vec<f64>,
    pub bounds_ok: bool,
}

impl BlockWitness {
    pub fn worst(&self) -> f64 {
        self.extra.iter().copied().fold(self.main, f64::max)
    }
}

pub fn check_solution(lmi: &AffineLmi, extra_psd: &[AffineMatrix], y: &[f64]) -> Result<BlockWitness> {
    if y.len() != lmi.num_vars() {
        return Err(Error::Dimension(format!(
            "{} values for {} variables",
            y.len(),
            lmi.num_vars()
        )));
    }
    let main = linalg::lambda_max(&lmi.block.eval(y))?;
    let extra = extra_psd
        .iter()
        .map(|h| linalg::lambda_min(&h.eval(y)).map(|l| -l))
        .collect::<Result<Vec<_>>>()?;
    let bounds_ok = match &lmi.bounds {
        None => true,
        Some(b) => b.iter().zip(y).all(|(&(lo, hi), &v)| v >= lo && v <= hi),
    };
    Ok(BlockWitness {
        main,
        extra,
        bounds_ok,
    })
}

/// Barrier problem restricted to the free variables.
struct Barrier {
    /// Each block is required to satisfy `F_b(y) - t I ≻ 0`.
    blocks: Vec<AffineMatrix>,
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
    radius2: f64,
    cap: f64,
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl Barrier {
    fn nvars(&self) -> usize {
        self.lower.len()
    }

    fn weight(&self) -> f64 {
        let dims: usize = self.blocks.iter().map(AffineMatrix::dim).sum();
        let bounds = self.lower.iter().filter(|b| b.is_some()).count()
            + self.upper.iter().filter(|b| b.is_some()).count();
        (dims + bounds + 2) as f64
    }

    fn feasible(&self, z: &DVector<f64>) -> bool {
        self.value_only(z).is_some()
    }

    fn value_only(&self, z: &DVector<f64>) -> Option<f64> {
        let p = self.nvars();
        let (y, t) = (&z.as_slice()[..p], z[p]);
        let mut value = 0.0;
        for b in &self.blocks {
            let mut m = b.eval(y);
            for i in 0..m.nrows() {
                m[(i, i)] -= t;
            }
            let chol = linalg::cholesky(&m)?;
            value -= 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        for (i, &v) in y.iter().enumerate() {
            if let Some(lo) = self.lower[i] {
                let s = v - lo;
                if s <= 0.0 {
                    return None;
                }
                value -= s.ln();
            }
            if let Some(hi) = self.upper[i] {
                let s = hi - v;
                if s <= 0.0 {
                    return None;
                }
                value -= s.ln();
            }
        }
        let ball = self.radius2 - y.iter().map(|v| v * v).sum::<f64>();
        let cap = self.cap - t;
        if ball <= 0.0 || cap <= 0.0 {
            return None;
        }
        value -= ball.ln() + cap.ln();
        value.is_finite().then_some(value)
    }

    /// Barrier plus `-κ t`, with gradient and Hessian in `z = (y, t)`.
    fn eval(&self, z: &DVector<f64>, kappa: f64) -> Option<Eval> {
        let p = self.nvars();
        let nz = p + 1;
        let (y, t) = (&z.as_slice()[..p], z[p]);
        let mut value = -kappa * t;
        let mut grad = DVector::zeros(nz);
        let mut hess = DMatrix::zeros(nz, nz);
        grad[p] = -kappa;

        for b in &self.blocks {
            let n = b.dim();
            let mut m = b.eval(y);
            for i in 0..n {
                m[(i, i)] -= t;
            }
            let chol = linalg::cholesky(&m)?;
            value -= 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let w = chol.inverse();
            // U_j = W ∂Z/∂z_j; ∂Z/∂t = -I
            let mut us: Vec<DMatrix<f64>> = b.coefficients.iter().map(|c| &w * c).collect();
            us.push(-&w);
            for j in 0..nz {
                grad[j] -= us[j].trace();
                for k in 0..=j {
                    let h = trace_of_product(&us[j], &us[k]);
                    hess[(j, k)] += h;
                    if k != j {
                        hess[(k, j)] += h;
                    }
                }
            }
        }
        for (i, &v) in y.iter().enumerate() {
            if let Some(lo) = self.lower[i] {
                let s = v - lo;
                if s <= 0.0 {
                    return None;
                }
                value -= s.ln();
                grad[i] -= 1.0 / s;
                hess[(i, i)] += 1.0 / (s * s);
            }
            if let Some(hi) = self.upper[i] {
                let s = hi - v;
                if s <= 0.0 {
                    return None;
                }
                value -= s.ln();
                grad[i] += 1.0 / s;
                hess[(i, i)] += 1.0 / (s * s);
            }
        }
        let ball = self.radius2 - y.iter().map(|v| v * v).sum::<f64>();
        if ball <= 0.0 {
            return None;
        }
        value -= ball.ln();
        for j in 0..p {
            grad[j] += 2.0 * y[j] / ball;
            hess[(j, j)] += 2.0 / ball;
            for k in 0..p {
                hess[(j, k)] += 4.0 * y[j] * y[k] / (ball * ball);
            }
        }
        let cap = self.cap - t;
        if cap <= 0.0 {
            return None;
        }
        value -= cap.ln();
        grad[p] += 1.0 / cap;
        hess[(p, p)] += 1.0 / (cap * cap);
        value.is_finite().then_some(Eval { value, grad, hess })
    }
}

fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}

fn newton_direction(e: &Eval) -> DVector<f64> {
    let mut h = e.hess.clone();
    let diag_scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = 0.0;
    loop {
        if let Some(chol) = linalg::cholesky(&h) {
            return -chol.solve(&e.grad);
        }
        reg = if reg == 0.0 { 1e-14 * diag_scale } else { reg * 100.0 };
        for i in 0..h.nrows() {
            h[(i, i)] = e.hess[(i, i)] + reg;
        }
    }
}

/// Solve `lmi` together with `extra_psd` blocks required `⪰ ε·I`.
pub fn solve_feasibility(
    lmi: &AffineLmi,
    extra_psd: &[AffineMatrix],
    opts: &SolverOptions,
) -> Result<LmiSolution> {
    let nv = lmi.num_vars();
    for (i, h) in extra_psd.iter().enumerate() {
        if h.num_vars() != nv {
            return Err(Error::Dimension(format!(
                "extra block {i} has {} variables, LMI has {nv}",
                h.num_vars()
            )));
        }
    }
    let bounds: Vec<(f64, f64)> = match &lmi.bounds {
        Some(b) if b.len() != nv => {
            return Err(Error::Dimension(format!("{} bounds for {nv} variables", b.len())))
        }
        Some(b) => b.clone(),
        None => vec![(f64::NEG_INFINITY, f64::INFINITY); nv],
    };
    if let Some((i, _)) = bounds.iter().enumerate().find(|(_, (lo, hi))| !(lo <= hi)) {
        return Err(Error::InvalidInput(format!("empty box for variable {i}")));
    }
    let scale = lmi.scale(extra_psd).max(f64::MIN_POSITIVE);
    let eps = lmi.margin(extra_psd);

    // Fixed variables (lo == hi) are folded into the constants.
    let mut y_full: Vec<f64> = match &opts.start {
        Some(s) if s.len() == nv => s.clone(),
        _ => bounds
            .iter()
            .map(|&(lo, hi)| match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo + 1.0,
                (false, true) => hi - 1.0,
                (false, false) => 0.0,
            })
            .collect(),
    };
    for (v, &(lo, hi)) in y_full.iter_mut().zip(&bounds) {
        if lo == hi {
            *v = lo;
        } else if !(*v > lo && *v < hi) {
            *v = if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if lo.is_finite() {
                lo + 1.0
            } else {
                hi - 1.0
            };
        }
    }
    let free: Vec<usize> = (0..nv).filter(|&i| bounds[i].0 < bounds[i].1).collect();
    let restrict = |m: &AffineMatrix| -> AffineMatrix {
        let mut constant = m.constant.clone();
        for i in (0..nv).filter(|i| !free.contains(i)) {
            constant += &m.coefficients[i] * y_full[i];
        }
        AffineMatrix {
            constant,
            coefficients: free.iter().map(|&i| m.coefficients[i].clone()).collect(),
        }
    };
    let mut blocks = vec![restrict(&lmi.block.negated())];
    blocks.extend(extra_psd.iter().map(restrict));

    let y0: Vec<f64> = free.iter().map(|&i| y_full[i]).collect();
    let lam0 = blocks
        .iter()
        .map(|b| linalg::lambda_min(&b.eval(&y0)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let cap = opts.margin_cap.unwrap_or(1e3 * scale);
    let mut t0 = lam0 - 0.1 * scale.max(lam0.abs()).max(1e-12);
    if t0 >= cap {
        t0 = cap - 0.1 * scale;
    }
    let y0_norm2: f64 = y0.iter().map(|v| v * v).sum();
    let radius2 = opts.radius.powi(2).max(100.0 * y0_norm2).max(1.0);
    let barrier = Barrier {
        blocks,
        lower: free.iter().map(|&i| bounds[i].0.is_finite().then_some(bounds[i].0)).collect(),
        upper: free.iter().map(|&i| bounds[i].1.is_finite().then_some(bounds[i].1)).collect(),
        radius2,
        cap,
    };

    let p = free.len();
    let mut z = DVector::from_iterator(p + 1, y0.iter().copied().chain(std::iter::once(t0)));
    debug_assert!(barrier.feasible(&z));
    let m_weight = barrier.weight();
    let mut kappa = m_weight / scale;
    let mut iterations = 0usize;
    let mut exhausted = false;
    let mut bound_below_eps = false;

    'outer: loop {
        // centering
        loop {
            if iterations >= opts.max_iters {
                exhausted = true;
                break 'outer;
            }
            let Some(e) = barrier.eval(&z, kappa) else {
                // cannot happen for a strictly feasible iterate
                break 'outer;
            };
            let dz = newton_direction(&e);
            let slope = e.grad.dot(&dz);
            iterations += 1;
            // half the squared Newton decrement bounds the suboptimality
            if -slope * 0.5 <= 1e-9 {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            // a predicted decrease under the rounding of the value is noise
            let floor = 1e-14 * e.value.abs().max(1.0);
            while -0.25 * alpha * slope > floor {
                let cand = &z + &dz * alpha;
                if let Some(v) = barrier.value_only(&cand) {
                    let v = v - kappa * cand[p];
                    if v < e.value && v <= e.value + 0.25 * alpha * slope {
                        z = cand;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let gap = m_weight / kappa;
        if z[p] + gap < eps {
            bound_below_eps = true;
            break;
        }
        if gap <= opts.gap_tol * scale {
            break;
        }
        kappa *= 10.0;
    }

    for (k, &i) in free.iter().enumerate() {
        y_full[i] = z[k];
    }
    let witness = check_solution(lmi, extra_psd, &y_full)?;
    let worst = witness.worst();
    let status = if worst <= -eps && witness.bounds_ok {
        LmiStatus::Feasible
    } else if exhausted && !bound_below_eps {
        LmiStatus::MaxIters
    } else {
        LmiStatus::InfeasibleSuspected
    };
    Ok(LmiSolution {
        variables: y_full,
        witness_eigenvalue: worst,
        status,
        margin: z[p],
        epsilon: eps,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(c: f64, coef: f64) -> AffineMatrix {
        AffineMatrix::new(
            DMatrix::from_element(1, 1, c),
            vec![DMatrix::from_element(1, 1, coef)],
        )
        .unwrap()
    }

    #[test]
    fn scalar_box_drives_to_lower_side() {
        let lmi = AffineLmi::new(scalar(0.0, 1.0)).with_bounds(vec![(-1.0, 1.0)]);
        let sol = solve_feasibility(&lmi, &[], &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, LmiStatus::Feasible);
        assert!(sol.variables[0] < -0.999, "{:?}", sol.variables);
        assert!(sol.witness_eigenvalue <= -sol.epsilon / 2.0);
    }

    #[test]
    fn contradictory_pair_is_infeasible() {
        // y ⪯ -ε and -y ⪯ -ε, i.e. y ⪰ ε
        let lmi = AffineLmi::new(scalar(0.0, 1.0)).with_epsilon(1e-6);
        let sol = solve_feasibility(&lmi, &[scalar(0.0, 1.0)], &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, LmiStatus::InfeasibleSuspected);
    }

    #[test]
    fn zero_vars_report_constant_block() {
        let g0 = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, -0.5]));
        let lmi = AffineLmi::new(AffineMatrix::constant(g0, 0).unwrap());
        let w = check_solution(&lmi, &[], &[]).unwrap();
        assert!((w.main + 0.5).abs() < 1e-15);
    }

    #[test]
    fn fixed_variable_is_respected() {
        let lmi = AffineLmi::new(scalar(0.0, 1.0)).with_bounds(vec![(-0.25, -0.25)]);
        let sol = solve_feasibility(&lmi, &[], &SolverOptions::default()).unwrap();
        assert_eq!(sol.variables, vec![-0.25]);
        assert!(sol.is_feasible());
    }

    #[test]
    fn empty_box_is_an_error() {
        let lmi = AffineLmi::new(scalar(0.0, 1.0)).with_bounds(vec![(1.0, 0.0)]);
        assert!(solve_feasibility(&lmi, &[], &SolverOptions::default()).is_err());
    }

    #[test]
    fn matrix_lyapunov_inequality() {
        // find P = [[p1, p2],[p2, p3]] with AᵀP + PA ⪯ -εI, P ⪰ εI for a Hurwitz A
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        let basis = [
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
        ];
        let lyap: Vec<_> = basis.iter().map(|e| a.transpose() * e + e * &a).collect();
        let lmi = AffineLmi::new(AffineMatrix::new(DMatrix::zeros(2, 2), lyap).unwrap());
        let pos = AffineMatrix::new(DMatrix::zeros(2, 2), basis.to_vec()).unwrap();
        let sol = solve_feasibility(&lmi, &[pos.clone()], &SolverOptions::default()).unwrap();
        assert!(sol.is_feasible());
        let w = check_solution(&lmi, &[pos], &sol.variables).unwrap();
        assert!(w.main <= -sol.epsilon && w.extra[0] <= -sol.epsilon);
    }

    #[test]
    fn deterministic() {
        let lmi = AffineLmi::new(scalar(0.3, 1.0)).with_bounds(vec![(-2.0, 5.0)]);
        let a = solve_feasibility(&lmi, &[], &SolverOptions::default()).unwrap();
        let b = solve_feasibility(&lmi, &[], &SolverOptions::default()).unwrap();
        assert_eq!(a.variables[0].to_bits(), b.variables[0].to_bits());
    }
}
