//! Dense-interface convex quadratic program solver.
//!
//! Solves problems of the form
//!
//! ```text
//!     minimize    1/2 z' P z + q' z
//!     subject to  Aeq z  = beq
//!                 G z   <= h
//! ```
//!
//! with `P` symmetric positive semidefinite. The solver is an
//! operator-splitting (ADMM) scheme over the stacked constraint matrix with
//! per-row bounds, followed by an active-set polish step that refines the
//! iterate to near machine precision by solving the reduced KKT system. KKT
//! systems are factored with an unpivoted banded LDL' after a reverse
//! Cuthill-McKee reordering, which keeps multi-stage control problems cheap
//! without a general sparse factorization.
//!
//! A solve reports `Solved` only when the unscaled primal and dual residuals
//! pass `eps_abs + eps_rel * scale` in the infinity norm (the polish step
//! normally lands far below that). [`QpSolver`] keeps the factorization, the
//! warm state and the last successful active set alive across solves, so
//! problem families that differ only in `q`, `beq` or `h` (as produced by a
//! shrinking-horizon controller) are re-solved at the cost of a couple of
//! band substitutions.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const INF: f64 = f64::INFINITY;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cost matrix not symmetric: |P - P'| = {0:.3e} exceeds 1e-10")]
    NotSymmetric(f64),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("empty decision vector")]
    EmptyProblem,
}

/// Outcome classification of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

/// Problem data in standard form; see the module docs.
///
/// Zero-row `a_eq`/`g` blocks encode the absence of the corresponding
/// constraint kind.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem `min 1/2 z'Pz + q'z`.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let d = q.len();
        QpProblem {
            p,
            q,
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            g: DMatrix::zeros(0, d),
            h: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn n_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn n_ineq(&self) -> usize {
        self.g.nrows()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let d = self.dim();
        if d == 0 {
            return Err(QpError::EmptyProblem);
        }
        if self.p.nrows() != d || self.p.ncols() != d {
            return Err(QpError::DimensionMismatch(format!(
                "P is {}x{}, expected {d}x{d}",
                self.p.nrows(),
                self.p.ncols()
            )));
        }
        if self.a_eq.ncols() != d || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::DimensionMismatch(format!(
                "Aeq is {}x{} with rhs of length {}",
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len()
            )));
        }
        if self.g.ncols() != d || self.g.nrows() != self.h.len() {
            return Err(QpError::DimensionMismatch(format!(
                "G is {}x{} with rhs of length {}",
                self.g.nrows(),
                self.g.ncols(),
                self.h.len()
            )));
        }
        for (name, m) in [("P", &self.p), ("Aeq", &self.a_eq), ("G", &self.g)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(QpError::NonFinite(name));
            }
        }
        for (name, v) in [("q", &self.q), ("beq", &self.b_eq), ("h", &self.h)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(QpError::NonFinite(name));
            }
        }
        let mut asym = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                asym = asym.max((self.p[(i, j)] - self.p[(j, i)]).abs());
            }
        }
        if asym > 1e-10 {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(())
    }

    /// Objective `1/2 z'Pz + q'z` at a point.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (&self.p * z).dot(z) + self.q.dot(z)
    }
}

/// Solver tolerances and splitting parameters.
#[derive(Debug, Clone)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iterations: usize,
    /// ADMM penalty on constraint rows.
    pub rho: f64,
    /// Penalty scaling applied to equality rows on top of `rho`.
    pub rho_eq_scale: f64,
    /// Primal regularization in the splitting.
    pub sigma: f64,
    /// Over-relaxation parameter.
    pub alpha: f64,
    pub adaptive_rho: bool,
    /// Refine the active set by a reduced KKT solve once ADMM is close.
    pub polish: bool,
    /// Diagonal regularization used inside the polish factorization only.
    pub polish_delta: f64,
    /// Residual check (and polish attempt) interval in iterations.
    pub check_interval: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            max_iterations: 20_000,
            rho: 0.1,
            rho_eq_scale: 1e3,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            polish: true,
            polish_delta: 1e-9,
            check_interval: 25,
        }
    }
}

impl QpSettings {
    pub fn validate(&self) -> Result<(), QpError> {
        if !(self.eps_abs > 0.0 && self.eps_rel > 0.0) {
            return Err(QpError::DimensionMismatch(
                "tolerances must be positive".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(QpError::DimensionMismatch(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Primal/dual solution with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub mu_ineq: DVector<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub objective: f64,
}

/// Infinity-norm KKT residuals; see [`kkt_residuals`].
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub complementarity: f64,
}

/// The four infinity-norm KKT residuals of a candidate solution:
/// `|Pz + q + Aeq'l + G'm|`, `|Aeq z - beq|`, `|max(Gz - h, 0)|` and
/// `max_i |m_i (Gz - h)_i|`. Pure function of its arguments.
pub fn kkt_residuals(problem: &QpProblem, solution: &QpSolution) -> Result<KktResiduals, QpError> {
    let d = problem.dim();
    if solution.z.len() != d
        || solution.lambda_eq.len() != problem.n_eq()
        || solution.mu_ineq.len() != problem.n_ineq()
    {
        return Err(QpError::DimensionMismatch(
            "solution does not match problem dimensions".into(),
        ));
    }
    let mut grad = &problem.p * &solution.z + &problem.q;
    if problem.n_eq() > 0 {
        grad += problem.a_eq.transpose() * &solution.lambda_eq;
    }
    if problem.n_ineq() > 0 {
        grad += problem.g.transpose() * &solution.mu_ineq;
    }
    let stationarity = grad.amax();
    let primal_eq = if problem.n_eq() > 0 {
        (&problem.a_eq * &solution.z - &problem.b_eq).amax()
    } else {
        0.0
    };
    let (mut primal_ineq, mut complementarity) = (0.0f64, 0.0f64);
    if problem.n_ineq() > 0 {
        let gz = &problem.g * &solution.z;
        for i in 0..problem.n_ineq() {
            let viol = gz[i] - problem.h[i];
            primal_ineq = primal_ineq.max(viol.max(0.0));
            complementarity = complementarity.max((solution.mu_ineq[i] * viol).abs());
        }
    }
    Ok(KktResiduals {
        stationarity,
        primal_eq,
        primal_ineq,
        complementarity,
    })
}

/// One-shot solve with a cold start.
pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let mut solver = QpSolver::new(problem, settings.clone())?;
    Ok(solver.solve())
}

// ---------------------------------------------------------------------------
// Sparse storage
// ---------------------------------------------------------------------------

/// Compressed sparse row matrix, used only inside the solver.
#[derive(Debug, Clone)]
struct Csr {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl Csr {
    fn from_dense(m: &DMatrix<f64>) -> Csr {
        let (n_rows, n_cols) = (m.nrows(), m.ncols());
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for i in 0..n_rows {
            for j in 0..n_cols {
                let v = m[(i, j)];
                if v != 0.0 {
                    indices.push(j);
                    data.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Csr {
            n_rows,
            n_cols,
            indptr,
            indices,
            data,
        }
    }

    fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[lo..hi], &self.data[lo..hi])
    }

    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&j, &v)| v * x[j]).sum()
    }

    /// `y += alpha * row_i'`.
    fn add_scaled_row_to(&self, i: usize, alpha: f64, y: &mut [f64]) {
        let (idx, val) = self.row(i);
        for (&j, &v) in idx.iter().zip(val) {
            y[j] += alpha * v;
        }
    }

    fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n_rows {
            out[i] = self.row_dot(i, x);
        }
    }

    fn mul_transpose_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_cols);
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n_rows {
            if x[i] != 0.0 {
                self.add_scaled_row_to(i, x[i], out);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reverse Cuthill-McKee and banded LDL'
// ---------------------------------------------------------------------------

/// Reverse Cuthill-McKee ordering of an undirected adjacency structure.
/// Returns `perm` with `perm[new] = old`.
fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.sort_by_key(|&i| adj[i].len());
    let mut queue = std::collections::VecDeque::new();
    for &start in &nodes {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| adj[w].len());
            for w in nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Unpivoted banded LDL' factorization of a symmetric quasi-definite matrix
/// given in full CSR form, after a reverse Cuthill-McKee permutation.
#[derive(Debug, Clone)]
struct BandLdl {
    n: usize,
    bw: usize,
    perm: Vec<usize>,
    /// Row-major band: entry `(i, i - bw + c)` at `band[i * (bw + 1) + c]`;
    /// `c = bw` is the diagonal (holding D after factorization).
    band: Vec<f64>,
}

impl BandLdl {
    /// Factor `k`. `sign[old_index]` is the expected pivot sign of the
    /// quasi-definite structure, used only to regularize vanishing pivots.
    fn factor(k: &Csr, sign: &[i8]) -> BandLdl {
        let n = k.n_rows;
        let mut adj = vec![Vec::new(); n];
        for i in 0..n {
            let (idx, _) = k.row(i);
            for &j in idx {
                if j != i {
                    adj[i].push(j);
                }
            }
        }
        let perm = reverse_cuthill_mckee(&adj);
        let mut pos = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            pos[old] = new;
        }
        let mut bw = 0usize;
        for i in 0..n {
            let (idx, _) = k.row(i);
            for &j in idx {
                bw = bw.max(pos[i].abs_diff(pos[j]));
            }
        }
        let stride = bw + 1;
        let mut band = vec![0.0f64; n * stride];
        for old_i in 0..n {
            let (idx, val) = k.row(old_i);
            for (&old_j, &v) in idx.iter().zip(val) {
                let (pi, pj) = (pos[old_i], pos[old_j]);
                if pi >= pj {
                    band[pi * stride + (bw - (pi - pj))] = v;
                }
            }
        }
        // In-place factorization: L strictly below the diagonal, D on it.
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(bw));
                let mut sum = band[i * stride + (bw - (i - j))];
                for kk in klo..j {
                    let lik = band[i * stride + (bw - (i - kk))];
                    if lik == 0.0 {
                        continue;
                    }
                    let ljk = band[j * stride + (bw - (j - kk))];
                    if ljk != 0.0 {
                        sum -= lik * ljk * band[kk * stride + bw];
                    }
                }
                if j < i {
                    band[i * stride + (bw - (i - j))] = sum / band[j * stride + bw];
                } else {
                    // Quasi-definiteness keeps pivots away from zero; the
                    // guard only engages on numerically degenerate data.
                    let guard = 1e-13;
                    band[i * stride + bw] = if sum.abs() < guard {
                        let s = if sum != 0.0 {
                            sum.signum()
                        } else {
                            f64::from(sign[perm[i]])
                        };
                        s * guard
                    } else {
                        sum
                    };
                }
            }
        }
        BandLdl { n, bw, perm, band }
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        let stride = bw + 1;
        let mut y = vec![0.0f64; n];
        for i in 0..n {
            y[i] = x[self.perm[i]];
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for j in lo..i {
                let l = self.band[i * stride + (bw - (i - j))];
                if l != 0.0 {
                    s -= l * y[j];
                }
            }
            y[i] = s;
        }
        for i in 0..n {
            y[i] /= self.band[i * stride + bw];
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = y[i];
            for j in (i + 1)..=hi {
                let l = self.band[j * stride + (bw - (j - i))];
                if l != 0.0 {
                    s -= l * y[j];
                }
            }
            y[i] = s;
        }
        for i in 0..n {
            x[self.perm[i]] = y[i];
        }
    }
}

// ---------------------------------------------------------------------------
// The solver
// ---------------------------------------------------------------------------

/// Prepared solver instance. Construction validates the problem, equilibrates
/// the constraint rows and sparsifies the data; the first solve factors the
/// splitting KKT matrix. Subsequent solves reuse factorizations, and
/// `set_linear_cost` / `set_equality_rhs` / `set_inequality_rhs` update the
/// parametric parts without refactoring. Instances are independent; a single
/// solve runs on one thread and shares no mutable state.
pub struct QpSolver {
    d: usize,
    n_eq: usize,
    n_ineq: usize,
    settings: QpSettings,
    p: Csr,
    /// Row-equilibrated stacked constraint matrix [Aeq; G].
    a: Csr,
    /// Row scales: scaled row i = row_scale[i] * original row i.
    row_scale: Vec<f64>,
    q: Vec<f64>,
    /// Scaled bounds.
    l: Vec<f64>,
    u: Vec<f64>,
    rho_vec: Vec<f64>,
    kkt: Option<BandLdl>,
    kkt_sign: Vec<i8>,
    // Iterate state, kept across solves as the warm start (scaled duals).
    z: Vec<f64>,
    w: Vec<f64>,
    y: Vec<f64>,
    /// Last successful polish active set and its factorization.
    polish_cache: Option<PolishCache>,
}

struct PolishCache {
    /// Constraint rows in the reduced system: all equalities, then the
    /// active inequality rows (by stacked row index).
    active_rows: Vec<usize>,
    ldl: BandLdl,
}

struct ResidualReport {
    r_prim: f64,
    r_dual: f64,
    eps_prim: f64,
    eps_dual: f64,
}

impl QpSolver {
    pub fn new(problem: &QpProblem, settings: QpSettings) -> Result<Self, QpError> {
        problem.validate()?;
        settings.validate()?;
        let d = problem.dim();
        let n_eq = problem.n_eq();
        let n_ineq = problem.n_ineq();
        let m = n_eq + n_ineq;

        let mut a_rows = DMatrix::zeros(m, d);
        a_rows.rows_mut(0, n_eq).copy_from(&problem.a_eq);
        a_rows.rows_mut(n_eq, n_ineq).copy_from(&problem.g);
        let mut row_scale = vec![1.0f64; m];
        for i in 0..m {
            let norm = a_rows.row(i).amax();
            if norm > 0.0 {
                row_scale[i] = 1.0 / norm;
            }
            for j in 0..d {
                a_rows[(i, j)] *= row_scale[i];
            }
        }
        let mut l = vec![0.0f64; m];
        let mut u = vec![0.0f64; m];
        for i in 0..n_eq {
            l[i] = problem.b_eq[i] * row_scale[i];
            u[i] = l[i];
        }
        for i in 0..n_ineq {
            l[n_eq + i] = -INF;
            u[n_eq + i] = problem.h[i] * row_scale[n_eq + i];
        }
        let mut rho_vec = vec![settings.rho; m];
        for r in rho_vec.iter_mut().take(n_eq) {
            *r *= settings.rho_eq_scale;
        }
        let mut kkt_sign = vec![1i8; d + m];
        for s in kkt_sign.iter_mut().skip(d) {
            *s = -1;
        }
        Ok(QpSolver {
            d,
            n_eq,
            n_ineq,
            settings,
            p: Csr::from_dense(&problem.p),
            a: Csr::from_dense(&a_rows),
            row_scale,
            q: problem.q.iter().copied().collect(),
            l,
            u,
            rho_vec,
            kkt: None,
            kkt_sign,
            z: vec![0.0; d],
            w: vec![0.0; m],
            y: vec![0.0; m],
            polish_cache: None,
        })
    }

    /// Replace the linear cost; keeps factorizations and warm state.
    pub fn set_linear_cost(&mut self, q: &DVector<f64>) {
        assert_eq!(q.len(), self.d, "linear cost dimension");
        self.q.copy_from_slice(q.as_slice());
    }

    /// Replace the equality right-hand side.
    pub fn set_equality_rhs(&mut self, b_eq: &DVector<f64>) {
        assert_eq!(b_eq.len(), self.n_eq, "equality rhs dimension");
        for i in 0..self.n_eq {
            self.l[i] = b_eq[i] * self.row_scale[i];
            self.u[i] = self.l[i];
        }
    }

    /// Replace the inequality right-hand side.
    pub fn set_inequality_rhs(&mut self, h: &DVector<f64>) {
        assert_eq!(h.len(), self.n_ineq, "inequality rhs dimension");
        for i in 0..self.n_ineq {
            self.u[self.n_eq + i] = h[i] * self.row_scale[self.n_eq + i];
        }
    }

    /// Seed the next solve with a primal/dual guess (original-space duals).
    pub fn warm_start(&mut self, z: &DVector<f64>, lambda_eq: &DVector<f64>, mu: &DVector<f64>) {
        assert_eq!(z.len(), self.d);
        assert_eq!(lambda_eq.len(), self.n_eq);
        assert_eq!(mu.len(), self.n_ineq);
        self.z.copy_from_slice(z.as_slice());
        for i in 0..self.n_eq {
            self.y[i] = lambda_eq[i] / self.row_scale[i];
        }
        for i in 0..self.n_ineq {
            self.y[self.n_eq + i] = mu[i] / self.row_scale[self.n_eq + i];
        }
        let mut az = vec![0.0; self.n_eq + self.n_ineq];
        self.a.mul_vec(&self.z, &mut az);
        for i in 0..az.len() {
            self.w[i] = az[i].clamp(self.l[i], self.u[i]);
        }
    }

    pub fn reset_warm_start(&mut self) {
        self.z.iter_mut().for_each(|v| *v = 0.0);
        self.w.iter_mut().for_each(|v| *v = 0.0);
        self.y.iter_mut().for_each(|v| *v = 0.0);
        self.polish_cache = None;
    }

    fn ensure_kkt(&mut self) {
        if self.kkt.is_none() {
            let m = self.n_eq + self.n_ineq;
            let diag: Vec<f64> = (0..m).map(|i| -1.0 / self.rho_vec[i]).collect();
            let k = assemble_kkt(&self.p, &self.a, self.settings.sigma, &diag, None);
            self.kkt = Some(BandLdl::factor(&k, &self.kkt_sign));
        }
    }

    /// Unscaled residuals and their tolerances at the current iterate.
    fn residual_report(&self, az: &[f64]) -> ResidualReport {
        let m = self.n_eq + self.n_ineq;
        let mut r_prim = 0.0f64;
        let mut prim_scale = 0.0f64;
        for i in 0..m {
            let inv = 1.0 / self.row_scale[i];
            r_prim = r_prim.max((az[i] - self.w[i]).abs() * inv);
            prim_scale = prim_scale.max((az[i] * inv).abs()).max((self.w[i] * inv).abs());
        }
        let mut pz = vec![0.0f64; self.d];
        self.p.mul_vec(&self.z, &mut pz);
        let mut aty = vec![0.0f64; self.d];
        self.a.mul_transpose_vec(&self.y, &mut aty);
        let mut r_dual = 0.0f64;
        let mut dual_scale = 0.0f64;
        for j in 0..self.d {
            r_dual = r_dual.max((pz[j] + self.q[j] + aty[j]).abs());
            dual_scale = dual_scale
                .max(pz[j].abs())
                .max(self.q[j].abs())
                .max(aty[j].abs());
        }
        ResidualReport {
            r_prim,
            r_dual,
            eps_prim: self.settings.eps_abs + self.settings.eps_rel * prim_scale,
            eps_dual: self.settings.eps_abs + self.settings.eps_rel * dual_scale,
        }
    }

    /// Solve with the current data, warm state and caches. Deterministic for
    /// a fixed instance history.
    pub fn solve(&mut self) -> QpSolution {
        let m = self.n_eq + self.n_ineq;

        if self.settings.polish {
            // Fast path: re-verify the cached active set under the new data.
            if let Some(sol) = self.try_cached_polish() {
                return sol;
            }
            if self.n_ineq == 0 {
                // Equality-constrained problems need no splitting at all.
                if let Some(sol) = self.polish(&[], 0) {
                    return sol;
                }
            }
        }

        self.ensure_kkt();
        let mut rhs = vec![0.0f64; self.d + m];
        let mut az = vec![0.0f64; m];
        let mut prev_z = self.z.clone();
        let mut prev_y = self.y.clone();
        let mut best: Option<(f64, Vec<f64>, Vec<f64>, f64, f64, usize)> = None;
        let mut iter = 0usize;
        let max_iter = self.settings.max_iterations;
        let alpha = self.settings.alpha;
        let mut since_refactor = 0usize;

        while iter < max_iter {
            iter += 1;
            since_refactor += 1;
            for j in 0..self.d {
                rhs[j] = self.settings.sigma * self.z[j] - self.q[j];
            }
            for i in 0..m {
                rhs[self.d + i] = self.w[i] - self.y[i] / self.rho_vec[i];
            }
            self.kkt.as_ref().unwrap().solve_in_place(&mut rhs);
            for i in 0..m {
                let nu = rhs[self.d + i];
                let w_tilde = self.w[i] + (nu - self.y[i]) / self.rho_vec[i];
                let w_relaxed = alpha * w_tilde + (1.0 - alpha) * self.w[i];
                let w_new = (w_relaxed + self.y[i] / self.rho_vec[i]).clamp(self.l[i], self.u[i]);
                self.y[i] += self.rho_vec[i] * (w_relaxed - w_new);
                self.w[i] = w_new;
            }
            for j in 0..self.d {
                self.z[j] = alpha * rhs[j] + (1.0 - alpha) * self.z[j];
            }

            if iter % self.settings.check_interval == 0 || iter == max_iter {
                self.a.mul_vec(&self.z, &mut az);
                let rep = self.residual_report(&az);

                if self.settings.polish
                    && rep.r_prim < 1e3 * rep.eps_prim
                    && rep.r_dual < 1e3 * rep.eps_dual
                {
                    let active = self.detect_active_set(&az);
                    if let Some(sol) = self.polish(&active, iter) {
                        return sol;
                    }
                }
                if rep.r_prim <= rep.eps_prim && rep.r_dual <= rep.eps_dual {
                    return self.extract_solution(QpStatus::Solved, rep.r_prim, rep.r_dual, iter);
                }
                let score = rep.r_prim + rep.r_dual;
                if best.as_ref().map_or(true, |(s, ..)| score < *s) {
                    best = Some((
                        score,
                        self.z.clone(),
                        self.y.clone(),
                        rep.r_prim,
                        rep.r_dual,
                        iter,
                    ));
                }
                if let Some(status) = self.certificates(&prev_z, &prev_y) {
                    return self.extract_solution(status, rep.r_prim, rep.r_dual, iter);
                }
                prev_z.copy_from_slice(&self.z);
                prev_y.copy_from_slice(&self.y);

                if self.settings.adaptive_rho && since_refactor >= 100 {
                    let num = rep.r_prim / rep.eps_prim.max(1e-300);
                    let den = (rep.r_dual / rep.eps_dual.max(1e-300)).max(1e-300);
                    let ratio = (num / den).sqrt();
                    if ratio.is_finite() && ratio > 0.0 && !(0.2..=5.0).contains(&ratio) {
                        for (i, r) in self.rho_vec.iter_mut().enumerate() {
                            *r = (*r * ratio).clamp(1e-6, 1e6);
                            if i < self.n_eq {
                                *r = (*r).max(self.settings.rho * self.settings.rho_eq_scale);
                            }
                        }
                        self.kkt = None;
                        self.ensure_kkt();
                        since_refactor = 0;
                    }
                }
            }
        }
        match best {
            Some((_, z, y, r_prim, r_dual, it)) => {
                self.z = z;
                self.y = y;
                self.extract_solution(QpStatus::MaxIterations, r_prim, r_dual, it)
            }
            None => {
                self.a.mul_vec(&self.z, &mut az);
                let rep = self.residual_report(&az);
                self.extract_solution(QpStatus::MaxIterations, rep.r_prim, rep.r_dual, max_iter)
            }
        }
    }

    fn detect_active_set(&self, az: &[f64]) -> Vec<bool> {
        let mut active = vec![false; self.n_ineq];
        for i in 0..self.n_ineq {
            let r = self.n_eq + i;
            let slack = self.u[r] - az[r];
            if self.y[r] > 1e-10 || slack < 1e-7 * (1.0 + self.u[r].abs()) {
                active[i] = true;
            }
        }
        active
    }

    /// Reduced KKT solve on (equalities + active inequalities), with up to
    /// four rounds of active-set correction, each candidate verified against
    /// the exact optimality conditions before being accepted.
    fn polish(&mut self, active0: &[bool], iters: usize) -> Option<QpSolution> {
        let mut active = active0.to_vec();
        for _ in 0..4 {
            let cache = self.build_polish_factor(&active);
            let (z, mu) = self.polish_solve(&cache)?;
            let mut changed = false;
            let mut next = active.clone();
            for (k, &row) in cache.active_rows.iter().enumerate().skip(self.n_eq) {
                if mu[k] < -1e-9 {
                    next[row - self.n_eq] = false;
                    changed = true;
                }
            }
            let m = self.n_eq + self.n_ineq;
            let mut az = vec![0.0; m];
            self.a.mul_vec(&z, &mut az);
            for i in 0..self.n_ineq {
                let r = self.n_eq + i;
                if !next[i] && az[r] > self.u[r] + 1e-9 * (1.0 + self.u[r].abs()) {
                    next[i] = true;
                    changed = true;
                }
            }
            if !changed {
                let sol = self.accept_polished(&cache, z, mu, iters);
                if sol.is_some() {
                    self.polish_cache = Some(cache);
                }
                return sol;
            }
            active = next;
        }
        None
    }

    fn try_cached_polish(&mut self) -> Option<QpSolution> {
        let cache = self.polish_cache.take()?;
        let out = self.polish_solve(&cache).and_then(|(z, mu)| {
            if mu.iter().skip(self.n_eq).any(|&v| v < -1e-9) {
                return None;
            }
            // Inactive rows must remain feasible under the new data.
            let m = self.n_eq + self.n_ineq;
            let mut az = vec![0.0; m];
            self.a.mul_vec(&z, &mut az);
            let mut is_active = vec![false; m];
            for &r in &cache.active_rows {
                is_active[r] = true;
            }
            for (r, &a) in az.iter().enumerate().skip(self.n_eq) {
                if !is_active[r] && a > self.u[r] + 1e-9 * (1.0 + self.u[r].abs()) {
                    return None;
                }
            }
            self.accept_polished(&cache, z, mu, 0)
        });
        if out.is_some() {
            self.polish_cache = Some(cache);
        }
        out
    }

    fn build_polish_factor(&self, active: &[bool]) -> PolishCache {
        let active_rows: Vec<usize> = (0..self.n_eq)
            .chain(
                (0..self.n_ineq)
                    .filter(|&i| active[i])
                    .map(|i| self.n_eq + i),
            )
            .collect();
        let delta = self.settings.polish_delta;
        let diag = vec![-delta; active_rows.len()];
        let k = assemble_kkt(&self.p, &self.a, delta, &diag, Some(&active_rows));
        let mut sign = vec![1i8; self.d + active_rows.len()];
        for s in sign.iter_mut().skip(self.d) {
            *s = -1;
        }
        PolishCache {
            ldl: BandLdl::factor(&k, &sign),
            active_rows,
        }
    }

    /// Solve the reduced KKT system `[P A_act'; A_act 0][z; mu] = [-q; b_act]`
    /// through the regularized factorization plus iterative refinement.
    fn polish_solve(&self, cache: &PolishCache) -> Option<(Vec<f64>, Vec<f64>)> {
        let n_act = cache.active_rows.len();
        let n = self.d + n_act;
        let mut rhs = vec![0.0f64; n];
        for j in 0..self.d {
            rhs[j] = -self.q[j];
        }
        for (k, &row) in cache.active_rows.iter().enumerate() {
            rhs[self.d + k] = self.u[row];
        }
        let mut sol = rhs.clone();
        cache.ldl.solve_in_place(&mut sol);
        for _ in 0..2 {
            // Residual of the exact (unregularized) system.
            let mut resid = vec![0.0f64; n];
            let mut pz = vec![0.0; self.d];
            self.p.mul_vec(&sol[..self.d], &mut pz);
            for j in 0..self.d {
                resid[j] = rhs[j] - pz[j];
            }
            for (k, &row) in cache.active_rows.iter().enumerate() {
                let mu_k = sol[self.d + k];
                if mu_k != 0.0 {
                    let (idx, val) = self.a.row(row);
                    for (&j, &v) in idx.iter().zip(val) {
                        resid[j] -= mu_k * v;
                    }
                }
                resid[self.d + k] = rhs[self.d + k] - self.a.row_dot(row, &sol[..self.d]);
            }
            cache.ldl.solve_in_place(&mut resid);
            for (s, r) in sol.iter_mut().zip(&resid) {
                *s += r;
            }
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((sol[..self.d].to_vec(), sol[self.d..].to_vec()))
    }

    /// Install a polished candidate if it passes the full residual check.
    fn accept_polished(
        &mut self,
        cache: &PolishCache,
        z: Vec<f64>,
        mu: Vec<f64>,
        iters: usize,
    ) -> Option<QpSolution> {
        let m = self.n_eq + self.n_ineq;
        let mut y = vec![0.0f64; m];
        for (k, &row) in cache.active_rows.iter().enumerate() {
            y[row] = if row < self.n_eq { mu[k] } else { mu[k].max(0.0) };
        }
        let z_old = std::mem::replace(&mut self.z, z);
        let y_old = std::mem::replace(&mut self.y, y);
        let mut az = vec![0.0; m];
        self.a.mul_vec(&self.z, &mut az);
        let w_old = self.w.clone();
        for i in 0..m {
            self.w[i] = az[i].clamp(self.l[i], self.u[i]);
        }
        let rep = self.residual_report(&az);
        if rep.r_prim <= rep.eps_prim && rep.r_dual <= rep.eps_dual {
            Some(self.extract_solution(QpStatus::Solved, rep.r_prim, rep.r_dual, iters))
        } else {
            self.z = z_old;
            self.y = y_old;
            self.w = w_old;
            None
        }
    }

    /// Primal/dual infeasibility certificates from successive differences.
    fn certificates(&self, prev_z: &[f64], prev_y: &[f64]) -> Option<QpStatus> {
        let m = self.n_eq + self.n_ineq;
        let tol = 3e-6;
        let dy: Vec<f64> = (0..m)
            .map(|i| (self.y[i] - prev_y[i]) * self.row_scale[i])
            .collect();
        let dy_norm = dy.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if dy_norm > 1e-10 {
            let dy_scaled: Vec<f64> = (0..m).map(|i| dy[i] / self.row_scale[i]).collect();
            let mut atdy = vec![0.0; self.d];
            self.a.mul_transpose_vec(&dy_scaled, &mut atdy);
            if atdy.iter().all(|v| v.abs() <= tol * dy_norm) {
                let mut support = 0.0f64;
                let mut valid = true;
                for i in 0..m {
                    let lo = self.l[i] / self.row_scale[i];
                    let hi = self.u[i] / self.row_scale[i];
                    let pos = dy[i].max(0.0);
                    let neg = dy[i].min(0.0);
                    if hi.is_finite() {
                        support += hi * pos;
                    } else if pos > tol * dy_norm {
                        valid = false;
                    }
                    if lo.is_finite() {
                        support += lo * neg;
                    } else if -neg > tol * dy_norm {
                        valid = false;
                    }
                }
                if valid && support < -tol * dy_norm {
                    return Some(QpStatus::PrimalInfeasible);
                }
            }
        }
        let dz: Vec<f64> = (0..self.d).map(|j| self.z[j] - prev_z[j]).collect();
        let dz_norm = dz.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if dz_norm > 1e-10 {
            let mut pdz = vec![0.0; self.d];
            self.p.mul_vec(&dz, &mut pdz);
            let qdz: f64 = self.q.iter().zip(&dz).map(|(&a, &b)| a * b).sum();
            if pdz.iter().all(|v| v.abs() <= tol * dz_norm) && qdz < -tol * dz_norm {
                let mut adz = vec![0.0; m];
                self.a.mul_vec(&dz, &mut adz);
                let ray = (0..m).all(|i| {
                    if i < self.n_eq {
                        adz[i].abs() <= tol * dz_norm
                    } else {
                        adz[i] <= tol * dz_norm
                    }
                });
                if ray {
                    return Some(QpStatus::DualInfeasible);
                }
            }
        }
        None
    }

    fn extract_solution(
        &self,
        status: QpStatus,
        r_prim: f64,
        r_dual: f64,
        iterations: usize,
    ) -> QpSolution {
        let z = DVector::from_column_slice(&self.z);
        let mut lambda_eq = DVector::zeros(self.n_eq);
        for i in 0..self.n_eq {
            lambda_eq[i] = self.y[i] * self.row_scale[i];
        }
        let mut mu_ineq = DVector::zeros(self.n_ineq);
        for i in 0..self.n_ineq {
            mu_ineq[i] = (self.y[self.n_eq + i] * self.row_scale[self.n_eq + i]).max(0.0);
        }
        let mut pz = vec![0.0; self.d];
        self.p.mul_vec(&self.z, &mut pz);
        let objective = 0.5 * pz.iter().zip(&self.z).map(|(a, b)| a * b).sum::<f64>()
            + self.q.iter().zip(&self.z).map(|(a, b)| a * b).sum::<f64>();
        QpSolution {
            z,
            lambda_eq,
            mu_ineq,
            status,
            primal_residual: r_prim,
            dual_residual: r_dual,
            iterations,
            objective,
        }
    }
}

/// Assemble the symmetric KKT matrix `[[P + sigma I, Asel']; [Asel, diag]]`
/// in full CSR form, optionally restricted to a subset of constraint rows.
fn assemble_kkt(
    p: &Csr,
    a: &Csr,
    sigma: f64,
    diag: &[f64],
    rows: Option<&[usize]>,
) -> Csr {
    let d = p.n_rows;
    let sel: Vec<usize> = match rows {
        Some(r) => r.to_vec(),
        None => (0..a.n_rows).collect(),
    };
    let n = d + sel.len();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut data = Vec::new();
    indptr.push(0usize);
    let mut at_cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
    for (k, &row) in sel.iter().enumerate() {
        let (idx, val) = a.row(row);
        for (&j, &v) in idx.iter().zip(val) {
            at_cols[j].push((k, v));
        }
    }
    for i in 0..d {
        let (idx, val) = p.row(i);
        let mut has_diag = false;
        for (&j, &v) in idx.iter().zip(val) {
            let v = if j == i {
                has_diag = true;
                v + sigma
            } else {
                v
            };
            indices.push(j);
            data.push(v);
        }
        if !has_diag {
            indices.push(i);
            data.push(sigma);
        }
        for &(r, v) in &at_cols[i] {
            indices.push(d + r);
            data.push(v);
        }
        indptr.push(indices.len());
    }
    for (k, &row) in sel.iter().enumerate() {
        let (idx, val) = a.row(row);
        for (&j, &v) in idx.iter().zip(val) {
            indices.push(j);
            data.push(v);
        }
        indices.push(d + k);
        data.push(diag[k]);
        indptr.push(indices.len());
    }
    Csr {
        n_rows: n,
        n_cols: n,
        indptr,
        indices,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn settings() -> QpSettings {
        QpSettings::default()
    }

    #[test]
    fn unconstrained_identity_minimum_at_origin() {
        let p = QpProblem::unconstrained(DMatrix::identity(2, 2), dvector![0.0, 0.0]);
        let sol = solve_qp(&p, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(sol.z.amax() < 1e-9);
    }

    #[test]
    fn scalar_bound_active_with_dual_two() {
        // minimize (z - 1)^2 s.t. z <= 0; optimum z = 0 with mu = 2.
        let p = QpProblem {
            p: dmatrix![2.0],
            q: dvector![-2.0],
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            g: dmatrix![1.0],
            h: dvector![0.0],
        };
        let sol = solve_qp(&p, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(sol.z[0].abs() < 1e-8, "z = {}", sol.z[0]);
        assert!((sol.mu_ineq[0] - 2.0).abs() < 1e-6, "mu = {}", sol.mu_ineq[0]);
        let res = kkt_residuals(&p, &sol).unwrap();
        assert!(res.stationarity < 1e-8);
        assert!(res.complementarity < 1e-8);
    }

    #[test]
    fn equality_constrained_projection() {
        // minimize 1/2 |z|^2 s.t. z0 + z1 = 2 -> z = (1, 1).
        let p = QpProblem {
            p: DMatrix::identity(2, 2),
            q: dvector![0.0, 0.0],
            a_eq: dmatrix![1.0, 1.0],
            b_eq: dvector![2.0],
            g: DMatrix::zeros(0, 2),
            h: DVector::zeros(0),
        };
        let sol = solve_qp(&p, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.z[0] - 1.0).abs() < 1e-9);
        assert!((sol.z[1] - 1.0).abs() < 1e-9);
        assert!((sol.lambda_eq[0] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn infeasible_box_detected() {
        // z <= -1 and -z <= -1 (z >= 1) cannot both hold.
        let p = QpProblem {
            p: dmatrix![1.0],
            q: dvector![0.0],
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            g: dmatrix![1.0; -1.0],
            h: dvector![-1.0, -1.0],
        };
        let sol = solve_qp(&p, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn unbounded_lp_detected() {
        // minimize -z s.t. z >= 0: unbounded descent direction.
        let p = QpProblem {
            p: dmatrix![0.0],
            q: dvector![-1.0],
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            g: dmatrix![-1.0],
            h: dvector![0.0],
        };
        let sol = solve_qp(&p, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::DualInfeasible);
    }

    #[test]
    fn rejects_asymmetric_cost() {
        let p = QpProblem {
            p: dmatrix![1.0, 0.5; 0.0, 1.0],
            q: dvector![0.0, 0.0],
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
            g: DMatrix::zeros(0, 2),
            h: DVector::zeros(0),
        };
        assert!(matches!(p.validate(), Err(QpError::NotSymmetric(_))));
    }

    #[test]
    fn kkt_residuals_zero_dimensional_blocks() {
        let p = QpProblem::unconstrained(DMatrix::identity(2, 2), dvector![1.0, -1.0]);
        let sol = solve_qp(&p, &settings()).unwrap();
        let res = kkt_residuals(&p, &sol).unwrap();
        assert_eq!(res.primal_eq, 0.0);
        assert_eq!(res.primal_ineq, 0.0);
        assert_eq!(res.complementarity, 0.0);
    }

    #[test]
    fn kkt_residuals_detect_perturbation() {
        // Analytic optimum of the scalar bound problem, then perturb z by
        // 0.1: stationarity |P z + q + G'mu| = |2*0.1 - 2 + 2| = 0.2.
        let p = QpProblem {
            p: dmatrix![2.0],
            q: dvector![-2.0],
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            g: dmatrix![1.0],
            h: dvector![0.0],
        };
        let exact = QpSolution {
            z: dvector![0.0],
            lambda_eq: DVector::zeros(0),
            mu_ineq: dvector![2.0],
            status: QpStatus::Solved,
            primal_residual: 0.0,
            dual_residual: 0.0,
            iterations: 0,
            objective: 0.0,
        };
        let res = kkt_residuals(&p, &exact).unwrap();
        assert!(res.stationarity <= 1e-12);
        assert!(res.primal_eq <= 1e-12);
        assert!(res.primal_ineq <= 1e-12);
        assert!(res.complementarity <= 1e-12);

        let mut shifted = exact;
        shifted.z[0] += 0.1;
        let res = kkt_residuals(&p, &shifted).unwrap();
        assert!((res.stationarity - 0.2).abs() < 1e-12);
    }

    #[test]
    fn scaling_cost_leaves_optimizer_unchanged() {
        let p = QpProblem {
            p: dmatrix![3.0, 0.4; 0.4, 2.0],
            q: dvector![-1.0, 0.7],
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
            g: dmatrix![1.0, 0.0; 0.0, 1.0; -1.0, -1.0],
            h: dvector![0.3, 0.5, 1.0],
        };
        let base = solve_qp(&p, &settings()).unwrap();
        for alpha in [0.01, 7.0, 350.0] {
            let scaled = QpProblem {
                p: &p.p * alpha,
                q: &p.q * alpha,
                ..p.clone()
            };
            let sol = solve_qp(&scaled, &settings()).unwrap();
            assert_eq!(sol.status, QpStatus::Solved);
            assert!(
                (sol.z.clone() - base.z.clone()).amax() < 1e-6,
                "alpha {alpha}: {:?} vs {:?}",
                sol.z,
                base.z
            );
        }
    }

    #[test]
    fn band_ldl_matches_dense_solve() {
        let k = dmatrix![
            4.0, 1.0, 0.0, 1.0;
            1.0, 3.0, 0.5, 0.0;
            0.0, 0.5, 2.0, 1.0;
            1.0, 0.0, 1.0, -1.5
        ];
        let csr = Csr::from_dense(&k);
        let ldl = BandLdl::factor(&csr, &[1, 1, 1, -1]);
        let rhs = dvector![1.0, -2.0, 0.5, 3.0];
        let mut x = rhs.iter().copied().collect::<Vec<f64>>();
        ldl.solve_in_place(&mut x);
        let x = DVector::from_column_slice(&x);
        let expect = k.lu().solve(&rhs).unwrap();
        assert!((x - expect).amax() < 1e-10);
    }

    #[test]
    fn prepared_solver_tracks_rhs_updates() {
        // minimize 1/2 z^2 s.t. z = b, solved repeatedly for varying b.
        let p = QpProblem {
            p: dmatrix![1.0],
            q: dvector![0.0],
            a_eq: dmatrix![1.0],
            b_eq: dvector![0.5],
            g: DMatrix::zeros(0, 1),
            h: DVector::zeros(0),
        };
        let mut solver = QpSolver::new(&p, settings()).unwrap();
        for b in [0.5, -2.0, 11.0] {
            solver.set_equality_rhs(&dvector![b]);
            let sol = solver.solve();
            assert_eq!(sol.status, QpStatus::Solved);
            assert!((sol.z[0] - b).abs() < 1e-9, "b = {b}, z = {}", sol.z[0]);
        }
    }
}
