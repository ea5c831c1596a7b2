//! Domain types shared by the controller, the simulator and the metrics:
//! constraint polytopes, ground-truth systems, reward models, Gaussian
//! parameter beliefs and the episodic data records.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qp::{self, QpProblem, QpSettings, QpStatus};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("polytope row {0} is all zeros")]
    ZeroRow(usize),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("constraint rhs must be strictly positive to normalize (row {0})")]
    NonNormalizable(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("covariance for {0} is not positive definite")]
    NonPsd(String),
    #[error("polytope is unbounded in direction {0}")]
    UnboundedSet(usize),
    #[error("linear program failed with status {0:?}")]
    LpFailure(QpStatus),
}

// ---------------------------------------------------------------------------
// Constraint sets
// ---------------------------------------------------------------------------

/// Polytope in normalized gauge form `{ v : F v <= 1 }`.
///
/// A zero-row matrix encodes the whole space. The tightened set used by the
/// controller is `{ v : F v <= (1 - delta) 1 }`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    f: DMatrix<f64>,
}

impl Polytope {
    pub fn new(f: DMatrix<f64>) -> Result<Self, ModelError> {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("polytope rows"));
        }
        for i in 0..f.nrows() {
            if f.row(i).amax() == 0.0 {
                return Err(ModelError::ZeroRow(i));
            }
        }
        Ok(Polytope { f })
    }

    /// Normalize a general description `{ v : A v <= b }` with `b > 0`.
    pub fn from_general(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self, ModelError> {
        if a.nrows() != b.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "constraint matrix has {} rows but rhs has {}",
                a.nrows(),
                b.len()
            )));
        }
        let mut f = a.clone();
        for i in 0..a.nrows() {
            if !(b[i] > 0.0) {
                return Err(ModelError::NonNormalizable(i));
            }
            for j in 0..a.ncols() {
                f[(i, j)] /= b[i];
            }
        }
        Polytope::new(f)
    }

    /// The whole space in the given dimension.
    pub fn unconstrained(dim: usize) -> Self {
        Polytope {
            f: DMatrix::zeros(0, dim),
        }
    }

    pub fn rows(&self) -> usize {
        self.f.nrows()
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.f
    }

    /// `F v`.
    pub fn gauge(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.f * v
    }

    /// `max_i (F v)_i`, or `-inf` for the whole space.
    pub fn max_gauge(&self, v: &DVector<f64>) -> f64 {
        if self.rows() == 0 {
            return f64::NEG_INFINITY;
        }
        self.gauge(v).max()
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        self.max_gauge(v) <= 1.0 + tol
    }

    /// Componentwise bounding box `[lo, hi]` established by linear programs
    /// `max +-v_i`; errors if the set is unbounded in some direction.
    pub fn bounding_box(&self) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
        let d = self.dim();
        let mut lo = DVector::zeros(d);
        let mut hi = DVector::zeros(d);
        for i in 0..d {
            let mut dir = DVector::zeros(d);
            dir[i] = 1.0;
            hi[i] = self
                .maximize_linear(&dir)
                .map_err(|e| match e {
                    ModelError::LpFailure(QpStatus::DualInfeasible) => ModelError::UnboundedSet(i),
                    other => other,
                })?;
            dir[i] = -1.0;
            lo[i] = -self.maximize_linear(&dir).map_err(|e| match e {
                ModelError::LpFailure(QpStatus::DualInfeasible) => ModelError::UnboundedSet(i),
                other => other,
            })?;
        }
        Ok((lo, hi))
    }

    /// `max c'v` over the polytope via the QP solver (P = 0).
    pub fn maximize_linear(&self, c: &DVector<f64>) -> Result<f64, ModelError> {
        let d = self.dim();
        if c.len() != d {
            return Err(ModelError::DimensionMismatch(
                "objective direction dimension".into(),
            ));
        }
        if c.amax() == 0.0 {
            return Ok(0.0);
        }
        if self.rows() == 0 {
            return Err(ModelError::UnboundedSet(0));
        }
        let problem = QpProblem {
            p: DMatrix::zeros(d, d),
            q: -c.clone(),
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            g: self.f.clone(),
            h: DVector::from_element(self.rows(), 1.0),
        };
        let sol = qp::solve_qp(&problem, &QpSettings::default())
            .map_err(|e| ModelError::DimensionMismatch(e.to_string()))?;
        match sol.status {
            QpStatus::Solved => Ok(c.dot(&sol.z)),
            other => Err(ModelError::LpFailure(other)),
        }
    }
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// Known concave quadratic reward component
/// `1/2 x'Hxx x + x'Hxu u + 1/2 u'Huu u + gx'x + gu'u + g0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedQuadratic {
    pub hxx: DMatrix<f64>,
    pub hxu: DMatrix<f64>,
    pub huu: DMatrix<f64>,
    pub gx: DVector<f64>,
    pub gu: DVector<f64>,
    pub g0: f64,
}

impl FixedQuadratic {
    pub fn zero(n: usize, m: usize) -> Self {
        FixedQuadratic {
            hxx: DMatrix::zeros(n, n),
            hxu: DMatrix::zeros(n, m),
            huu: DMatrix::zeros(m, m),
            gx: DVector::zeros(n),
            gu: DVector::zeros(m),
            g0: 0.0,
        }
    }

    pub fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (&self.hxx * x).dot(x)
            + (&self.hxu * u).dot(x)
            + 0.5 * (&self.huu * u).dot(u)
            + self.gx.dot(x)
            + self.gu.dot(u)
            + self.g0
    }

    /// Largest eigenvalue of the (symmetrized) Hessian blocks; concavity
    /// demands it be nonpositive up to a tolerance.
    pub fn max_curvature(&self) -> f64 {
        let eig_max = |m: &DMatrix<f64>| -> f64 {
            if m.nrows() == 0 {
                return 0.0;
            }
            let sym = (m + m.transpose()) * 0.5;
            sym.symmetric_eigen()
                .eigenvalues
                .iter()
                .fold(f64::NEG_INFINITY, |a, &v| a.max(v))
        };
        eig_max(&self.hxx).max(eig_max(&self.huu))
    }
}

/// Affine feature map `psi(t, x, u) = Psi_x x + Psi_u u + psi_0`, optionally
/// active only at the final step of the task.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub psi_x: DMatrix<f64>,
    pub psi_u: DMatrix<f64>,
    pub psi_0: DVector<f64>,
    pub terminal_only: bool,
}

impl FeatureMap {
    pub fn zero(n: usize, m: usize) -> Self {
        FeatureMap {
            psi_x: DMatrix::zeros(0, n),
            psi_u: DMatrix::zeros(0, m),
            psi_0: DVector::zeros(0),
            terminal_only: false,
        }
    }

    /// Number of learned reward weights.
    pub fn n_weights(&self) -> usize {
        self.psi_x.nrows()
    }

    fn is_active(&self, t: usize, horizon: usize) -> bool {
        !self.terminal_only || t + 1 == horizon
    }

    pub fn eval(&self, t: usize, horizon: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        if !self.is_active(t, horizon) {
            return DVector::zeros(self.n_weights());
        }
        &self.psi_x * x + &self.psi_u * u + &self.psi_0
    }

    /// Coefficient matrices at step `t` (zeroed when inactive), used by the
    /// QP builder.
    pub fn coefficients(&self, t: usize, horizon: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        if self.is_active(t, horizon) {
            (self.psi_x.clone(), self.psi_u.clone(), self.psi_0.clone())
        } else {
            (
                DMatrix::zeros(self.psi_x.nrows(), self.psi_x.ncols()),
                DMatrix::zeros(self.psi_u.nrows(), self.psi_u.ncols()),
                DVector::zeros(self.psi_0.len()),
            )
        }
    }
}

/// Mean reward `l(t, x, u) = fixed(x, u) + weights' psi(t, x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub fixed: FixedQuadratic,
    pub weights: DVector<f64>,
    pub features: FeatureMap,
}

impl RewardModel {
    pub fn mean_reward(&self, t: usize, horizon: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.fixed.value(x, u) + self.weights.dot(&self.features.eval(t, horizon, x, u))
    }
}

// ---------------------------------------------------------------------------
// System truth and sampled parameters
// ---------------------------------------------------------------------------

/// Initial-state distribution descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialStateDist {
    Fixed(DVector<f64>),
    UniformBox { low: DVector<f64>, high: DVector<f64> },
}

impl InitialStateDist {
    pub fn dim(&self) -> usize {
        match self {
            InitialStateDist::Fixed(x) => x.len(),
            InitialStateDist::UniformBox { low, .. } => low.len(),
        }
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> DVector<f64> {
        match self {
            InitialStateDist::Fixed(x) => x.clone(),
            InitialStateDist::UniformBox { low, high } => {
                let mut x = DVector::zeros(low.len());
                for i in 0..low.len() {
                    x[i] = rng.gen_range(low[i]..=high[i]);
                }
                x
            }
        }
    }
}

/// Ground-truth plant: `x+ = A x + B u + c + eps_F`, reward
/// `r = l(t, x, u) + eps_R` with independent Gaussian noises.
#[derive(Debug, Clone)]
pub struct LinearSystemTruth {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c_off: DVector<f64>,
    /// Per-dimension process noise standard deviations.
    pub sigma_f: DVector<f64>,
    pub reward: RewardModel,
    pub sigma_r: f64,
    pub x0_dist: InitialStateDist,
}

impl LinearSystemTruth {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Spectral radius of A; reported as a diagnostic, not enforced.
    pub fn spectral_radius(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .fold(0.0f64, |acc, c| acc.max(c.norm()))
    }
}

/// Realized parameters used to parameterize one episode's controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSample {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c_off: DVector<f64>,
    pub theta_r: DVector<f64>,
    pub episode: usize,
}

impl ParamSample {
    pub fn from_truth(truth: &LinearSystemTruth, episode: usize) -> Self {
        ParamSample {
            a: truth.a.clone(),
            b: truth.b.clone(),
            c_off: truth.c_off.clone(),
            theta_r: truth.reward.weights.clone(),
            episode,
        }
    }

    /// Reward model obtained by swapping the learned weights into the known
    /// structure.
    pub fn reward_model(&self, structure: &RewardModel) -> RewardModel {
        RewardModel {
            fixed: structure.fixed.clone(),
            weights: self.theta_r.clone(),
            features: structure.features.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Gaussian belief
// ---------------------------------------------------------------------------

/// Posterior over one transition row, on the masked regressor
/// `[x_masked; u_masked; 1]`. Kept in information form with the moment form
/// refreshed after every update.
#[derive(Debug, Clone)]
pub struct BeliefRow {
    /// Indices into the stacked regressor `[x (0..n), u (n..n+m), 1 (n+m)]`.
    pub mask: Vec<usize>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub info_matrix: DMatrix<f64>,
    pub info_vector: DVector<f64>,
}

/// Posterior over the learned reward weights.
#[derive(Debug, Clone)]
pub struct BeliefBlock {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub info_matrix: DMatrix<f64>,
    pub info_vector: DVector<f64>,
}

fn info_from_moments(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    what: &str,
) -> Result<(DMatrix<f64>, DVector<f64>), ModelError> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| ModelError::NonPsd(what.to_string()))?;
    let info = chol.inverse();
    let eta = &info * mean;
    Ok((info, eta))
}

impl BeliefRow {
    pub fn from_moments(
        mask: Vec<usize>,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        if mean.len() != mask.len() || cov.nrows() != mask.len() || cov.ncols() != mask.len() {
            return Err(ModelError::DimensionMismatch(
                "belief row moments do not match mask size".into(),
            ));
        }
        let (info_matrix, info_vector) = info_from_moments(&mean, &cov, "transition row")?;
        Ok(BeliefRow {
            mask,
            mean,
            cov,
            info_matrix,
            info_vector,
        })
    }
}

impl BeliefBlock {
    pub fn from_moments(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, ModelError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(ModelError::DimensionMismatch(
                "reward belief moments inconsistent".into(),
            ));
        }
        let (info_matrix, info_vector) = info_from_moments(&mean, &cov, "reward weights")?;
        Ok(BeliefBlock {
            mean,
            cov,
            info_matrix,
            info_vector,
        })
    }
}

/// Conjugate Gaussian posterior over all transition rows and the reward
/// weights, with the known noise levels and reward structure carried along.
/// Values are immutable after construction; updates return new beliefs.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub n: usize,
    pub m: usize,
    pub rows: Vec<BeliefRow>,
    pub reward: BeliefBlock,
    pub sigma_f: DVector<f64>,
    pub sigma_r: f64,
    /// Known reward structure; `weights` holds the prior/posterior mean and
    /// is kept in sync with `reward.mean`.
    pub reward_structure: RewardModel,
}

impl GaussianBelief {
    pub fn validate(&self) -> Result<(), ModelError> {
        let reg_dim = self.n + self.m + 1;
        if self.rows.len() != self.n {
            return Err(ModelError::DimensionMismatch(format!(
                "{} belief rows for state dimension {}",
                self.rows.len(),
                self.n
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.mask.iter().any(|&k| k >= reg_dim) {
                return Err(ModelError::DimensionMismatch(format!(
                    "row {i} mask exceeds regressor dimension"
                )));
            }
            if row.cov.clone().cholesky().is_none() {
                return Err(ModelError::NonPsd(format!("transition row {i}")));
            }
        }
        if self.reward.cov.clone().cholesky().is_none() {
            return Err(ModelError::NonPsd("reward weights".into()));
        }
        if self.reward.mean.len() != self.reward_structure.features.n_weights() {
            return Err(ModelError::DimensionMismatch(
                "reward weight count does not match feature map".into(),
            ));
        }
        if self.sigma_f.len() != self.n {
            return Err(ModelError::DimensionMismatch(
                "sigma_f length does not match state dimension".into(),
            ));
        }
        if self.sigma_f.iter().any(|&s| !(s > 0.0)) || !(self.sigma_r > 0.0) {
            return Err(ModelError::DimensionMismatch(
                "noise standard deviations must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Assemble `(A, B, c)` matrices from per-row coefficient vectors laid
    /// out over the masked regressor; masked-out entries are exactly zero.
    pub fn scatter_rows(&self, row_values: &[DVector<f64>]) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let (n, m) = (self.n, self.m);
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        let mut c = DVector::zeros(n);
        for (i, values) in row_values.iter().enumerate() {
            for (k, &idx) in self.rows[i].mask.iter().enumerate() {
                if idx < n {
                    a[(i, idx)] = values[k];
                } else if idx < n + m {
                    b[(i, idx - n)] = values[k];
                } else {
                    c[i] = values[k];
                }
            }
        }
        (a, b, c)
    }

    /// Extract the masked regressor for row `i` from a full `[x; u; 1]`
    /// stacked vector.
    pub fn masked_regressor(&self, i: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let row = &self.rows[i];
        let mut phi = DVector::zeros(row.mask.len());
        for (k, &idx) in row.mask.iter().enumerate() {
            phi[k] = if idx < self.n {
                x[idx]
            } else if idx < self.n + self.m {
                u[idx - self.n]
            } else {
                1.0
            };
        }
        phi
    }

    /// Sum of posterior covariance traces, a scalar uncertainty diagnostic.
    pub fn total_covariance_trace(&self) -> f64 {
        self.rows.iter().map(|r| r.cov.trace()).sum::<f64>() + self.reward.cov.trace()
    }
}

// ---------------------------------------------------------------------------
// Controller specification
// ---------------------------------------------------------------------------

/// Everything that determines the per-step controller QP: horizon, the
/// tightening schedule, penalty weights and the constraint sets.
#[derive(Debug, Clone)]
pub struct MpcSpec {
    /// Task length; prediction horizons shrink toward it.
    pub horizon: usize,
    /// Tightening fractions by prediction offset, length `horizon`.
    pub delta: Vec<f64>,
    /// Linear slack penalty weights, one per state-constraint row.
    pub c1: DVector<f64>,
    /// Quadratic slack penalty weight.
    pub c2: f64,
    pub x_set: Polytope,
    pub u_set: Polytope,
    /// Tiny input regularization making affine rewards strictly concave.
    pub reg_u: f64,
}

impl MpcSpec {
    /// Linear tightening ramp from `delta0` to `delta_max`.
    pub fn linear_delta(horizon: usize, delta0: f64, delta_max: f64) -> Vec<f64> {
        (0..horizon)
            .map(|k| {
                if horizon <= 1 {
                    delta0
                } else {
                    delta0 + (delta_max - delta0) * k as f64 / (horizon - 1) as f64
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Episode data
// ---------------------------------------------------------------------------

/// One closed-loop transition tuple plus controller diagnostics.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
    pub reward: f64,
    /// Realized softening of the tightened state constraint at `x`.
    pub slack: DVector<f64>,
    /// Optimal value of the controller QP solved at this step, in the
    /// maximization sign convention.
    pub objective: f64,
}

/// Exactly one task length worth of steps under a fixed parameter sample.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    pub sample: ParamSample,
}

impl EpisodeRecord {
    pub fn max_slack(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| if s.slack.len() > 0 { s.slack.max() } else { 0.0 })
            .fold(0.0, f64::max)
    }
}

/// Full learning history of one agent on one seed: episode records plus the
/// belief snapshots `beliefs[e]` held *before* episode `e` (so
/// `beliefs[0]` is the prior and `beliefs.len() == episodes.len() + 1`).
#[derive(Debug, Clone)]
pub struct LearningTrace {
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub beliefs: Vec<GaussianBelief>,
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// A single named rule violation; validation reports and never panics.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// The system side being validated together with an [`MpcSpec`].
#[derive(Debug, Clone, Copy)]
pub enum SystemRef<'a> {
    Truth(&'a LinearSystemTruth),
    Belief(&'a GaussianBelief),
}

/// Check every type invariant of the spec/system pair, returning the empty
/// list exactly when all of them hold.
pub fn validate(spec: &MpcSpec, system: SystemRef<'_>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut violation = |field: &str, rule: String| {
        out.push(Violation {
            field: field.to_string(),
            rule,
        })
    };

    if spec.horizon == 0 {
        violation("mpc.horizon", "horizon must be at least 1".into());
    }
    if spec.delta.len() != spec.horizon {
        violation(
            "mpc.delta",
            format!(
                "schedule length {} does not match horizon {}",
                spec.delta.len(),
                spec.horizon
            ),
        );
    }
    if let Some(&d0) = spec.delta.first() {
        if !(d0 > 0.0) {
            violation("mpc.delta", "delta_0 must be positive".into());
        }
    }
    if spec.delta.windows(2).any(|w| w[1] < w[0]) {
        violation("mpc.delta", "delta not non-decreasing".into());
    }
    if spec.delta.iter().any(|&d| d > 1.0) {
        violation("mpc.delta", "delta must not exceed 1".into());
    }
    if spec.c1.len() != spec.x_set.rows() {
        violation(
            "mpc.c1",
            format!(
                "length {} does not match {} state-constraint rows",
                spec.c1.len(),
                spec.x_set.rows()
            ),
        );
    }
    if spec.c1.iter().any(|&c| !(c > 0.0)) {
        violation("mpc.c1", "c1 must be positive".into());
    }
    if !(spec.c2 >= 0.0) {
        violation("mpc.c2", "c2 must be nonnegative".into());
    }
    if !(spec.reg_u >= 0.0) {
        violation("mpc.reg_u", "reg_u must be nonnegative".into());
    }

    let (n, m) = match system {
        SystemRef::Truth(truth) => {
            if truth.sigma_f.iter().any(|&s| !(s > 0.0)) {
                violation("system.sigma_f", "sigma_f must be positive".into());
            }
            if !(truth.sigma_r > 0.0) {
                violation("reward.sigma_r", "sigma_r must be positive".into());
            }
            if truth.a.nrows() != truth.a.ncols() || truth.b.nrows() != truth.a.nrows() {
                violation("system", "A must be square and B row-conformant".into());
            }
            if truth.c_off.len() != truth.n() || truth.sigma_f.len() != truth.n() {
                violation("system", "offset/noise dimensions inconsistent".into());
            }
            if truth.x0_dist.dim() != truth.n() {
                violation("experiment.x0", "initial-state dimension mismatch".into());
            }
            if let InitialStateDist::UniformBox { low, high } = &truth.x0_dist {
                if low.iter().zip(high.iter()).any(|(l, h)| l > h) {
                    violation("experiment.x0", "uniform box has low > high".into());
                }
            }
            if truth.reward.fixed.max_curvature() > 1e-9 {
                violation(
                    "reward.fixed_quadratic",
                    "quadratic part must be negative semidefinite".into(),
                );
            }
            if truth.reward.weights.len() != truth.reward.features.n_weights() {
                violation("reward.weights", "weight/feature count mismatch".into());
            }
            (truth.n(), truth.m())
        }
        SystemRef::Belief(belief) => {
            if let Err(e) = belief.validate() {
                violation("belief", e.to_string());
            }
            if belief.reward_structure.fixed.max_curvature() > 1e-9 {
                violation(
                    "reward.fixed_quadratic",
                    "quadratic part must be negative semidefinite".into(),
                );
            }
            (belief.n, belief.m)
        }
    };

    if spec.x_set.dim() != n {
        violation(
            "constraints.A_x",
            format!("state polytope dimension {} != {}", spec.x_set.dim(), n),
        );
    }
    if spec.u_set.dim() != m {
        violation(
            "constraints.A_u",
            format!("input polytope dimension {} != {}", spec.u_set.dim(), m),
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Reward bound
// ---------------------------------------------------------------------------

/// Upper bound `c_R >= sup |l(t, x, u)|` over `X x U` for any weight vector
/// with `|theta_j| <= weight_bound`, computed by maximizing each additive
/// term with linear programs over the polytopes plus an interval bound on
/// the quadratic part.
pub fn reward_bound_cr(
    reward: &RewardModel,
    x_set: &Polytope,
    u_set: &Polytope,
    weight_bound: f64,
) -> Result<f64, ModelError> {
    let (x_lo, x_hi) = x_set.bounding_box()?;
    let (u_lo, u_hi) = u_set.bounding_box()?;
    let fixed = &reward.fixed;

    // max |c'v| over a convex set is the larger of max(c'v) and max(-c'v).
    let max_abs_linear = |set: &Polytope, c: &DVector<f64>| -> Result<f64, ModelError> {
        if c.amax() == 0.0 {
            return Ok(0.0);
        }
        let up = set.maximize_linear(c)?;
        let down = set.maximize_linear(&(-c))?;
        Ok(up.max(down))
    };

    let mut bound = fixed.g0.abs();
    bound += max_abs_linear(x_set, &fixed.gx)?;
    bound += max_abs_linear(u_set, &fixed.gu)?;

    // Feature terms: separable over the two sets, scaled by the weight bound.
    let features = &reward.features;
    for j in 0..features.n_weights() {
        let fx = max_abs_linear(x_set, &features.psi_x.row(j).transpose())?;
        let fu = max_abs_linear(u_set, &features.psi_u.row(j).transpose())?;
        bound += weight_bound * (fx + fu + features.psi_0[j].abs());
    }

    // Interval bound on the quadratic part over the bounding boxes.
    let mx: Vec<f64> = (0..x_lo.len())
        .map(|i| x_lo[i].abs().max(x_hi[i].abs()))
        .collect();
    let mu: Vec<f64> = (0..u_lo.len())
        .map(|i| u_lo[i].abs().max(u_hi[i].abs()))
        .collect();
    let mut quad = 0.0;
    for i in 0..fixed.hxx.nrows() {
        for j in 0..fixed.hxx.ncols() {
            quad += 0.5 * fixed.hxx[(i, j)].abs() * mx[i] * mx[j];
        }
    }
    for i in 0..fixed.hxu.nrows() {
        for j in 0..fixed.hxu.ncols() {
            quad += fixed.hxu[(i, j)].abs() * mx[i] * mu[j];
        }
    }
    for i in 0..fixed.huu.nrows() {
        for j in 0..fixed.huu.ncols() {
            quad += 0.5 * fixed.huu[(i, j)].abs() * mu[i] * mu[j];
        }
    }
    Ok(bound + quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn box_polytope(half_widths: &[f64]) -> Polytope {
        let d = half_widths.len();
        let mut f = DMatrix::zeros(2 * d, d);
        for (i, &w) in half_widths.iter().enumerate() {
            f[(i, i)] = 1.0 / w;
            f[(d + i, i)] = -1.0 / w;
        }
        Polytope::new(f).unwrap()
    }

    #[test]
    fn polytope_normalizes_general_form() {
        let a = dmatrix![2.0, 0.0; 0.0, 4.0];
        let b = dvector![4.0, 2.0];
        let p = Polytope::from_general(&a, &b).unwrap();
        assert!((p.matrix()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((p.matrix()[(1, 1)] - 2.0).abs() < 1e-15);
        assert!(p.contains(&dvector![2.0, 0.5], 1e-12));
        assert!(!p.contains(&dvector![2.1, 0.0], 1e-12));
    }

    #[test]
    fn polytope_rejects_zero_row_and_nonpositive_rhs() {
        let f = dmatrix![1.0, 0.0; 0.0, 0.0];
        assert!(matches!(Polytope::new(f), Err(ModelError::ZeroRow(1))));
        let a = dmatrix![1.0; -1.0];
        let b = dvector![1.0, 0.0];
        assert!(matches!(
            Polytope::from_general(&a, &b),
            Err(ModelError::NonNormalizable(1))
        ));
    }

    #[test]
    fn bounding_box_of_scaled_box() {
        let p = box_polytope(&[2.0, 0.5]);
        let (lo, hi) = p.bounding_box().unwrap();
        assert!((hi[0] - 2.0).abs() < 1e-6);
        assert!((lo[0] + 2.0).abs() < 1e-6);
        assert!((hi[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn bounding_box_detects_unbounded_halfspace() {
        // x <= 1 only: unbounded below.
        let p = Polytope::new(dmatrix![1.0]).unwrap();
        assert!(matches!(
            p.bounding_box(),
            Err(ModelError::UnboundedSet(0))
        ));
    }

    #[test]
    fn reward_bound_linear_input_cost() {
        // l = -(u_0 + u_1) over the box |u_i| <= 1: bound 2.
        let n = 1;
        let m = 2;
        let mut fixed = FixedQuadratic::zero(n, m);
        fixed.gu = dvector![-1.0, -1.0];
        let reward = RewardModel {
            fixed,
            weights: DVector::zeros(0),
            features: FeatureMap::zero(n, m),
        };
        let x_set = box_polytope(&[1.0]);
        let u_set = box_polytope(&[1.0, 1.0]);
        let cr = reward_bound_cr(&reward, &x_set, &u_set, 0.0).unwrap();
        assert!((cr - 2.0).abs() < 1e-6, "cr = {cr}");
    }

    #[test]
    fn reward_bound_zero_reward() {
        let reward = RewardModel {
            fixed: FixedQuadratic::zero(1, 1),
            weights: DVector::zeros(0),
            features: FeatureMap::zero(1, 1),
        };
        let s = box_polytope(&[1.0]);
        let cr = reward_bound_cr(&reward, &s, &s, 1.0).unwrap();
        assert_eq!(cr, 0.0);
    }

    #[test]
    fn reward_bound_negative_quadratic() {
        // l = -x^2 on x in [-1, 1]: interval bound 1.
        let mut fixed = FixedQuadratic::zero(1, 1);
        fixed.hxx = dmatrix![-2.0];
        let reward = RewardModel {
            fixed,
            weights: DVector::zeros(0),
            features: FeatureMap::zero(1, 1),
        };
        let s = box_polytope(&[1.0]);
        let cr = reward_bound_cr(&reward, &s, &s, 0.0).unwrap();
        assert!((cr - 1.0).abs() < 1e-6, "cr = {cr}");
    }

    #[test]
    fn validate_flags_bad_delta_and_c1() {
        let spec = MpcSpec {
            horizon: 2,
            delta: vec![0.1, 0.05],
            c1: dvector![1.0, 0.0],
            c2: 1.0,
            x_set: box_polytope(&[1.0]),
            u_set: box_polytope(&[1.0]),
            reg_u: 0.0,
        };
        let truth = scalar_truth();
        let violations = validate(&spec, SystemRef::Truth(&truth));
        assert!(violations
            .iter()
            .any(|v| v.field == "mpc.delta" && v.rule.contains("non-decreasing")));
        assert!(violations.iter().any(|v| v.field == "mpc.c1"));
    }

    #[test]
    fn validate_accepts_well_formed_spec() {
        let spec = MpcSpec {
            horizon: 2,
            delta: vec![0.05, 0.1],
            c1: dvector![10.0, 10.0],
            c2: 1.0,
            x_set: box_polytope(&[1.0]),
            u_set: box_polytope(&[1.0]),
            reg_u: 1e-6,
        };
        let truth = scalar_truth();
        assert!(validate(&spec, SystemRef::Truth(&truth)).is_empty());
    }

    fn scalar_truth() -> LinearSystemTruth {
        LinearSystemTruth {
            a: dmatrix![0.9],
            b: dmatrix![1.0],
            c_off: dvector![0.0],
            sigma_f: dvector![0.1],
            reward: RewardModel {
                fixed: FixedQuadratic::zero(1, 1),
                weights: DVector::zeros(0),
                features: FeatureMap::zero(1, 1),
            },
            sigma_r: 0.1,
            x0_dist: InitialStateDist::Fixed(dvector![0.0]),
        }
    }

    #[test]
    fn feature_map_terminal_switch() {
        let fm = FeatureMap {
            psi_x: dmatrix![1.0],
            psi_u: dmatrix![0.0],
            psi_0: dvector![0.0],
            terminal_only: true,
        };
        let x = dvector![3.0];
        let u = dvector![0.0];
        assert_eq!(fm.eval(3, 10, &x, &u)[0], 0.0);
        assert_eq!(fm.eval(9, 10, &x, &u)[0], 3.0);
    }

    #[test]
    fn scatter_respects_masks() {
        let belief = GaussianBelief {
            n: 2,
            m: 1,
            rows: vec![
                BeliefRow::from_moments(vec![0, 2, 3], dvector![0.9, -1.0, 0.5], DMatrix::identity(3, 3))
                    .unwrap(),
                BeliefRow::from_moments(vec![1, 3], dvector![0.8, 0.1], DMatrix::identity(2, 2))
                    .unwrap(),
            ],
            reward: BeliefBlock::from_moments(dvector![1.0], DMatrix::identity(1, 1)).unwrap(),
            sigma_f: dvector![0.1, 0.1],
            sigma_r: 0.1,
            reward_structure: RewardModel {
                fixed: FixedQuadratic::zero(2, 1),
                weights: dvector![1.0],
                features: FeatureMap {
                    psi_x: DMatrix::zeros(1, 2),
                    psi_u: dmatrix![-1.0],
                    psi_0: dvector![0.0],
                    terminal_only: false,
                },
            },
        };
        belief.validate().unwrap();
        let values = vec![dvector![0.9, -1.0, 0.5], dvector![0.8, 0.1]];
        let (a, b, c) = belief.scatter_rows(&values);
        assert_eq!(a[(0, 0)], 0.9);
        assert_eq!(a[(0, 1)], 0.0);
        assert_eq!(b[(0, 0)], -1.0);
        assert_eq!(c[0], 0.5);
        assert_eq!(a[(1, 1)], 0.8);
        assert_eq!(b[(1, 0)], 0.0);
        assert_eq!(c[1], 0.1);
    }
}
