//! Projected compressive sensing: sparse outlier recovery in the orthogonal
//! complement of a subspace estimate.
//!
//! Given a frame `y = l + x + v` with `l` close to `span(P_hat)`, the chain
//! [`projected_cs_step`] projects away the subspace (`y_tilde = Psi y` with
//! `Psi = I - P_hat P_hat^T`), solves an l1 problem for the outliers, picks a
//! support by magnitude thresholding, debiases by least squares on that
//! support, and returns `l_hat = y - x_hat`.
//!
//! `Psi` is only ever applied operator-style (`v - P (P^T v)`), never formed.
//! Because `Psi` is an orthogonal projector, `Psi^T Psi = Psi` and the
//! gradient of the data term has Lipschitz constant exactly 1, which the l1
//! solver exploits.

use crate::linalg::BasisMatrix;
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsError {
    #[error("frame length {got} does not match basis ambient dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("support size {size} exceeds ambient dimension {n}")]
    SupportTooLarge { size: usize, n: usize },
    #[error("support index {index} out of range for dimension {n}")]
    SupportIndexOutOfRange { index: usize, n: usize },
    #[error("least-squares system on support of size {size} is singular: support overlaps span(P_hat)")]
    SingularSupportSystem { size: usize },
    #[error("xi must be finite and non-negative, got {xi}")]
    InvalidXi { xi: f64 },
}

/// Solver knobs for the l1 minimization and the least-squares debias.
#[derive(Debug, Clone, PartialEq)]
pub struct CsSolverConfig {
    /// Relative iterate-change tolerance for the l1 solver.
    pub l1_tolerance: f64,
    /// Iteration cap per l1 subproblem.
    pub l1_max_iterations: usize,
    /// Relative residual tolerance for the debias conjugate gradient.
    pub ls_tolerance: f64,
    /// Iteration cap for the debias conjugate gradient.
    pub ls_max_iterations: usize,
    /// Number of outer bisection steps on the l1 penalty weight.
    pub bisection_steps: usize,
    /// Penalty floor as a fraction of the largest useful weight.
    pub lambda_floor_ratio: f64,
    /// Acceptance band around the residual target (0.05 accepts within 5%).
    pub constraint_slack: f64,
}

impl Default for CsSolverConfig {
    fn default() -> Self {
        Self {
            l1_tolerance: 1e-4,
            l1_max_iterations: 300,
            ls_tolerance: 1e-10,
            ls_max_iterations: 10,
            bisection_steps: 10,
            lambda_floor_ratio: 1e-6,
            constraint_slack: 0.05,
        }
    }
}

/// Output of [`l1_min`].
#[derive(Debug, Clone)]
pub struct SparseEstimate {
    pub x: DVector<f64>,
    /// `||Psi (y_tilde - x)||_2` at the returned iterate.
    pub residual_norm: f64,
    /// Penalty weight of the accepted subproblem.
    pub lambda: f64,
    /// Total inner iterations across bisection steps.
    pub iterations: usize,
    /// Whether the residual constraint was met (always true for the zero
    /// shortcut; for `xi == 0` the solver reports inner convergence at the
    /// penalty floor instead, since the constraint set has empty interior).
    pub converged: bool,
}

/// Output of [`ls_debias`].
#[derive(Debug, Clone)]
pub struct DebiasedEstimate {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    pub cg_iterations: usize,
    pub converged: bool,
}

/// Output of [`projected_cs_step`].
#[derive(Debug, Clone)]
pub struct CsStepResult {
    pub x_hat: DVector<f64>,
    /// `y - x_hat`, computed by exact subtraction.
    pub l_hat: DVector<f64>,
    pub support: Vec<usize>,
    /// `||Psi l_hat||_2`, the out-of-subspace energy left after recovery.
    pub proj_residual: f64,
    pub lambda: f64,
    pub l1_iterations: usize,
    pub l1_converged: bool,
    pub ls_converged: bool,
}

/// Reusable scratch for projector applications in per-frame loops.
struct ProjScratch {
    coeffs: DVector<f64>,
}

impl ProjScratch {
    fn new(r: usize) -> Self {
        Self { coeffs: DVector::zeros(r) }
    }

    /// `out = (I - P P^T) v` without allocation.
    fn apply(&mut self, p: &BasisMatrix, v: &DVector<f64>, out: &mut DVector<f64>) {
        self.coeffs.gemv_tr(1.0, p.as_matrix(), v, 0.0);
        out.copy_from(v);
        out.gemv(-1.0, p.as_matrix(), &self.coeffs, 1.0);
    }
}

/// Soft threshold by `t`, in place.
fn soft_threshold(v: &mut DVector<f64>, t: f64) {
    for i in 0..v.len() {
        let a = v[i];
        v[i] = if a > t {
            a - t
        } else if a < -t {
            a + t
        } else {
            0.0
        };
    }
}

/// Solves `min ||x||_1 subject to ||Psi (y_tilde - x)||_2 <= xi`.
///
/// The constrained problem is attacked through its penalized form
/// `min lambda ||x||_1 + 0.5 ||Psi (y_tilde - x)||^2`, solved by an
/// accelerated proximal gradient loop, with an outer geometric bisection on
/// `lambda` until the residual lands within `constraint_slack` of `xi` or the
/// penalty floor is reached. If even the floor cannot meet the constraint the
/// best iterate is returned with `converged = false`.
pub fn l1_min(
    p_hat: &BasisMatrix,
    y_tilde: &DVector<f64>,
    xi: f64,
    config: &CsSolverConfig,
) -> Result<SparseEstimate, CsError> {
    l1_min_warm(p_hat, y_tilde, xi, config, None)
}

/// [`l1_min`] with an optional starting penalty weight carried across frames.
///
/// Streams are locally stationary, so the accepted weight of the previous
/// frame is usually feasible immediately and saves most bisection steps.
pub fn l1_min_warm(
    p_hat: &BasisMatrix,
    y_tilde: &DVector<f64>,
    xi: f64,
    config: &CsSolverConfig,
    warm_lambda: Option<f64>,
) -> Result<SparseEstimate, CsError> {
    let n = p_hat.n();
    if y_tilde.len() != n {
        return Err(CsError::DimensionMismatch { expected: n, got: y_tilde.len() });
    }
    if !xi.is_finite() || xi < 0.0 {
        return Err(CsError::InvalidXi { xi });
    }

    let mut scratch = ProjScratch::new(p_hat.r());
    let mut py = DVector::zeros(n);
    scratch.apply(p_hat, y_tilde, &mut py);
    let py_norm = py.norm();

    // Outlier-free shortcut: the zero vector is already feasible and optimal.
    if py_norm <= xi {
        return Ok(SparseEstimate {
            x: DVector::zeros(n),
            residual_norm: py_norm,
            lambda: py.amax().max(0.0),
            iterations: 0,
            converged: true,
        });
    }

    let lambda_max = py.amax();
    let lambda_floor = lambda_max * config.lambda_floor_ratio;
    let band_lo = xi * (1.0 - config.constraint_slack);
    let band_hi = xi * (1.0 + config.constraint_slack);

    let mut lo = lambda_floor;
    let mut hi = lambda_max;
    let mut x = DVector::zeros(n);
    let mut total_iters = 0usize;
    let mut best: Option<(DVector<f64>, f64, f64)> = None; // (x, lambda, residual)
    let mut floor_attempt: Option<(DVector<f64>, f64, bool)> = None;

    let mut lambda = match warm_lambda {
        Some(w) if w.is_finite() && w > 0.0 => w.clamp(lambda_floor, lambda_max * 0.5),
        _ => (lo * hi).sqrt(),
    };
    if xi == 0.0 {
        // The constraint has empty interior; go straight to the floor.
        lambda = lambda_floor;
    }

    for _ in 0..config.bisection_steps {
        let (iters, inner_converged) =
            fista(p_hat, &py, lambda, &mut x, config, &mut scratch);
        total_iters += iters;
        let mut resid = DVector::zeros(n);
        scratch.apply(p_hat, &x, &mut resid);
        resid -= &py;
        let res = resid.norm();

        if lambda <= lambda_floor * (1.0 + 1e-12) {
            floor_attempt = Some((x.clone(), res, inner_converged));
        }
        if res <= band_hi {
            let better = best.as_ref().map_or(true, |(_, bl, _)| lambda > *bl);
            if better {
                best = Some((x.clone(), lambda, res));
            }
            if res >= band_lo {
                break; // inside the acceptance band
            }
            lo = lambda; // feasible with room: try a sparser solution
        } else {
            hi = lambda;
        }
        if hi / lo <= 1.0 + 1e-9 {
            break;
        }
        lambda = (lo * hi).sqrt();
    }

    if let Some((x, lambda, res)) = best {
        return Ok(SparseEstimate {
            x,
            residual_norm: res,
            lambda,
            iterations: total_iters,
            converged: true,
        });
    }

    // No feasible weight found; fall back to the floor solution.
    let (x, res, inner_converged) = match floor_attempt {
        Some(t) => t,
        None => {
            let (iters, inner_converged) =
                fista(p_hat, &py, lambda_floor, &mut x, config, &mut scratch);
            total_iters += iters;
            let mut resid = DVector::zeros(n);
            scratch.apply(p_hat, &x, &mut resid);
            resid -= &py;
            (x, resid.norm(), inner_converged)
        }
    };
    let converged = xi == 0.0 && inner_converged;
    Ok(SparseEstimate {
        x,
        residual_norm: res,
        lambda: lambda_floor,
        iterations: total_iters,
        converged,
    })
}

/// Accelerated proximal gradient loop on
/// `0.5 ||Psi(y - x)||^2 + lambda ||x||_1`, warm-started from `x`.
///
/// The data-term gradient `Psi x - Psi y` has Lipschitz constant exactly
/// `||Psi||_2^2 = 1` (orthogonal projector), so the unit step is provably
/// safe and no per-iteration line search is needed. Momentum restarts on the
/// gradient-mapping sign test. Returns (iterations, converged).
fn fista(
    p_hat: &BasisMatrix,
    py: &DVector<f64>,
    lambda: f64,
    x: &mut DVector<f64>,
    config: &CsSolverConfig,
    scratch: &mut ProjScratch,
) -> (usize, bool) {
    let n = py.len();
    let mut z = x.clone();
    let mut x_prev = x.clone();
    let mut grad = DVector::zeros(n);
    let mut candidate = DVector::zeros(n);
    let mut theta = 1.0_f64;

    for k in 0..config.l1_max_iterations {
        // grad = Psi z - Psi y
        scratch.apply(p_hat, &z, &mut grad);
        grad -= py;
        // candidate = prox_{lambda ||.||_1}(z - grad)
        candidate.copy_from(&z);
        candidate -= &grad;
        soft_threshold(&mut candidate, lambda);

        // Gradient-mapping restart: momentum is overshooting when the step
        // moves against the direction the prox point actually took.
        let mut overshoot = 0.0;
        for i in 0..n {
            overshoot += (z[i] - candidate[i]) * (candidate[i] - x_prev[i]);
        }

        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;

        let mut delta_sq = 0.0;
        let mut x_norm_sq = 0.0;
        for i in 0..n {
            let d = candidate[i] - x_prev[i];
            delta_sq += d * d;
            x_norm_sq += candidate[i] * candidate[i];
        }

        if overshoot > 0.0 {
            theta = 1.0;
            z.copy_from(&candidate);
        } else {
            theta = theta_next;
            for i in 0..n {
                z[i] = candidate[i] + beta * (candidate[i] - x_prev[i]);
            }
        }
        x_prev.copy_from(&candidate);

        if delta_sq.sqrt() <= config.l1_tolerance * x_norm_sq.sqrt().max(1.0) {
            x.copy_from(&candidate);
            return (k + 1, true);
        }
    }
    x.copy_from(&x_prev);
    (config.l1_max_iterations, false)
}

/// Indices where `|x_i|` strictly exceeds `omega`.
pub fn estimate_support(x: &DVector<f64>, omega: f64) -> Vec<usize> {
    (0..x.len()).filter(|&i| x[i].abs() > omega).collect()
}

/// Least-squares debias on a fixed support:
/// `x_hat = I_T (Psi_T^T Psi_T)^{-1} Psi_T^T y_tilde`.
///
/// Solved by conjugate gradients on the normal equations, with `Psi` applied
/// operator-style (cost `O(n r)` per iteration). The restricted system is
/// singular exactly when some vector supported on `T` lies in `span(P_hat)`;
/// the guaranteed case `|T| > n - r` is rejected up front and the remaining
/// degenerate geometries are caught through a vanishing curvature direction.
pub fn ls_debias(
    p_hat: &BasisMatrix,
    y_tilde: &DVector<f64>,
    support: &[usize],
    config: &CsSolverConfig,
) -> Result<DebiasedEstimate, CsError> {
    let n = p_hat.n();
    if y_tilde.len() != n {
        return Err(CsError::DimensionMismatch { expected: n, got: y_tilde.len() });
    }
    if support.len() > n {
        return Err(CsError::SupportTooLarge { size: support.len(), n });
    }
    for &i in support {
        if i >= n {
            return Err(CsError::SupportIndexOutOfRange { index: i, n });
        }
    }
    // Psi has rank n - r, so more than n - r support columns are always
    // dependent and the normal system cannot be inverted.
    if support.len() + p_hat.r() > n {
        return Err(CsError::SingularSupportSystem { size: support.len() });
    }
    let mut scratch = ProjScratch::new(p_hat.r());
    let mut py = DVector::zeros(n);
    scratch.apply(p_hat, y_tilde, &mut py);

    if support.is_empty() {
        return Ok(DebiasedEstimate {
            x: DVector::zeros(n),
            residual_norm: py.norm(),
            cg_iterations: 0,
            converged: true,
        });
    }

    let t = support.len();
    let b = DVector::<f64>::from_fn(t, |k, _| py[support[k]]);
    let b_norm = b.norm();
    let mut z = DVector::<f64>::zeros(t);

    // A z = I_T^T Psi I_T z, applied through scatter -> project -> gather.
    let mut full = DVector::<f64>::zeros(n);
    let mut projected = DVector::<f64>::zeros(n);
    let mut apply_a = |v: &DVector<f64>, out: &mut DVector<f64>,
                       scratch: &mut ProjScratch| {
        full.fill(0.0);
        for (k, &i) in support.iter().enumerate() {
            full[i] = v[k];
        }
        scratch.apply(p_hat, &full, &mut projected);
        for (k, &i) in support.iter().enumerate() {
            out[k] = projected[i];
        }
    };

    let mut residual = b.clone();
    let mut direction = residual.clone();
    let mut a_dir = DVector::<f64>::zeros(t);
    let mut converged = b_norm == 0.0;
    let mut iterations = 0usize;

    for _ in 0..config.ls_max_iterations {
        if residual.norm() <= config.ls_tolerance * b_norm.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        apply_a(&direction, &mut a_dir, &mut scratch);
        let curvature = direction.dot(&a_dir);
        if curvature <= 1e-14 * direction.norm_squared() {
            return Err(CsError::SingularSupportSystem { size: t });
        }
        let rs_old = residual.norm_squared();
        let step = rs_old / curvature;
        z.axpy(step, &direction, 1.0);
        residual.axpy(-step, &a_dir, 1.0);
        iterations += 1;
        let rs_new = residual.norm_squared();
        if rs_new.sqrt() <= config.ls_tolerance * b_norm.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        let ratio = rs_new / rs_old;
        direction.axpy(1.0, &residual, ratio);
    }

    let mut x = DVector::<f64>::zeros(n);
    for (k, &i) in support.iter().enumerate() {
        x[i] = z[k];
    }
    // Residual of the projected fit at the returned point.
    let mut fit = DVector::zeros(n);
    scratch.apply(p_hat, &x, &mut fit);
    fit -= &py;
    Ok(DebiasedEstimate {
        x,
        residual_norm: fit.norm(),
        cg_iterations: iterations,
        converged,
    })
}

/// Full projected recovery chain for one frame.
///
/// Projects `y`, solves the l1 problem, thresholds at `omega` for the
/// support, debiases by least squares, and forms `l_hat = y - x_hat` by exact
/// subtraction. The reported `proj_residual` is `||Psi l_hat||_2`, a cheap
/// online indicator of how much unmodeled energy the frame left behind.
pub fn projected_cs_step(
    p_hat: &BasisMatrix,
    y: &DVector<f64>,
    xi: f64,
    omega: f64,
    config: &CsSolverConfig,
    warm_lambda: Option<f64>,
) -> Result<CsStepResult, CsError> {
    let n = p_hat.n();
    if y.len() != n {
        return Err(CsError::DimensionMismatch { expected: n, got: y.len() });
    }
    let mut scratch = ProjScratch::new(p_hat.r());
    let mut y_tilde = DVector::zeros(n);
    scratch.apply(p_hat, y, &mut y_tilde);

    let sparse = l1_min_warm(p_hat, &y_tilde, xi, config, warm_lambda)?;
    let support = estimate_support(&sparse.x, omega);
    let debiased = ls_debias(p_hat, &y_tilde, &support, config)?;
    let x_hat = debiased.x;
    let l_hat = y - &x_hat;

    let mut proj = DVector::zeros(n);
    scratch.apply(p_hat, &l_hat, &mut proj);
    Ok(CsStepResult {
        proj_residual: proj.norm(),
        x_hat,
        l_hat,
        support,
        lambda: sparse.lambda,
        l1_iterations: sparse.iterations,
        l1_converged: sparse.converged,
        ls_converged: debiased.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormal_basis, select_rows};
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn basis_e1(n: usize) -> BasisMatrix {
        let mut m = DMatrix::<f64>::zeros(n, 1);
        m[(0, 0)] = 1.0;
        BasisMatrix::new(m).unwrap()
    }

    fn random_basis(n: usize, r: usize, seed: u64) -> BasisMatrix {
        let mut rng = rng_from_seed(seed);
        let g = DMatrix::<f64>::from_fn(n, r, |_, _| rng.sample(StandardNormal));
        orthonormal_basis(&g).unwrap()
    }

    /// Dense `Psi = I - P P^T` for oracle computations.
    fn dense_psi(p: &BasisMatrix) -> DMatrix<f64> {
        DMatrix::<f64>::identity(p.n(), p.n()) - p.as_matrix() * p.as_matrix().transpose()
    }

    #[test]
    fn l1_min_equality_constraint_hand_solution() {
        // Psi = diag(0,1,1) forces x2 = 10, x3 = 0; minimizing |x1| gives 0.
        let p = basis_e1(3);
        let y = DVector::from_vec(vec![5.0, 10.0, 0.0]);
        let y_tilde = p.project_away(&y);
        let out = l1_min(&p, &y_tilde, 0.0, &CsSolverConfig::default()).unwrap();
        assert_abs_diff_eq!(out.x[0], 0.0, epsilon = 1e-3);
        assert_abs_diff_eq!(out.x[1], 10.0, epsilon = 1e-3);
        assert_abs_diff_eq!(out.x[2], 0.0, epsilon = 1e-3);
    }

    #[test]
    fn l1_min_in_span_frame_returns_zero() {
        let p = random_basis(12, 3, 1);
        let coeff = DVector::from_vec(vec![2.0, -1.0, 0.5]);
        let y = p.as_matrix() * coeff;
        let y_tilde = p.project_away(&y);
        let out = l1_min(&p, &y_tilde, 1e-6, &CsSolverConfig::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert!(out.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_min_single_outlier_matches_exhaustive_oracle() {
        // Oracle: for each candidate coordinate, the best single-support fit
        // is c_i = (Psi y)_i / Psi_ii; feasible candidates are those meeting
        // the residual constraint, and the l1-minimal one wins.
        for seed in 0..25 {
            let n = 20;
            let p = random_basis(n, 3, 100 + seed);
            let mut rng = rng_from_seed(200 + seed);
            let coeff = DVector::<f64>::from_fn(3, |_, _| rng.sample(StandardNormal));
            let l = p.as_matrix() * coeff;
            let idx = (rng.gen::<u64>() % n as u64) as usize;
            let mut y = l.clone();
            y[idx] += 12.0;
            let y_tilde = p.project_away(&y);
            let xi = 1e-6;

            let psi = dense_psi(&p);
            let py = &psi * &y;
            let mut oracle: Option<(usize, f64)> = None;
            for i in 0..n {
                let col = psi.column(i);
                let c = py.dot(&col.clone_owned()) / col.norm_squared();
                let res = (&py - col * c).norm();
                if res <= xi * 10.0 {
                    let better = oracle.map_or(true, |(_, bc)| c.abs() < bc.abs());
                    if better {
                        oracle = Some((i, c));
                    }
                }
            }
            let (oi, oc) = oracle.expect("planted outlier must be recoverable");
            assert_eq!(oi, idx);

            let out = l1_min(&p, &y_tilde, xi, &CsSolverConfig::default()).unwrap();
            let support = estimate_support(&out.x, 6.0);
            assert_eq!(support, vec![idx], "seed {seed}");
            assert_abs_diff_eq!(out.x[idx], oc, epsilon = 0.2);
        }
    }

    #[test]
    fn estimate_support_threshold_is_strict() {
        let x = DVector::from_vec(vec![0.0, 2.0, -2.0, 1.999, -5.0]);
        assert_eq!(estimate_support(&x, 2.0), vec![4]);
        assert_eq!(estimate_support(&x, 1.9), vec![1, 2, 3, 4]);
    }

    #[test]
    fn ls_debias_error_matches_closed_form() {
        // On an exact-model frame the debias error is
        // e = I_T (Psi_T^T Psi_T)^{-1} I_T^T Psi l, computed densely here.
        for seed in 0..30 {
            let n = 25;
            let r = 3;
            let p_true = random_basis(n, r, 300 + seed);
            let p_hat = random_basis(n, r, 400 + seed); // deliberately off
            let mut rng = rng_from_seed(500 + seed);
            let coeff = DVector::<f64>::from_fn(r, |_, _| rng.sample(StandardNormal));
            let l = p_true.as_matrix() * coeff;
            let support = vec![2usize, 7, 11];
            let mut x = DVector::<f64>::zeros(n);
            for (k, &i) in support.iter().enumerate() {
                x[i] = 10.0 + k as f64;
            }
            let y = &l + &x;
            let y_tilde = p_hat.project_away(&y);

            let cfg = CsSolverConfig { ls_max_iterations: 50, ..Default::default() };
            let out = ls_debias(&p_hat, &y_tilde, &support, &cfg).unwrap();

            let psi = dense_psi(&p_hat);
            let psi_t = select_rows(&psi.transpose(), &support).transpose(); // n x |T|
            let a = psi_t.transpose() * &psi_t;
            let rhs = psi_t.transpose() * (&psi * &l);
            let e_t = a.lu().solve(&rhs).expect("well-conditioned oracle system");
            for (k, &i) in support.iter().enumerate() {
                let expected = x[i] + e_t[k];
                assert_abs_diff_eq!(out.x[i], expected, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn ls_debias_empty_support_is_zero() {
        let p = random_basis(10, 2, 7);
        let y = DVector::from_element(10, 1.0);
        let y_tilde = p.project_away(&y);
        let out = ls_debias(&p, &y_tilde, &[], &CsSolverConfig::default()).unwrap();
        assert!(out.x.iter().all(|&v| v == 0.0));
        assert!(out.converged);
    }

    #[test]
    fn ls_debias_detects_singular_support() {
        // With P_hat = e1 and T covering all of R^3, Psi_T has rank 2 and the
        // normal system is singular.
        let p = basis_e1(3);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let y_tilde = p.project_away(&y);
        let err = ls_debias(&p, &y_tilde, &[0, 1, 2], &CsSolverConfig::default());
        assert!(matches!(err, Err(CsError::SingularSupportSystem { .. })));
    }

    #[test]
    fn ls_debias_rejects_bad_support_indices() {
        let p = random_basis(5, 1, 8);
        let y_tilde = DVector::zeros(5);
        assert!(matches!(
            ls_debias(&p, &y_tilde, &[9], &CsSolverConfig::default()),
            Err(CsError::SupportIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn restricted_inverse_norm_bounded_by_ric() {
        // ||(Psi_T^T Psi_T)^{-1}|| <= 1 / (1 - delta_s) whenever delta_s < 1.
        use crate::linalg::ric_brute_force;
        for seed in 0..20 {
            let n = 12;
            let p = random_basis(n, 2, 600 + seed);
            let s = 3;
            let delta = ric_brute_force(&p, s).unwrap();
            if delta >= 0.999 {
                continue;
            }
            let psi = dense_psi(&p);
            let support = [1usize, 5, 9];
            let mut psi_t = DMatrix::<f64>::zeros(n, s);
            for (k, &i) in support.iter().enumerate() {
                psi_t.set_column(k, &psi.column(i));
            }
            let a = psi_t.transpose() * &psi_t;
            let inv = a.try_inverse().expect("delta < 1 implies invertible");
            let norm = crate::linalg::spectral_norm(&inv);
            assert!(
                norm <= 1.0 / (1.0 - delta) + 1e-9,
                "seed {seed}: {norm} vs {}",
                1.0 / (1.0 - delta)
            );
        }
    }

    #[test]
    fn projected_cs_step_recovers_planted_outliers() {
        let n = 40;
        let p = random_basis(n, 4, 11);
        let mut rng = rng_from_seed(12);
        let coeff = DVector::<f64>::from_fn(4, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let l = p.as_matrix() * coeff;
        let support = vec![3usize, 17, 31];
        let mut y = l.clone();
        for &i in &support {
            y[i] += 15.0;
        }
        let out = projected_cs_step(&p, &y, 0.67, 5.0, &CsSolverConfig::default(), None).unwrap();
        assert_eq!(out.support, support);
        // l_hat = y - x_hat must hold bit for bit.
        for i in 0..n {
            assert_eq!(out.l_hat[i], y[i] - out.x_hat[i]);
        }
        assert!((out.l_hat - &l).norm() <= 1e-6 * l.norm());
    }

    #[test]
    fn projected_cs_step_zero_frame_is_clean() {
        let p = random_basis(10, 2, 13);
        let y = DVector::zeros(10);
        let out = projected_cs_step(&p, &y, 0.5, 1.0, &CsSolverConfig::default(), None).unwrap();
        assert!(out.support.is_empty());
        assert!(out.x_hat.iter().all(|&v| v == 0.0));
        assert!(out.l_hat.iter().all(|&v| v == 0.0));
        assert_eq!(out.proj_residual, 0.0);
    }

    #[test]
    fn projected_cs_step_rejects_dimension_mismatch() {
        let p = random_basis(10, 2, 14);
        let y = DVector::zeros(9);
        assert!(matches!(
            projected_cs_step(&p, &y, 0.5, 1.0, &CsSolverConfig::default(), None),
            Err(CsError::DimensionMismatch { .. })
        ));
    }
}
