//! Dense subspace primitives: orthonormal bases, principal-angle distance,
//! truncated SVD, and a brute-force restricted isometry constant.
//!
//! Everything here works on `f64` matrices with far more rows than columns.
//! A subspace is always represented by a [`BasisMatrix`] whose columns are
//! orthonormal; the largest principal-angle sine is the distance
//! `sin_theta_max(P1, P2) = || (I - P1 P1^T) P2 ||_2`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Orthonormality tolerance enforced on [`BasisMatrix`] construction.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Relative singular-value cutoff used for rank decisions.
pub const RANK_CUTOFF: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix has no nonzero columns")]
    ZeroMatrix,
    #[error("requested rank {r} outside valid range 1..={max}")]
    RankOutOfRange { r: usize, max: usize },
    #[error("row dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("subset size {s} outside valid range 1..={n}")]
    SubsetSizeOutOfRange { s: usize, n: usize },
    #[error("svd failed to converge")]
    SvdFailed,
}

/// A tall matrix with orthonormal columns spanning a subspace of R^n.
///
/// Construction repairs mild loss of orthonormality (re-orthonormalizing via
/// QR and logging a warning) so downstream projector algebra can rely on
/// `P^T P = I` to within [`ORTHONORMALITY_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    m: DMatrix<f64>,
}

impl BasisMatrix {
    /// Wraps `m` as a basis, re-orthonormalizing if needed.
    pub fn new(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        if m.ncols() == 0 || m.nrows() == 0 {
            return Err(LinalgError::ZeroMatrix);
        }
        if m.ncols() > m.nrows() {
            return Err(LinalgError::RankOutOfRange { r: m.ncols(), max: m.nrows() });
        }
        if orthonormality_defect(&m) <= ORTHONORMALITY_TOL {
            return Ok(Self { m });
        }
        log::warn!(
            "basis of shape {}x{} failed orthonormality check; re-orthonormalizing",
            m.nrows(),
            m.ncols()
        );
        let qr = m.qr();
        let q = qr.q();
        // QR of a rank-deficient input can still return a valid Q; verify.
        if orthonormality_defect(&q) > ORTHONORMALITY_TOL {
            return Err(LinalgError::ZeroMatrix);
        }
        Ok(Self { m: q })
    }

    /// Ambient dimension n.
    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    /// Subspace dimension r.
    pub fn r(&self) -> usize {
        self.m.ncols()
    }

    /// The underlying n x r matrix.
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Consumes self, returning the matrix.
    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// Projection of `v` onto the subspace: `P (P^T v)`.
    pub fn project_onto(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.m * (self.m.transpose() * v)
    }

    /// Projection of `v` onto the orthogonal complement: `v - P (P^T v)`.
    pub fn project_away(&self, v: &DVector<f64>) -> DVector<f64> {
        v - self.project_onto(v)
    }

    /// Applies `I - P P^T` to every column of `m`.
    pub fn project_away_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m - &self.m * (self.m.transpose() * m)
    }

    /// Incoherence parameter `mu = (n / r) * max_i ||row_i||^2`.
    ///
    /// Equals 1 for perfectly spread bases and n/r for a standard basis
    /// vector; bounds how much subspace energy a single coordinate carries.
    pub fn mu(&self) -> f64 {
        let n = self.n() as f64;
        let r = self.r() as f64;
        let max_row = (0..self.n())
            .map(|i| self.m.row(i).norm_squared())
            .fold(0.0_f64, f64::max);
        n / r * max_row
    }
}

fn orthonormality_defect(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    let mut worst = 0.0_f64;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Largest principal-angle sine between two subspaces, clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SubspaceDistance(f64);

impl SubspaceDistance {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `sin_theta_max(P1, P2) = || (I - P1 P1^T) P2 ||_2`.
///
/// Directed distance from `span(P2)` to `span(P1)`; the two bases may have
/// different dimensions but must share the ambient dimension. Symmetric when
/// `r1 == r2`.
pub fn sin_theta_max(p1: &BasisMatrix, p2: &BasisMatrix) -> Result<SubspaceDistance, LinalgError> {
    if p1.n() != p2.n() {
        return Err(LinalgError::DimensionMismatch { left: p1.n(), right: p2.n() });
    }
    let residual = p1.project_away_matrix(p2.as_matrix());
    let s = spectral_norm(&residual);
    Ok(SubspaceDistance(s.clamp(0.0, 1.0)))
}

/// Spectral norm via SVD for slim matrices, power iteration otherwise.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    if rows.min(cols) <= 64 {
        return m
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .fold(0.0, f64::max);
    }
    power_iteration_sigma_max(m)
}

/// Largest singular value by power iteration on the Gram operator.
///
/// Deterministic start vector; converges geometrically in the eigengap and is
/// accurate far beyond what threshold comparisons here require.
fn power_iteration_sigma_max(m: &DMatrix<f64>) -> f64 {
    let cols = m.ncols();
    let mut v = DVector::<f64>::from_element(cols, 1.0 / (cols as f64).sqrt());
    // Tilt the start vector so it cannot be orthogonal to the top pair.
    for i in 0..cols {
        v[i] += 0.01 * ((i % 7) as f64 - 3.0) / (cols as f64).sqrt();
    }
    let mut sigma_sq = 0.0_f64;
    for _ in 0..300 {
        let w = m * &v;
        let mut z = m.transpose() * w;
        let norm = z.norm();
        if norm == 0.0 {
            return 0.0;
        }
        z /= norm;
        let prev = sigma_sq;
        sigma_sq = norm;
        v = z;
        if (sigma_sq - prev).abs() <= 1e-12 * sigma_sq.max(1.0) {
            break;
        }
    }
    sigma_sq.sqrt()
}

/// An orthonormal basis together with the singular values that produced it.
#[derive(Debug, Clone)]
pub struct SvdBasis {
    pub basis: BasisMatrix,
    /// All singular values of the input, descending.
    pub singular_values: Vec<f64>,
}

/// Orthonormal basis for the column span of `m`.
///
/// Rank is decided by the relative cutoff [`RANK_CUTOFF`] on singular values,
/// so nearly dependent columns collapse instead of producing a spurious
/// direction. Errors on an all-zero input.
pub fn orthonormal_basis(m: &DMatrix<f64>) -> Result<BasisMatrix, LinalgError> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().ok_or(LinalgError::SvdFailed)?;
    let sv = &svd.singular_values;
    let smax = sv.iter().copied().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }
    let rank = sv.iter().filter(|&&s| s > RANK_CUTOFF * smax).count();
    let q = u.columns(0, rank).into_owned();
    BasisMatrix::new(q)
}

/// Top `r` left singular vectors of `m`, plus all singular values.
///
/// For very wide inputs the left factor is recovered from the n x n Gram
/// matrix (an exact reformulation that avoids bidiagonalizing the long side);
/// otherwise a direct SVD is used.
pub fn top_r_singular_vectors(m: &DMatrix<f64>, r: usize) -> Result<SvdBasis, LinalgError> {
    let max_rank = m.nrows().min(m.ncols());
    if r == 0 || r > max_rank {
        return Err(LinalgError::RankOutOfRange { r, max: max_rank });
    }
    if m.ncols() > 8 * m.nrows() {
        return top_r_via_gram(m, r);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().ok_or(LinalgError::SvdFailed)?;
    let singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    if singular_values[r - 1] <= 0.0 {
        return Err(LinalgError::RankOutOfRange { r, max: rank_of(&singular_values) });
    }
    let basis = BasisMatrix::new(u.columns(0, r).into_owned())?;
    Ok(SvdBasis { basis, singular_values })
}

fn rank_of(sv: &[f64]) -> usize {
    let smax = sv.iter().copied().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_CUTOFF * smax).count()
}

fn top_r_via_gram(m: &DMatrix<f64>, r: usize) -> Result<SvdBasis, LinalgError> {
    let gram = m * m.transpose();
    let eig = gram.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let singular_values: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    if singular_values[r - 1] <= 0.0 {
        return Err(LinalgError::RankOutOfRange { r, max: rank_of(&singular_values) });
    }
    let mut u = DMatrix::<f64>::zeros(m.nrows(), r);
    for (k, &i) in order.iter().take(r).enumerate() {
        u.set_column(k, &eig.eigenvectors.column(i));
    }
    let basis = BasisMatrix::new(u)?;
    Ok(SvdBasis { basis, singular_values })
}

/// Restricted isometry constant of the projector `I - P P^T` by enumeration.
///
/// Equals `max_{|T| = s} || I_T^T P ||_2^2`: the worst-case subspace energy
/// any `s` coordinates can capture. The norm is monotone under adding rows,
/// so only subsets of exactly size `s` are visited. Cost is `C(n, s)` small
/// SVDs; intended for n up to roughly 20.
pub fn ric_brute_force(p: &BasisMatrix, s: usize) -> Result<f64, LinalgError> {
    let n = p.n();
    if s == 0 || s > n {
        return Err(LinalgError::SubsetSizeOutOfRange { s, n });
    }
    let mut subset: Vec<usize> = (0..s).collect();
    let mut worst = 0.0_f64;
    loop {
        let sub = select_rows(p.as_matrix(), &subset);
        let sigma = spectral_norm(&sub);
        worst = worst.max(sigma * sigma);
        if !next_combination(&mut subset, n) {
            break;
        }
    }
    Ok(worst)
}

/// Rows of `m` at `indices`, stacked in order.
pub fn select_rows(m: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::zeros(indices.len(), m.ncols());
    for (k, &i) in indices.iter().enumerate() {
        out.set_row(k, &m.row(i));
    }
    out
}

fn next_combination(subset: &mut [usize], n: usize) -> bool {
    let s = subset.len();
    let mut i = s;
    while i > 0 {
        i -= 1;
        if subset[i] < n - s + i {
            subset[i] += 1;
            for j in i + 1..s {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Random orthonormal basis for test scenarios.
#[cfg(test)]
pub(crate) fn random_basis(n: usize, r: usize, seed: u64) -> BasisMatrix {
    use rand::Rng as _;
    let mut rng = crate::rng::rng_from_seed(seed);
    let g = DMatrix::<f64>::from_fn(n, r, |_, _| rng.sample(rand_distr::StandardNormal));
    orthonormal_basis(&g).expect("gaussian matrix has full column rank")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn e_i(n: usize, i: usize) -> BasisMatrix {
        let mut m = DMatrix::<f64>::zeros(n, 1);
        m[(i, 0)] = 1.0;
        BasisMatrix::new(m).unwrap()
    }

    #[test]
    fn sin_theta_identical_bases_is_zero() {
        let p = random_basis(12, 3, 1);
        assert!(sin_theta_max(&p, &p).unwrap().value() <= 1e-12);
    }

    #[test]
    fn sin_theta_orthogonal_vectors_is_one() {
        let p1 = e_i(4, 0);
        let p2 = e_i(4, 1);
        assert_abs_diff_eq!(sin_theta_max(&p1, &p2).unwrap().value(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn sin_theta_thirty_degree_plane_is_half() {
        // Rotating e1 by 30 degrees in the (e1, e2) plane: sine is exactly 1/2.
        let p1 = e_i(3, 0);
        let th = std::f64::consts::PI / 6.0;
        let mut m = DMatrix::<f64>::zeros(3, 1);
        m[(0, 0)] = th.cos();
        m[(1, 0)] = th.sin();
        let p2 = BasisMatrix::new(m).unwrap();
        assert_abs_diff_eq!(sin_theta_max(&p1, &p2).unwrap().value(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sin_theta_rejects_dimension_mismatch() {
        let p1 = e_i(3, 0);
        let p2 = e_i(4, 0);
        assert!(matches!(
            sin_theta_max(&p1, &p2),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn orthonormal_basis_collapses_dependent_columns() {
        // Span of [e1, e1 + e2] is the (e1, e2) plane.
        let mut m = DMatrix::<f64>::zeros(4, 2);
        m[(0, 0)] = 1.0;
        m[(0, 1)] = 1.0;
        m[(1, 1)] = 1.0;
        let q = orthonormal_basis(&m).unwrap();
        assert_eq!(q.r(), 2);
        let mut t = DMatrix::<f64>::zeros(4, 2);
        t[(0, 0)] = 1.0;
        t[(1, 1)] = 1.0;
        let target = BasisMatrix::new(t).unwrap();
        assert!(sin_theta_max(&target, &q).unwrap().value() <= 1e-10);

        // Triplicating a column must not create a third direction.
        let mut m3 = DMatrix::<f64>::zeros(4, 3);
        for j in 0..3 {
            m3[(0, j)] = 1.0;
        }
        assert_eq!(orthonormal_basis(&m3).unwrap().r(), 1);
    }

    #[test]
    fn orthonormal_basis_rejects_zero_matrix() {
        let z = DMatrix::<f64>::zeros(5, 2);
        assert!(matches!(orthonormal_basis(&z), Err(LinalgError::ZeroMatrix)));
    }

    #[test]
    fn top_r_recovers_planted_spectrum() {
        // Diagonal spectrum 3, 2, 1 embedded in a 6x5 matrix.
        let mut m = DMatrix::<f64>::zeros(6, 5);
        m[(0, 0)] = 3.0;
        m[(1, 1)] = 2.0;
        m[(2, 2)] = 1.0;
        let out = top_r_singular_vectors(&m, 2).unwrap();
        assert_abs_diff_eq!(out.singular_values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.singular_values[1], 2.0, epsilon = 1e-12);
        let span01 = {
            let mut t = DMatrix::<f64>::zeros(6, 2);
            t[(0, 0)] = 1.0;
            t[(1, 1)] = 1.0;
            BasisMatrix::new(t).unwrap()
        };
        assert!(sin_theta_max(&span01, &out.basis).unwrap().value() <= 1e-12);
    }

    #[test]
    fn top_r_identity_ties_capture_full_energy() {
        // With equal singular values any orthonormal pair is valid; check the
        // captured energy rather than the particular vectors.
        let m = DMatrix::<f64>::identity(4, 4);
        let out = top_r_singular_vectors(&m, 2).unwrap();
        let u = out.basis.as_matrix();
        let energy = (u.transpose() * &m).norm_squared();
        assert_abs_diff_eq!(energy, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn top_r_rejects_out_of_range_rank() {
        let m = DMatrix::<f64>::identity(4, 3);
        assert!(matches!(
            top_r_singular_vectors(&m, 0),
            Err(LinalgError::RankOutOfRange { .. })
        ));
        assert!(matches!(
            top_r_singular_vectors(&m, 4),
            Err(LinalgError::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn gram_route_matches_direct_svd() {
        let mut rng = rng_from_seed(9);
        let tall = DMatrix::<f64>::from_fn(12, 3, |_, _| rng.sample(StandardNormal));
        let coef = DMatrix::<f64>::from_fn(3, 400, |_, _| rng.sample(StandardNormal));
        let wide = &tall * &coef; // 12 x 400, exact rank 3, triggers the gram path
        let gram = top_r_singular_vectors(&wide, 3).unwrap();
        let direct = top_r_singular_vectors(&wide.clone(), 3).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(
                gram.singular_values[k],
                direct.singular_values[k],
                epsilon = 1e-8 * direct.singular_values[0]
            );
        }
        assert!(sin_theta_max(&gram.basis, &direct.basis).unwrap().value() <= 1e-8);
    }

    #[test]
    fn ric_uniform_vector_two_rows() {
        // P = (1/2, 1/2, 1/2, 1/2)^T: any two rows capture 2 * 1/4 of the energy.
        let m = DMatrix::<f64>::from_element(4, 1, 0.5);
        let p = BasisMatrix::new(m).unwrap();
        assert_abs_diff_eq!(ric_brute_force(&p, 2).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ric_full_support_is_one() {
        let p = random_basis(8, 3, 2);
        assert_abs_diff_eq!(ric_brute_force(&p, 8).unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn ric_rejects_bad_subset_size() {
        let p = random_basis(6, 2, 3);
        assert!(ric_brute_force(&p, 0).is_err());
        assert!(ric_brute_force(&p, 7).is_err());
    }

    #[test]
    fn ric_bounded_by_incoherence() {
        // delta_s <= s * mu * r / n for every basis.
        for seed in 0..20 {
            let p = random_basis(10, 2, 100 + seed);
            let s = 1 + (seed as usize) % 4;
            let delta = ric_brute_force(&p, s).unwrap();
            let bound = s as f64 * p.mu() * p.r() as f64 / p.n() as f64;
            assert!(
                delta <= bound + 1e-12,
                "delta {delta} above incoherence bound {bound}"
            );
        }
    }

    #[test]
    fn basis_repairs_near_orthonormal_input() {
        let p = random_basis(10, 3, 4);
        let mut m = p.as_matrix().clone();
        m[(0, 0)] += 1e-6; // break orthonormality beyond tolerance
        let fixed = BasisMatrix::new(m).unwrap();
        let gram = fixed.as_matrix().transpose() * fixed.as_matrix();
        assert!((gram - DMatrix::<f64>::identity(3, 3)).abs().max() <= 1e-10);
    }

    #[test]
    fn projector_is_idempotent() {
        let p = random_basis(15, 4, 5);
        let mut rng = rng_from_seed(6);
        let v = DVector::<f64>::from_fn(15, |_, _| rng.sample(StandardNormal));
        let once = p.project_away(&v);
        let twice = p.project_away(&once);
        assert!((&once - &twice).norm() <= 1e-12 * once.norm().max(1.0));
        // Complement projection is orthogonal to the subspace.
        assert!((p.as_matrix().transpose() * &once).norm() <= 1e-12 * v.norm());
    }

    #[test]
    fn sin_theta_triangle_inequality_sampled() {
        // |d(Q1,Q2) - d(Q2,Q3)| - d(Q1,Q2) ... the two-sided bound
        // d13 in [d12 - 2*d23, d12 + d23] specialized from the chain bound.
        for seed in 0..40 {
            let n = 10 + (seed as usize % 5);
            let r = 1 + (seed as usize % 3);
            let q1 = random_basis(n, r, 1000 + 3 * seed);
            let q2 = random_basis(n, r, 1001 + 3 * seed);
            let q3 = random_basis(n, r, 1002 + 3 * seed);
            let d12 = sin_theta_max(&q1, &q2).unwrap().value();
            let d23 = sin_theta_max(&q2, &q3).unwrap().value();
            let d13 = sin_theta_max(&q1, &q3).unwrap().value();
            assert!(d13 <= d12 + d23 + 1e-9, "upper: {d13} vs {} ", d12 + d23);
            assert!(d13 >= d12 - 2.0 * d23 - 1e-9, "lower: {d13} vs {}", d12 - 2.0 * d23);
        }
    }
}
