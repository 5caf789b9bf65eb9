//! Synthetic scene generation for subspace tracking experiments.
//!
//! A scene is `Y = L + X + V`: a low-rank stream `l_t = P_(t) a_t` whose
//! subspace changes at configured times, sparse outliers `x_t` on structured
//! or Bernoulli supports, and optional bounded dense noise. All randomness
//! flows from a single scene seed through independent derived streams, so a
//! scene is a pure function of its config.

use crate::linalg::{orthonormal_basis, spectral_norm, BasisMatrix, LinalgError};
use crate::rng::{derive_seed, rng_from_seed};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("dimensions invalid: n={n}, r={r} requires 1 <= r < n")]
    BadDimensions { n: usize, r: usize },
    #[error("stream length {d} must exceed training prefix {t_train}")]
    BadStreamLength { d: usize, t_train: usize },
    #[error("change times must be strictly increasing within (t_train, d); offending time {t}")]
    BadChangeTimes { t: usize },
    #[error("change model supplies {got} magnitudes for {expected} changes")]
    ModelLengthMismatch { expected: usize, got: usize },
    #[error("condition ratio f must be >= 1, got {f}")]
    BadConditionRatio { f: f64 },
    #[error("outlier magnitudes need 0 <= xmin <= xmax, got [{xmin}, {xmax}]")]
    BadOutlierRange { xmin: f64, xmax: f64 },
    #[error("noise level must be non-negative and finite, got {value}")]
    BadNoiseLevel { value: f64 },
    #[error("bernoulli occupancy must lie in [0, 1], got {rho}")]
    BadOccupancy { rho: f64 },
    #[error("moving object: {reason}")]
    BadMovingObject { reason: String },
    #[error("perturbation target must lie in [0, 1), got {value}")]
    BadPerturbation { value: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene file malformed: {0}")]
    BadFormat(String),
}

/// How the subspace moves at each change time.
#[derive(Debug, Clone, PartialEq)]
pub enum ChangeModel {
    /// `P_j = exp(gamma_j B_j) P_{j-1}` with `B_j` random skew-symmetric,
    /// normalized to unit spectral norm; `gamma_j` controls the rotation.
    ExpRotation { gammas: Vec<f64> },
    /// Plants an exact largest principal angle: the last basis direction is
    /// rotated by `theta_j` toward a fresh direction from the complement, so
    /// `sin_theta_max(P_{j-1}, P_j) = |sin theta_j|` exactly.
    GivensRotation { thetas: Vec<f64> },
}

impl ChangeModel {
    pub fn change_count(&self) -> usize {
        match self {
            ChangeModel::ExpRotation { gammas } => gammas.len(),
            ChangeModel::GivensRotation { thetas } => thetas.len(),
        }
    }
}

/// Outlier support process.
#[derive(Debug, Clone, PartialEq)]
pub enum SupportModel {
    /// A solid block of `s` rows sweeping down then up with period `2 tau`;
    /// the block advances every `ceil(c0 * tau)` frames. Every row is
    /// occupied for at most a `2 c0` fraction of any window of length >= tau.
    MovingObject { s: usize, tau: usize, c0: f64 },
    /// Each entry occupied independently with probability `rho`.
    Bernoulli { rho: f64 },
}

/// Outlier magnitude law: `|x_i|` uniform on `[xmin, xmax]`, positive unless
/// `signed`, in which case the sign is a fair coin.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierModel {
    pub xmin: f64,
    pub xmax: f64,
    pub signed: bool,
}

/// Bounded isotropic noise with `E[v v^T] = lambda_v_plus * I`
/// (entries uniform on `[-sqrt(3 lambda), sqrt(3 lambda)]`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub lambda_v_plus: f64,
}

/// Complete description of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n: usize,
    pub r: usize,
    /// Total frames, training prefix included.
    pub d: usize,
    /// Leading frames generated with the low-outlier training support model.
    pub t_train: usize,
    /// Condition ratio of the coefficient spectrum, `lambda_plus / lambda_minus`.
    pub f: f64,
    /// Absolute frame indices at which the subspace changes.
    pub change_times: Vec<usize>,
    pub change: ChangeModel,
    /// Support model from `t_train` on.
    pub support: SupportModel,
    /// Support model during the first `t_train` frames.
    pub train_support: SupportModel,
    pub outliers: OutlierModel,
    pub noise: Option<NoiseModel>,
    pub seed: u64,
}

impl SceneConfig {
    fn validate(&self) -> Result<(), SceneError> {
        if self.r == 0 || self.r >= self.n {
            return Err(SceneError::BadDimensions { n: self.n, r: self.r });
        }
        if self.d <= self.t_train {
            return Err(SceneError::BadStreamLength { d: self.d, t_train: self.t_train });
        }
        let mut prev = self.t_train;
        for &t in &self.change_times {
            if t <= prev || t >= self.d {
                return Err(SceneError::BadChangeTimes { t });
            }
            prev = t;
        }
        let j = self.change_times.len();
        if self.change.change_count() != j {
            return Err(SceneError::ModelLengthMismatch {
                expected: j,
                got: self.change.change_count(),
            });
        }
        if !(self.f >= 1.0) {
            return Err(SceneError::BadConditionRatio { f: self.f });
        }
        if !(0.0 <= self.outliers.xmin && self.outliers.xmin <= self.outliers.xmax) {
            return Err(SceneError::BadOutlierRange {
                xmin: self.outliers.xmin,
                xmax: self.outliers.xmax,
            });
        }
        if let Some(noise) = &self.noise {
            if !(noise.lambda_v_plus >= 0.0) || !noise.lambda_v_plus.is_finite() {
                return Err(SceneError::BadNoiseLevel { value: noise.lambda_v_plus });
            }
        }
        Ok(())
    }
}

/// A generated scene with full ground truth attached.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    /// True subspaces `P_0 .. P_J`.
    pub subspaces: Vec<BasisMatrix>,
    /// Observations `Y = L + X + V`, one column per frame.
    pub y: DMatrix<f64>,
    /// Noise-free low-rank stream.
    pub l: DMatrix<f64>,
    /// Outlier supports per frame, ascending.
    pub supports: Vec<Vec<usize>>,
    /// Outlier values aligned with `supports`.
    pub x_values: Vec<Vec<f64>>,
    /// Dense noise, present iff the config requested it.
    pub v: Option<DMatrix<f64>>,
}

impl SyntheticScene {
    /// Index of the subspace active at frame `t`.
    pub fn subspace_index_at(&self, t: usize) -> usize {
        self.config.change_times.iter().filter(|&&c| c <= t).count()
    }

    /// The subspace active at frame `t`.
    pub fn true_subspace_at(&self, t: usize) -> &BasisMatrix {
        &self.subspaces[self.subspace_index_at(t)]
    }

    /// Model top coefficient variance `lambda_plus = q_1^2 / 3`.
    pub fn lambda_plus(&self) -> f64 {
        let q = coefficient_bounds(self.config.r, self.config.f);
        q[0] * q[0] / 3.0
    }

    /// Model bottom coefficient variance `lambda_minus = 1 / 3`.
    pub fn lambda_minus(&self) -> f64 {
        let q = coefficient_bounds(self.config.r, self.config.f);
        let last = q[q.len() - 1];
        last * last / 3.0
    }

    /// Measured largest principal-angle sine of each configured change.
    pub fn change_sin_thetas(&self) -> Vec<f64> {
        (1..self.subspaces.len())
            .map(|j| {
                crate::linalg::sin_theta_max(&self.subspaces[j - 1], &self.subspaces[j])
                    .expect("same ambient dimension")
                    .value()
            })
            .collect()
    }

    /// Densifies the outlier matrix.
    pub fn x_matrix(&self) -> DMatrix<f64> {
        let mut x = DMatrix::<f64>::zeros(self.config.n, self.config.d);
        for (t, (idx, vals)) in self.supports.iter().zip(&self.x_values).enumerate() {
            for (k, &i) in idx.iter().enumerate() {
                x[(i, t)] = vals[k];
            }
        }
        x
    }
}

/// Per-direction coefficient bounds `q_1 >= ... >= q_r`.
///
/// `q_i = sqrt(f) * (1 - (i - 1) / (2 r))` for `i < r` and `q_r = 1`, giving
/// variances `q_i^2 / 3` and a condition ratio of exactly `f` (for `r >= 2`).
pub fn coefficient_bounds(r: usize, f: f64) -> Vec<f64> {
    let sf = f.sqrt();
    (1..=r)
        .map(|i| {
            if i == r {
                1.0
            } else {
                sf - sf * (i - 1) as f64 / (2.0 * r as f64)
            }
        })
        .collect()
}

/// Coefficients `a_t` with independent entries uniform on `[-q_i, q_i]`.
pub fn gen_coefficients(r: usize, d: usize, f: f64, seed: u64) -> Result<DMatrix<f64>, SceneError> {
    if !(f >= 1.0) {
        return Err(SceneError::BadConditionRatio { f });
    }
    let q = coefficient_bounds(r, f);
    let mut rng = rng_from_seed(seed);
    Ok(DMatrix::from_fn(r, d, |i, _| rng.gen_range(-q[i]..=q[i])))
}

/// Moving-object support: a block of `s` rows descending then ascending.
///
/// The block advances every `beta = ceil(c0 * tau)` frames through
/// `ceil(tau / beta)` positions, then retraces; the pattern repeats with
/// period `2 tau`. Deterministic. Requires the sweep to fit: with `B`
/// positions, `s * B <= n`.
pub fn gen_support_moving_object(
    n: usize,
    d: usize,
    s: usize,
    tau: usize,
    c0: f64,
) -> Result<Vec<Vec<usize>>, SceneError> {
    if s == 0 {
        return Ok(vec![Vec::new(); d]);
    }
    if tau == 0 {
        return Err(SceneError::BadMovingObject { reason: "tau must be positive".into() });
    }
    if !(c0 > 0.0 && c0 <= 1.0) {
        return Err(SceneError::BadMovingObject {
            reason: format!("c0 must lie in (0, 1], got {c0}"),
        });
    }
    let beta = (c0 * tau as f64).ceil().max(1.0) as usize;
    let positions = tau.div_ceil(beta);
    if s * positions > n {
        return Err(SceneError::BadMovingObject {
            reason: format!(
                "object of size {s} sweeping {positions} positions does not fit in {n} rows"
            ),
        });
    }
    let mut out = Vec::with_capacity(d);
    for t in 0..d {
        let phase = t % (2 * tau);
        let m = if phase < tau {
            phase / beta
        } else {
            positions - 1 - (phase - tau) / beta
        };
        out.push((m * s..(m + 1) * s).collect());
    }
    Ok(out)
}

/// Bernoulli support: each entry occupied independently with probability `rho`.
pub fn gen_support_bernoulli(
    n: usize,
    d: usize,
    rho: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>, SceneError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(SceneError::BadOccupancy { rho });
    }
    let mut rng = rng_from_seed(seed);
    Ok((0..d)
        .map(|_| (0..n).filter(|_| rng.gen::<f64>() < rho).collect())
        .collect())
}

/// Magnitudes for the given supports: uniform on `[xmin, xmax]`, positive
/// unless `signed`.
pub fn gen_outlier_magnitudes(
    supports: &[Vec<usize>],
    outliers: &OutlierModel,
    seed: u64,
) -> Result<Vec<Vec<f64>>, SceneError> {
    if !(0.0 <= outliers.xmin && outliers.xmin <= outliers.xmax) {
        return Err(SceneError::BadOutlierRange { xmin: outliers.xmin, xmax: outliers.xmax });
    }
    let mut rng = rng_from_seed(seed);
    Ok(supports
        .iter()
        .map(|t| {
            t.iter()
                .map(|_| {
                    let mag = if outliers.xmin == outliers.xmax {
                        outliers.xmin
                    } else {
                        rng.gen_range(outliers.xmin..=outliers.xmax)
                    };
                    if outliers.signed && rng.gen::<bool>() {
                        -mag
                    } else {
                        mag
                    }
                })
                .collect()
        })
        .collect())
}

/// Generates the subspace chain `P_0 .. P_J` for a change model.
pub fn gen_subspace_sequence(
    n: usize,
    r: usize,
    change: &ChangeModel,
    seed: u64,
) -> Result<Vec<BasisMatrix>, SceneError> {
    if r == 0 || r >= n {
        return Err(SceneError::BadDimensions { n, r });
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0));
    let g = DMatrix::<f64>::from_fn(n, r, |_, _| rng.sample(StandardNormal));
    let p0 = orthonormal_basis(&g)?;
    let mut out = vec![p0];

    match change {
        ChangeModel::ExpRotation { gammas } => {
            for (j, &gamma) in gammas.iter().enumerate() {
                let mut rng = rng_from_seed(derive_seed(seed, 1 + j as u64));
                let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
                let mut skew = (&g - g.transpose()) * 0.5;
                let norm = spectral_norm(&skew);
                if norm > 0.0 {
                    skew /= norm;
                }
                let rot = expm(&(skew * gamma));
                let prev = out[j].as_matrix();
                out.push(BasisMatrix::new(&rot * prev)?);
            }
        }
        ChangeModel::GivensRotation { thetas } => {
            for (j, &theta) in thetas.iter().enumerate() {
                let mut rng = rng_from_seed(derive_seed(seed, 1 + j as u64));
                let prev = &out[j];
                let g = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
                let mut fresh = prev.project_away(&g);
                let norm = fresh.norm();
                if norm == 0.0 {
                    return Err(SceneError::BadMovingObject {
                        reason: "degenerate complement direction".into(),
                    });
                }
                fresh /= norm;
                let mut m = prev.as_matrix().clone();
                let last = r - 1;
                let rotated = m.column(last) * theta.cos() - &fresh * theta.sin();
                m.set_column(last, &rotated);
                out.push(BasisMatrix::new(m)?);
            }
        }
    }
    Ok(out)
}

/// Rotates the first basis direction toward a random complement direction so
/// that `sin_theta_max(p, result) == sin_theta` exactly.
pub fn perturb_basis(
    p: &BasisMatrix,
    sin_theta: f64,
    seed: u64,
) -> Result<BasisMatrix, SceneError> {
    if !(0.0..1.0).contains(&sin_theta) {
        return Err(SceneError::BadPerturbation { value: sin_theta });
    }
    if sin_theta == 0.0 {
        return Ok(p.clone());
    }
    let mut rng = rng_from_seed(seed);
    let g = DVector::<f64>::from_fn(p.n(), |_, _| rng.sample(StandardNormal));
    let mut u = p.project_away(&g);
    let norm = u.norm();
    if norm == 0.0 {
        return Err(SceneError::BadPerturbation { value: sin_theta });
    }
    u /= norm;
    let cos = (1.0 - sin_theta * sin_theta).sqrt();
    let mut m = p.as_matrix().clone();
    let tilted = m.column(0) * cos + &u * sin_theta;
    m.set_column(0, &tilted);
    Ok(BasisMatrix::new(m)?)
}

/// Matrix exponential by Pade(6, 6) with scaling and squaring.
///
/// Inputs here are mildly scaled skew-symmetric generators, so the [6, 6]
/// approximant after halving to spectral radius <= 1/2 is accurate to well
/// below 1e-12.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), a.ncols(), "expm needs a square matrix");
    let n = a.nrows();
    let norm = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = a / 2f64.powi(squarings as i32);

    const B: [f64; 7] = [
        1.0,
        0.5,
        5.0 / 44.0,
        1.0 / 66.0,
        1.0 / 792.0,
        1.0 / 15_840.0,
        1.0 / 665_280.0,
    ];
    let identity = DMatrix::<f64>::identity(n, n);
    let mut power = identity.clone();
    let mut numer = identity.clone() * B[0];
    let mut denom = identity * B[0];
    for (k, &coeff) in B.iter().enumerate().skip(1) {
        power = &power * &scaled;
        numer += &power * coeff;
        if k % 2 == 0 {
            denom += &power * coeff;
        } else {
            denom -= &power * coeff;
        }
    }
    let mut result = denom
        .lu()
        .solve(&numer)
        .expect("Pade denominator is nonsingular for scaled inputs");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Generates the full scene described by `config`.
pub fn assemble_scene(config: &SceneConfig) -> Result<SyntheticScene, SceneError> {
    config.validate()?;
    let n = config.n;
    let d = config.d;
    let seed = config.seed;

    let subspaces = gen_subspace_sequence(n, config.r, &config.change, derive_seed(seed, 1))?;
    let coeffs = gen_coefficients(config.r, d, config.f, derive_seed(seed, 2))?;

    let make_supports = |model: &SupportModel, frames: usize, stream: u64| {
        match model {
            SupportModel::MovingObject { s, tau, c0 } => {
                gen_support_moving_object(n, frames, *s, *tau, *c0)
            }
            SupportModel::Bernoulli { rho } => {
                gen_support_bernoulli(n, frames, *rho, derive_seed(seed, stream))
            }
        }
    };
    let mut supports = make_supports(&config.train_support, config.t_train, 3)?;
    supports.extend(make_supports(&config.support, d - config.t_train, 4)?);

    let x_values = gen_outlier_magnitudes(&supports, &config.outliers, derive_seed(seed, 5))?;

    let v = match &config.noise {
        Some(noise) if noise.lambda_v_plus > 0.0 => {
            let amp = (3.0 * noise.lambda_v_plus).sqrt();
            let mut rng = rng_from_seed(derive_seed(seed, 6));
            Some(DMatrix::<f64>::from_fn(n, d, |_, _| rng.gen_range(-amp..=amp)))
        }
        _ => None,
    };

    let mut l = DMatrix::<f64>::zeros(n, d);
    for t in 0..d {
        let j = config.change_times.iter().filter(|&&c| c <= t).count();
        let p = subspaces[j].as_matrix();
        let a = coeffs.column(t);
        let mut col = l.column_mut(t);
        col.gemv(1.0, p, &a, 0.0);
    }

    let mut y = l.clone();
    for (t, (idx, vals)) in supports.iter().zip(&x_values).enumerate() {
        for (k, &i) in idx.iter().enumerate() {
            y[(i, t)] += vals[k];
        }
    }
    if let Some(vm) = &v {
        y += vm;
    }

    Ok(SyntheticScene {
        config: config.clone(),
        subspaces,
        y,
        l,
        supports,
        x_values,
        v,
    })
}

/// On-disk scene payload: observations, ground-truth low-rank stream, and
/// outlier supports, with the identifying header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredScene {
    pub n: usize,
    pub d: usize,
    pub r: usize,
    pub change_times: Vec<usize>,
    pub y: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub supports: Vec<Vec<usize>>,
}

const SCENE_MAGIC: &[u8; 4] = b"NSCN";
const SCENE_VERSION: u32 = 1;

/// Writes a scene to the columnar binary format:
/// header (magic, version, n, d, r, J, change times), then Y and L as
/// column-major little-endian f64, then per-frame support index lists.
pub fn write_scene(scene: &SyntheticScene, path: &Path) -> Result<(), SceneError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(SCENE_MAGIC)?;
    w.write_all(&SCENE_VERSION.to_le_bytes())?;
    for v in [
        scene.config.n as u64,
        scene.config.d as u64,
        scene.config.r as u64,
        scene.config.change_times.len() as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &t in &scene.config.change_times {
        w.write_all(&(t as u64).to_le_bytes())?;
    }
    for m in [&scene.y, &scene.l] {
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for sup in &scene.supports {
        w.write_all(&(sup.len() as u32).to_le_bytes())?;
        for &i in sup {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a scene written by [`write_scene`].
pub fn read_scene(path: &Path) -> Result<StoredScene, SceneError> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(SceneError::BadFormat("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != SCENE_VERSION {
        return Err(SceneError::BadFormat(format!("unsupported version {version}")));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<std::fs::File>| -> Result<u64, SceneError> {
        r.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let n = read_u64(&mut r)? as usize;
    let d = read_u64(&mut r)? as usize;
    let rank = read_u64(&mut r)? as usize;
    let j = read_u64(&mut r)? as usize;
    if n == 0 || d == 0 || n.checked_mul(d).is_none() {
        return Err(SceneError::BadFormat("implausible dimensions".into()));
    }
    let mut change_times = Vec::with_capacity(j);
    for _ in 0..j {
        change_times.push(read_u64(&mut r)? as usize);
    }

    let read_matrix = |r: &mut BufReader<std::fs::File>| -> Result<DMatrix<f64>, SceneError> {
        let mut data = vec![0.0f64; n * d];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(DMatrix::from_vec(n, d, data))
    };
    let y = read_matrix(&mut r)?;
    let l = read_matrix(&mut r)?;

    let mut supports = Vec::with_capacity(d);
    let mut u32b = [0u8; 4];
    for _ in 0..d {
        r.read_exact(&mut u32b)?;
        let len = u32::from_le_bytes(u32b) as usize;
        if len > n {
            return Err(SceneError::BadFormat("support longer than dimension".into()));
        }
        let mut sup = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut u32b)?;
            let idx = u32::from_le_bytes(u32b) as usize;
            if idx >= n {
                return Err(SceneError::BadFormat("support index out of range".into()));
            }
            sup.push(idx);
        }
        supports.push(sup);
    }
    Ok(StoredScene { n, d, r: rank, change_times, y, l, supports })
}

/// Writes any matrix as plain CSV, one row per line, full f64 round-trip
/// precision.
pub fn export_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<(), SceneError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for i in 0..m.nrows() {
        let mut first = true;
        for j in 0..m.ncols() {
            if !first {
                write!(w, ",")?;
            }
            write!(w, "{}", m[(i, j)])?;
            first = false;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
