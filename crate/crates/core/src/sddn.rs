//! PCA under sparse data-dependent noise.
//!
//! Batches follow `y_t = l_t + w_t + v_t` where `l_t = P a_t` is low rank,
//! `w_t = I_T c_t I_T^T l_t` is noise supported on a sparse, possibly moving
//! row set and correlated with the data, and `v_t` is bounded isotropic
//! noise. The estimator is nothing more than the top-r left singular
//! subspace of the batch; the interest is in how its error scales with the
//! occupancy `b`, the dependent-noise level `q`, the batch length, and a
//! mid-batch subspace change.

use crate::datagen::{
    coefficient_bounds, gen_coefficients, gen_subspace_sequence, gen_support_bernoulli,
    gen_support_moving_object, perturb_basis, ChangeModel, SceneError, SupportModel,
};
use crate::linalg::{
    select_rows, sin_theta_max, spectral_norm, top_r_singular_vectors, BasisMatrix, LinalgError,
};
use crate::rng::{derive_seed, rng_from_seed};
use nalgebra::DMatrix;
use rand::Rng as _;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SddnError {
    #[error("dimensions invalid: n={n}, r={r}, alpha={alpha}")]
    BadDimensions { n: usize, r: usize, alpha: usize },
    #[error("dependent-noise level must be non-negative and finite, got {q}")]
    BadNoiseLevel { q: f64 },
    #[error("isotropic noise variance must be non-negative and finite, got {value}")]
    BadVariance { value: f64 },
    #[error("change split {alpha0} exceeds batch length {alpha}")]
    BadChangeSplit { alpha0: usize, alpha: usize },
    #[error("change magnitude must lie in [0, 1), got {delta}")]
    BadChangeMagnitude { delta: f64 },
    #[error("at least one trial is required")]
    NoTrials,
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mid-batch subspace change: the first `alpha0` frames are drawn from a
/// basis tilted away from the final one by exactly `sin theta = delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MidChange {
    pub alpha0: usize,
    pub delta: f64,
}

/// Batch generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SddnConfig {
    pub n: usize,
    pub r: usize,
    pub alpha: usize,
    /// Coefficient condition ratio (`lambda_plus / lambda_minus`).
    pub f: f64,
    /// Target dependent-noise level: `||M_t P|| = q` on every noisy frame.
    pub q: f64,
    /// Support process for the dependent noise.
    pub support: SupportModel,
    /// Isotropic noise variance (0 disables it).
    pub lambda_v: f64,
    pub change: Option<MidChange>,
    pub seed: u64,
}

impl SddnConfig {
    fn validate(&self) -> Result<(), SddnError> {
        if self.r == 0 || self.r >= self.n || self.alpha < self.r {
            return Err(SddnError::BadDimensions { n: self.n, r: self.r, alpha: self.alpha });
        }
        if !self.q.is_finite() || self.q < 0.0 {
            return Err(SddnError::BadNoiseLevel { q: self.q });
        }
        if !self.lambda_v.is_finite() || self.lambda_v < 0.0 {
            return Err(SddnError::BadVariance { value: self.lambda_v });
        }
        if let Some(change) = &self.change {
            if change.alpha0 > self.alpha {
                return Err(SddnError::BadChangeSplit {
                    alpha0: change.alpha0,
                    alpha: self.alpha,
                });
            }
            if !(0.0..1.0).contains(&change.delta) {
                return Err(SddnError::BadChangeMagnitude { delta: change.delta });
            }
        }
        Ok(())
    }
}

/// A generated batch with ground truth and the measured noise parameters.
#[derive(Debug, Clone)]
pub struct SddnBatch {
    pub y: DMatrix<f64>,
    /// Truth at the end of the batch.
    pub p: BasisMatrix,
    /// Truth of the first `alpha0` frames when a mid-batch change is present.
    pub p0: Option<BasisMatrix>,
    pub alpha0: usize,
    pub supports: Vec<Vec<usize>>,
    /// Measured row-occupancy fraction: `max_i |{t : i in T_t}| / alpha`.
    pub b: f64,
    /// Measured `max_t ||M_t P_(t)||`.
    pub q: f64,
    pub lambda_v: f64,
}

/// Generates a batch per the model above. The per-frame mixing operator is
/// `M_t = c_t I_{T_t}^T` with `c_t = q / ||I_{T_t}^T P_(t)||`, so the
/// measured noise level matches the target exactly on every noisy frame.
pub fn gen_sddn_batch(config: &SddnConfig) -> Result<SddnBatch, SddnError> {
    config.validate()?;
    let (n, r, alpha) = (config.n, config.r, config.alpha);
    let seed = config.seed;

    let p = gen_subspace_sequence(n, r, &ChangeModel::ExpRotation { gammas: vec![] }, {
        derive_seed(seed, 0)
    })?
    .pop()
    .expect("sequence holds the initial basis");
    let (p0, alpha0) = match &config.change {
        Some(change) if change.alpha0 > 0 && change.delta > 0.0 => (
            Some(perturb_basis(&p, change.delta, derive_seed(seed, 1))?),
            change.alpha0,
        ),
        Some(change) => (None, change.alpha0),
        None => (None, 0),
    };

    let coeffs = gen_coefficients(r, alpha, config.f, derive_seed(seed, 2))?;
    let supports = match &config.support {
        SupportModel::MovingObject { s, tau, c0 } => {
            gen_support_moving_object(n, alpha, *s, *tau, *c0)?
        }
        SupportModel::Bernoulli { rho } => {
            gen_support_bernoulli(n, alpha, *rho, derive_seed(seed, 3))?
        }
    };

    let mut y = DMatrix::<f64>::zeros(n, alpha);
    let mut measured_q = 0.0_f64;
    for t in 0..alpha {
        let truth = if t < alpha0 { p0.as_ref().unwrap_or(&p) } else { &p };
        let a = coeffs.column(t);
        let mut col = y.column_mut(t);
        col.gemv(1.0, truth.as_matrix(), &a, 0.0);

        let support = &supports[t];
        if config.q > 0.0 && !support.is_empty() {
            let restricted = select_rows(truth.as_matrix(), support);
            let norm = spectral_norm(&restricted);
            if norm > 0.0 {
                let c = config.q / norm;
                measured_q = measured_q.max(c * norm);
                for &i in support {
                    let noisy = y[(i, t)] * (1.0 + c);
                    y[(i, t)] = noisy;
                }
            }
        }
    }
    if config.lambda_v > 0.0 {
        let amp = (3.0 * config.lambda_v).sqrt();
        let mut rng = rng_from_seed(derive_seed(seed, 4));
        for v in y.iter_mut() {
            *v += rng.gen_range(-amp..=amp);
        }
    }

    let mut counts = vec![0usize; n];
    for support in &supports {
        for &i in support {
            counts[i] += 1;
        }
    }
    let b = counts.iter().copied().max().unwrap_or(0) as f64 / alpha as f64;

    Ok(SddnBatch {
        y,
        p,
        p0,
        alpha0,
        supports,
        b,
        q: measured_q,
        lambda_v: config.lambda_v,
    })
}

/// The estimator: top-r left singular subspace of the raw batch.
pub fn pca_sddn_estimate(y: &DMatrix<f64>, r: usize) -> Result<BasisMatrix, LinalgError> {
    Ok(top_r_singular_vectors(y, r)?.basis)
}

/// One Monte Carlo measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SddnTrialRow {
    pub trial: usize,
    pub alpha: usize,
    pub b: f64,
    pub q: f64,
    pub f: f64,
    pub lambda_v: f64,
    pub sin_theta_err: f64,
}

/// Aggregate of a Monte Carlo sweep against a reference bound.
#[derive(Debug, Clone)]
pub struct SddnReport {
    pub rows: Vec<SddnTrialRow>,
    /// Median of the per-trial bound values.
    pub bound: f64,
    /// Fraction of trials with error at or below their per-trial bound.
    pub fraction_below_bound: f64,
    pub median_err: f64,
}

fn model_condition_ratio(r: usize, f: f64) -> f64 {
    let q = coefficient_bounds(r, f);
    let top = q[0] * q[0];
    let bottom = q[q.len() - 1] * q[q.len() - 1];
    top / bottom
}

fn model_lambda_minus(r: usize, f: f64) -> f64 {
    let q = coefficient_bounds(r, f);
    let last = q[q.len() - 1];
    last * last / 3.0
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

fn run_trials(
    config: &SddnConfig,
    trials: usize,
    bound_of: impl Fn(&SddnBatch) -> f64,
) -> Result<SddnReport, SddnError> {
    if trials == 0 {
        return Err(SddnError::NoTrials);
    }
    let f_eff = model_condition_ratio(config.r, config.f);
    let mut rows = Vec::with_capacity(trials);
    let mut bounds = Vec::with_capacity(trials);
    let mut below = 0usize;
    for trial in 0..trials {
        let mut cfg = config.clone();
        cfg.seed = derive_seed(config.seed, trial as u64);
        let batch = gen_sddn_batch(&cfg)?;
        let estimate = pca_sddn_estimate(&batch.y, config.r)?;
        let err = sin_theta_max(&batch.p, &estimate)?.value();
        let bound = bound_of(&batch);
        if err <= bound {
            below += 1;
        }
        bounds.push(bound);
        rows.push(SddnTrialRow {
            trial,
            alpha: config.alpha,
            b: batch.b,
            q: batch.q,
            f: f_eff,
            lambda_v: batch.lambda_v,
            sin_theta_err: err,
        });
    }
    let mut errs: Vec<f64> = rows.iter().map(|r| r.sin_theta_err).collect();
    Ok(SddnReport {
        rows,
        bound: median(&mut bounds),
        fraction_below_bound: below as f64 / trials as f64,
        median_err: median(&mut errs),
    })
}

/// Monte Carlo check of the error bound `sqrt(b) q f + lambda_v / lambda_minus`
/// (all constants set to 1), with per-trial measured `b` and `q`.
pub fn empirical_bound_check(config: &SddnConfig, trials: usize) -> Result<SddnReport, SddnError> {
    let f_eff = model_condition_ratio(config.r, config.f);
    let lambda_minus = model_lambda_minus(config.r, config.f);
    run_trials(config, trials, |batch| {
        batch.b.sqrt() * batch.q * f_eff + batch.lambda_v / lambda_minus
    })
}

/// Error rows across batch lengths, for the error-versus-alpha curve.
pub fn error_vs_alpha_curve(
    config: &SddnConfig,
    alphas: &[usize],
    trials: usize,
) -> Result<Vec<SddnTrialRow>, SddnError> {
    let mut rows = Vec::with_capacity(alphas.len() * trials);
    for (i, &alpha) in alphas.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.alpha = alpha;
        cfg.seed = derive_seed(config.seed, 1000 + i as u64);
        let report = empirical_bound_check(&cfg, trials)?;
        rows.extend(report.rows);
    }
    Ok(rows)
}

/// Monte Carlo check of the mid-batch change bound
/// `1.1 (3 ((alpha0 / alpha) delta + 4 sqrt(b) q) f + lambda_v / lambda_minus)`,
/// measuring the estimate against the post-change truth.
pub fn pca_midchange_check(
    config: &SddnConfig,
    alpha0: usize,
    delta: f64,
    trials: usize,
) -> Result<SddnReport, SddnError> {
    let mut cfg = config.clone();
    cfg.change = Some(MidChange { alpha0, delta });
    cfg.validate()?;
    let f_eff = model_condition_ratio(cfg.r, cfg.f);
    let lambda_minus = model_lambda_minus(cfg.r, cfg.f);
    let alpha = cfg.alpha as f64;
    run_trials(&cfg, trials, move |batch| {
        let split = batch.alpha0 as f64 / alpha;
        let measured_delta = batch
            .p0
            .as_ref()
            .map(|p0| sin_theta_max(p0, &batch.p).expect("same dimension").value())
            .unwrap_or(0.0);
        1.1 * (3.0 * (split * measured_delta + 4.0 * batch.b.sqrt() * batch.q) * f_eff
            + batch.lambda_v / lambda_minus)
    })
}

/// Writes trial rows as CSV with a schema comment and a header line.
pub fn write_report_csv(rows: &[SddnTrialRow], path: &Path) -> Result<(), SddnError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# schema=1")?;
    writeln!(w, "trial,alpha,b,q,f,lambda_v,sin_theta_err")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            row.trial, row.alpha, row.b, row.q, row.f, row.lambda_v, row.sin_theta_err
        )?;
    }
    w.flush()?;
    Ok(())
}
