//! Online robust subspace tracking.
//!
//! The tracker consumes a stream `y_t = l_t + x_t + v_t` one frame at a time.
//! Each frame is cleaned by projected compressive sensing against the current
//! subspace estimate, the cleaned frames are pooled in a sliding mini-batch,
//! and the estimate is refreshed by a rank-r SVD of that batch. The machine
//! alternates between an update phase (K refinement SVDs after a change) and
//! a detect phase (watching the projected batch energy for the next change).
//!
//! Variants share the same per-frame core: a mode without change detection
//! that refreshes on every mini-batch, a static mode that freezes the
//! estimate after refinement, and a missing-data mode that replaces the
//! sparse-recovery front end with direct least squares on known supports.

use crate::linalg::{
    orthonormal_basis, spectral_norm, top_r_singular_vectors, BasisMatrix, LinalgError,
};
use crate::sparse::{estimate_support, l1_min_warm, ls_debias, CsError, CsSolverConfig};
use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("init basis rank {got} does not match configured rank {expected}")]
    RankMismatch { expected: usize, got: usize },
    #[error("frame length {got} does not match tracker dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mini-batch alpha = {alpha} must be at least the rank r = {r}")]
    AlphaTooSmall { alpha: usize, r: usize },
    #[error("at least one refinement step is required")]
    NoRefinementSteps,
    #[error("{name} must be {requirement}, got {value}")]
    BadThreshold { name: &'static str, requirement: &'static str, value: f64 },
    #[error("stream of {d} frames is shorter than the required {required}")]
    StreamTooShort { d: usize, required: usize },
    #[error("mask at frame {t} lists index {index}, dimension is {n}")]
    BadMask { t: usize, index: usize, n: usize },
    #[error("mask list has {got} entries for a stream of {expected} frames")]
    MaskCountMismatch { expected: usize, got: usize },
    #[error("run record does not match the stream: {reason}")]
    RecordMismatch { reason: String },
    #[error(transparent)]
    Cs(#[from] CsError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint malformed: {0}")]
    BadCheckpoint(String),
}

/// Source of the sparse-recovery thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XminMode {
    /// `xi` and `omega_supp` stay at their configured values.
    Fixed,
    /// After every frame with a nonempty recovered support, the smallest
    /// recovered magnitude becomes the working outlier floor and the next
    /// frame uses `xi = floor / 15`, `omega_supp = floor / 2`. The configured
    /// scalars seed the first frames.
    Adaptive,
}

/// Tracker configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct NorstParams {
    /// Subspace rank.
    pub r: usize,
    /// Mini-batch length for subspace refinement and detection.
    pub alpha: usize,
    /// Refinement SVDs per subspace (K).
    pub k_updates: usize,
    /// l1 constraint level for the per-frame sparse recovery.
    pub xi: f64,
    /// Support threshold applied to the l1 solution.
    pub omega_supp: f64,
    /// Detection threshold on the projected batch eigenvalue.
    pub omega_evals: f64,
    pub xmin_mode: XminMode,
    pub cs_config: CsSolverConfig,
}

impl NorstParams {
    pub fn new(
        r: usize,
        alpha: usize,
        k_updates: usize,
        xi: f64,
        omega_supp: f64,
        omega_evals: f64,
    ) -> Result<Self, TrackerError> {
        let params = Self {
            r,
            alpha,
            k_updates,
            xi,
            omega_supp,
            omega_evals,
            xmin_mode: XminMode::Fixed,
            cs_config: CsSolverConfig::default(),
        };
        params.validate()?;
        Ok(params)
    }

    /// Derives the thresholds from model quantities: `xi = xmin / 15`,
    /// `omega_supp = xmin / 2`, `omega_evals = 2 eps^2 lambda_plus`.
    ///
    /// `lambda_plus` can be the model value or an estimate from training
    /// frames (see [`estimate_lambda_plus`]).
    pub fn from_model(
        r: usize,
        alpha: usize,
        k_updates: usize,
        xmin: f64,
        eps: f64,
        lambda_plus: f64,
    ) -> Result<Self, TrackerError> {
        if !(xmin > 0.0) || !xmin.is_finite() {
            return Err(TrackerError::BadThreshold {
                name: "xmin",
                requirement: "positive and finite",
                value: xmin,
            });
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(TrackerError::BadThreshold {
                name: "eps",
                requirement: "inside (0, 1)",
                value: eps,
            });
        }
        if !(lambda_plus > 0.0) || !lambda_plus.is_finite() {
            return Err(TrackerError::BadThreshold {
                name: "lambda_plus",
                requirement: "positive and finite",
                value: lambda_plus,
            });
        }
        Self::new(
            r,
            alpha,
            k_updates,
            xmin / 15.0,
            xmin / 2.0,
            2.0 * eps * eps * lambda_plus,
        )
    }

    fn validate(&self) -> Result<(), TrackerError> {
        if self.alpha < self.r {
            return Err(TrackerError::AlphaTooSmall { alpha: self.alpha, r: self.r });
        }
        if self.k_updates == 0 {
            return Err(TrackerError::NoRefinementSteps);
        }
        if !self.xi.is_finite() || self.xi < 0.0 {
            return Err(TrackerError::BadThreshold {
                name: "xi",
                requirement: "non-negative and finite",
                value: self.xi,
            });
        }
        if !self.omega_supp.is_finite() || self.omega_supp < 0.0 {
            return Err(TrackerError::BadThreshold {
                name: "omega_supp",
                requirement: "non-negative and finite",
                value: self.omega_supp,
            });
        }
        if !(self.omega_evals > 0.0) || !self.omega_evals.is_finite() {
            return Err(TrackerError::BadThreshold {
                name: "omega_evals",
                requirement: "positive and finite",
                value: self.omega_evals,
            });
        }
        Ok(())
    }
}

/// Which state machine drives the subspace updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Full machine: K refinements per change, then change detection.
    Norst,
    /// No detection; the subspace is refreshed on every mini-batch boundary
    /// and the update counter grows without bound.
    NoDet,
    /// Full refinement, then the estimate is frozen; detection never fires.
    StaticRpca,
}

/// Tracker phase. `Update` collects refinement SVDs; `Detect` watches for the
/// next subspace change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Update,
    Detect,
}

/// Anomaly markers for a processed frame. None of these abort the stream;
/// they record frames whose sparse recovery needed a fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFlag {
    /// The l1 solve hit its iteration budget before meeting the constraint.
    L1Unconverged,
    /// The debias conjugate-gradient loop did not reach its tolerance.
    LsUnconverged,
    /// The restricted least-squares system was singular; the frame fell back
    /// to the pre-debias estimate (or zero in missing-data mode).
    LsFallback,
}

/// Per-frame tracker output. `l_hat + x_hat == y` exactly.
#[derive(Debug, Clone)]
pub struct FrameResult {
    pub x_hat: DVector<f64>,
    pub support: Vec<usize>,
    pub l_hat: DVector<f64>,
    /// Detection statistic, on the frames where the detect phase evaluated it.
    pub detection_stat: Option<f64>,
    /// True when this frame closed a mini-batch and refreshed the subspace.
    pub subspace_updated: bool,
    pub flags: Vec<FrameFlag>,
}

/// The serial tracker state machine. One instance per stream; step frames in
/// time order.
#[derive(Debug, Clone)]
pub struct TrackerState {
    params: NorstParams,
    variant: Variant,
    n: usize,
    p_hat: BasisMatrix,
    p_prev: BasisMatrix,
    phase: Phase,
    /// Change index: how many changes have been declared.
    j: usize,
    /// Refinement SVDs completed in the current phase.
    k: usize,
    /// Frames processed so far (also the index of the next frame).
    t: usize,
    /// First frame of the current phase (start of stream or last detection).
    anchor: usize,
    /// Frame at which the K-th refinement of this phase completed.
    fin: usize,
    t_hat: Vec<usize>,
    buffer: VecDeque<DVector<f64>>,
    warm_lambda: Option<f64>,
    xmin_est: Option<f64>,
}

const FIN_UNSET: usize = usize::MAX;

impl TrackerState {
    /// Starts a tracker from an initial subspace estimate.
    pub fn init_from_estimate(
        p0_hat: BasisMatrix,
        params: NorstParams,
    ) -> Result<Self, TrackerError> {
        Self::init_variant(p0_hat, params, Variant::Norst)
    }

    pub fn init_variant(
        p0_hat: BasisMatrix,
        params: NorstParams,
        variant: Variant,
    ) -> Result<Self, TrackerError> {
        params.validate()?;
        if p0_hat.r() != params.r {
            return Err(TrackerError::RankMismatch { expected: params.r, got: p0_hat.r() });
        }
        let n = p0_hat.n();
        Ok(Self {
            params,
            variant,
            n,
            p_prev: p0_hat.clone(),
            p_hat: p0_hat,
            phase: Phase::Update,
            j: 0,
            k: 0,
            t: 0,
            anchor: 0,
            fin: FIN_UNSET,
            t_hat: Vec::new(),
            buffer: VecDeque::new(),
            warm_lambda: None,
            xmin_est: None,
        })
    }

    pub fn params(&self) -> &NorstParams {
        &self.params
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Current subspace estimate.
    pub fn current_estimate(&self) -> &BasisMatrix {
        &self.p_hat
    }

    /// Final estimate of the previous subspace.
    pub fn previous_estimate(&self) -> &BasisMatrix {
        &self.p_prev
    }

    /// Number of declared changes.
    pub fn change_index(&self) -> usize {
        self.j
    }

    /// Refinement SVDs completed in the current phase.
    pub fn update_count(&self) -> usize {
        self.k
    }

    /// Frames processed so far.
    pub fn frames_seen(&self) -> usize {
        self.t
    }

    /// Detected change times, strictly increasing.
    pub fn detected_changes(&self) -> &[usize] {
        &self.t_hat
    }

    /// Working thresholds for the next frame.
    fn thresholds(&self) -> (f64, f64) {
        match (self.params.xmin_mode, self.xmin_est) {
            (XminMode::Adaptive, Some(m)) => (m / 15.0, m / 2.0),
            _ => (self.params.xi, self.params.omega_supp),
        }
    }

    /// Processes one frame through the robust sparse-recovery front end.
    pub fn step(&mut self, y: &DVector<f64>) -> Result<FrameResult, TrackerError> {
        if y.len() != self.n {
            return Err(TrackerError::DimensionMismatch { expected: self.n, got: y.len() });
        }
        let (xi, omega) = self.thresholds();
        let mut flags = Vec::new();

        let l1 = l1_min_warm(&self.p_hat, y, xi, &self.params.cs_config, self.warm_lambda)?;
        if l1.iterations > 0 && l1.converged {
            self.warm_lambda = Some(l1.lambda);
        }
        if !l1.converged {
            flags.push(FrameFlag::L1Unconverged);
        }
        let support = estimate_support(&l1.x, omega);

        let x_hat = match ls_debias(&self.p_hat, y, &support, &self.params.cs_config) {
            Ok(deb) => {
                if !deb.converged {
                    flags.push(FrameFlag::LsUnconverged);
                }
                deb.x
            }
            Err(CsError::SingularSupportSystem { .. }) => {
                flags.push(FrameFlag::LsFallback);
                let mut x = DVector::<f64>::zeros(self.n);
                for &i in &support {
                    x[i] = l1.x[i];
                }
                x
            }
            Err(e) => return Err(e.into()),
        };

        if self.params.xmin_mode == XminMode::Adaptive && !support.is_empty() {
            let floor = support.iter().map(|&i| x_hat[i].abs()).fold(f64::MAX, f64::min);
            if floor > 0.0 && floor.is_finite() {
                self.xmin_est = Some(floor);
            }
        }

        self.advance(y, x_hat, support, flags)
    }

    /// Processes one frame of a zero-filled stream whose unobserved entries
    /// are listed in `missing`: direct least squares on the known support, no
    /// l1 stage or thresholding.
    pub fn step_masked(
        &mut self,
        y: &DVector<f64>,
        missing: &[usize],
    ) -> Result<FrameResult, TrackerError> {
        if y.len() != self.n {
            return Err(TrackerError::DimensionMismatch { expected: self.n, got: y.len() });
        }
        for &i in missing {
            if i >= self.n {
                return Err(TrackerError::BadMask { t: self.t, index: i, n: self.n });
            }
        }
        let mut support = missing.to_vec();
        support.sort_unstable();
        support.dedup();

        let mut flags = Vec::new();
        let x_hat = match ls_debias(&self.p_hat, y, &support, &self.params.cs_config) {
            Ok(deb) => {
                if !deb.converged {
                    flags.push(FrameFlag::LsUnconverged);
                }
                deb.x
            }
            Err(CsError::SingularSupportSystem { .. }) => {
                // No usable estimate for this frame; keep it observable.
                flags.push(FrameFlag::LsFallback);
                DVector::<f64>::zeros(self.n)
            }
            Err(e) => return Err(e.into()),
        };
        self.advance(y, x_hat, support, flags)
    }

    /// Shared tail: output assembly, buffering, and the phase machine.
    fn advance(
        &mut self,
        y: &DVector<f64>,
        x_hat: DVector<f64>,
        support: Vec<usize>,
        flags: Vec<FrameFlag>,
    ) -> Result<FrameResult, TrackerError> {
        let l_hat = y - &x_hat;
        self.buffer.push_back(l_hat.clone());
        if self.buffer.len() > self.params.alpha {
            self.buffer.pop_front();
        }

        let t = self.t;
        let alpha = self.params.alpha;
        let mut subspace_updated = false;
        let mut detection_stat = None;

        match self.variant {
            Variant::NoDet => {
                if (t + 1) % alpha == 0 {
                    self.refresh_subspace()?;
                    subspace_updated = true;
                }
            }
            Variant::Norst | Variant::StaticRpca => match self.phase {
                Phase::Update => {
                    if (t + 1 - self.anchor) % alpha == 0 {
                        self.refresh_subspace()?;
                        subspace_updated = true;
                        if self.k == self.params.k_updates {
                            self.phase = Phase::Detect;
                            self.fin = t;
                        }
                    }
                }
                Phase::Detect => {
                    if self.variant == Variant::Norst
                        && t > self.fin
                        && (t - self.fin) % alpha == 0
                    {
                        let batch = self.buffer_matrix();
                        let stat = detection_statistic(&batch, &self.p_hat)?;
                        detection_stat = Some(stat);
                        if stat > self.params.omega_evals {
                            self.t_hat.push(t);
                            self.j += 1;
                            self.k = 0;
                            self.p_prev = self.p_hat.clone();
                            self.anchor = t;
                            self.fin = FIN_UNSET;
                            self.phase = Phase::Update;
                        }
                    }
                }
            },
        }

        self.t += 1;
        Ok(FrameResult { x_hat, support, l_hat, detection_stat, subspace_updated, flags })
    }

    fn refresh_subspace(&mut self) -> Result<(), TrackerError> {
        debug_assert_eq!(self.buffer.len(), self.params.alpha);
        let batch = self.buffer_matrix();
        let svd = top_r_singular_vectors(&batch, self.params.r)?;
        self.p_hat = svd.basis;
        self.k += 1;
        Ok(())
    }

    fn buffer_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.buffer.len(), |i, c| self.buffer[c][i])
    }
}

/// Largest eigenvalue of the projected batch covariance,
/// `lambda_max((1/m) sum (I - P P^T) l_t l_t^T (I - P P^T))`, computed as the
/// squared top singular value of the projected batch over its column count.
pub fn detection_statistic(
    l_hat_batch: &DMatrix<f64>,
    p_ref: &BasisMatrix,
) -> Result<f64, TrackerError> {
    if l_hat_batch.nrows() != p_ref.n() {
        return Err(TrackerError::DimensionMismatch {
            expected: p_ref.n(),
            got: l_hat_batch.nrows(),
        });
    }
    let m = l_hat_batch.ncols();
    if m == 0 {
        return Ok(0.0);
    }
    let projected = p_ref.project_away_matrix(l_hat_batch);
    let sigma = spectral_norm(&projected);
    Ok(sigma * sigma / m as f64)
}

/// Top eigenvalue of the sample covariance `(1/m) B B^T`, used to calibrate
/// the detection threshold from training output.
pub fn estimate_lambda_plus(batch: &DMatrix<f64>) -> f64 {
    let m = batch.ncols();
    if m == 0 {
        return 0.0;
    }
    let sigma = spectral_norm(batch);
    sigma * sigma / m as f64
}

/// What happened to the subspace estimate, and when.
#[derive(Debug, Clone)]
pub struct SubspaceEvent {
    pub t: usize,
    pub kind: EventKind,
    /// The estimate in effect after this event.
    pub basis: BasisMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Init,
    /// `k`-th refinement SVD of phase `j`.
    Refinement { j: usize, k: usize },
    /// Change `j` declared at this frame.
    ChangeDetected { j: usize },
}

/// Complete output of a tracking run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub frames: Vec<FrameResult>,
    pub timeline: Vec<SubspaceEvent>,
    /// Detected change times.
    pub t_hat: Vec<usize>,
    /// Flagged frames, in time order.
    pub log: Vec<(usize, FrameFlag)>,
}

impl RunRecord {
    /// Cleaned stream as a matrix, one column per frame.
    pub fn l_hat_matrix(&self) -> DMatrix<f64> {
        let n = self.frames.first().map_or(0, |f| f.l_hat.len());
        DMatrix::from_fn(n, self.frames.len(), |i, t| self.frames[t].l_hat[i])
    }

    /// Outlier estimates as a matrix, one column per frame.
    pub fn x_hat_matrix(&self) -> DMatrix<f64> {
        let n = self.frames.first().map_or(0, |f| f.x_hat.len());
        DMatrix::from_fn(n, self.frames.len(), |i, t| self.frames[t].x_hat[i])
    }

    /// The subspace estimate in effect after frame `t` was processed.
    pub fn subspace_estimate_at(&self, t: usize) -> &BasisMatrix {
        let mut best = &self.timeline[0].basis;
        for ev in &self.timeline {
            if ev.t <= t {
                best = &ev.basis;
            } else {
                break;
            }
        }
        best
    }

    /// The last subspace estimate of the run.
    pub fn final_basis(&self) -> &BasisMatrix {
        &self.timeline[self.timeline.len() - 1].basis
    }

    /// `(t, statistic)` pairs from the detect phase.
    pub fn detection_stats(&self) -> Vec<(usize, f64)> {
        self.frames
            .iter()
            .enumerate()
            .filter_map(|(t, f)| f.detection_stat.map(|s| (t, s)))
            .collect()
    }
}

fn run_stream(
    y: &DMatrix<f64>,
    p0_hat: &BasisMatrix,
    params: &NorstParams,
    variant: Variant,
    masks: Option<&[Vec<usize>]>,
) -> Result<RunRecord, TrackerError> {
    let d = y.ncols();
    let required = match variant {
        Variant::NoDet => params.alpha,
        _ => (params.k_updates + 2) * params.alpha,
    };
    if d < required {
        return Err(TrackerError::StreamTooShort { d, required });
    }
    if let Some(m) = masks {
        if m.len() != d {
            return Err(TrackerError::MaskCountMismatch { expected: d, got: m.len() });
        }
    }

    let mut state = TrackerState::init_variant(p0_hat.clone(), params.clone(), variant)?;
    if y.nrows() != state.n {
        return Err(TrackerError::DimensionMismatch { expected: state.n, got: y.nrows() });
    }

    let mut frames = Vec::with_capacity(d);
    let mut timeline = vec![SubspaceEvent { t: 0, kind: EventKind::Init, basis: p0_hat.clone() }];
    let mut log = Vec::new();
    let mut seen_changes = 0usize;

    for t in 0..d {
        let col = y.column(t).into_owned();
        let frame = match masks {
            Some(m) => state.step_masked(&col, &m[t])?,
            None => state.step(&col)?,
        };
        for &flag in &frame.flags {
            log.push((t, flag));
        }
        if frame.subspace_updated {
            timeline.push(SubspaceEvent {
                t,
                kind: EventKind::Refinement { j: state.change_index(), k: state.update_count() },
                basis: state.current_estimate().clone(),
            });
        }
        if state.detected_changes().len() > seen_changes {
            seen_changes = state.detected_changes().len();
            timeline.push(SubspaceEvent {
                t,
                kind: EventKind::ChangeDetected { j: state.change_index() },
                basis: state.current_estimate().clone(),
            });
        }
        frames.push(frame);
    }
    Ok(RunRecord { frames, timeline, t_hat: state.t_hat, log })
}

/// Full online pass over a stream.
pub fn track_norst(
    y: &DMatrix<f64>,
    p0_hat: &BasisMatrix,
    params: &NorstParams,
) -> Result<RunRecord, TrackerError> {
    run_stream(y, p0_hat, params, Variant::Norst, None)
}

/// Online pass without change detection: the subspace is refreshed at every
/// mini-batch boundary for the whole stream.
pub fn track_norst_nodet(
    y: &DMatrix<f64>,
    p0_hat: &BasisMatrix,
    params: &NorstParams,
) -> Result<RunRecord, TrackerError> {
    run_stream(y, p0_hat, params, Variant::NoDet, None)
}

/// Robust PCA for a fixed subspace: refinement runs once, detection never
/// fires, and the estimate stays frozen afterwards.
pub fn static_rpca_mode(
    y: &DMatrix<f64>,
    p0_hat: &BasisMatrix,
    params: &NorstParams,
) -> Result<RunRecord, TrackerError> {
    run_stream(y, p0_hat, params, Variant::StaticRpca, None)
}

/// Subspace tracking with missing entries. `y` is the zero-filled stream and
/// `missing[t]` lists the unobserved rows of frame `t`. Frames whose
/// restricted system is singular are flagged in the log and passed through
/// with a zero estimate.
pub fn track_st_missing(
    y: &DMatrix<f64>,
    missing: &[Vec<usize>],
    p0_hat: &BasisMatrix,
    params: &NorstParams,
) -> Result<RunRecord, TrackerError> {
    run_stream(y, p0_hat, params, Variant::Norst, Some(missing))
}

/// Offline second pass over a finished online run.
///
/// Frames inside a change-transition window are re-estimated against the
/// union of the neighboring final estimates (rank at most 2r), frames of a
/// settled phase are re-estimated against that phase's final estimate, and
/// frames after the last completed refinement are returned as is (the online
/// pass already used the final estimate there).
pub fn smoothing_pass(
    y: &DMatrix<f64>,
    record: &RunRecord,
    params: &NorstParams,
) -> Result<Vec<FrameResult>, TrackerError> {
    let d = y.ncols();
    if record.frames.len() != d {
        return Err(TrackerError::RecordMismatch {
            reason: format!("record has {} frames, stream has {d}", record.frames.len()),
        });
    }
    if d == 0 {
        return Ok(Vec::new());
    }
    let n = y.nrows();
    if record.timeline.is_empty() || record.timeline[0].basis.n() != n {
        return Err(TrackerError::RecordMismatch {
            reason: "timeline does not match stream dimension".into(),
        });
    }

    // Per-phase final estimates and the frame at which each phase finished
    // its K-th refinement.
    let phases = record.t_hat.len() + 1;
    let mut finals: Vec<BasisMatrix> = Vec::with_capacity(phases);
    let mut fin: Vec<Option<usize>> = vec![None; phases];
    for j in 0..phases {
        let mut last: Option<&SubspaceEvent> = None;
        for ev in &record.timeline {
            match ev.kind {
                EventKind::Refinement { j: ej, k } if ej == j => {
                    last = Some(ev);
                    if k == params.k_updates {
                        fin[j] = Some(ev.t);
                    }
                }
                _ => {}
            }
        }
        match last {
            Some(ev) => finals.push(ev.basis.clone()),
            // Phase with no refinements yet: carry the estimate it started
            // with.
            None => finals.push(
                finals
                    .last()
                    .cloned()
                    .unwrap_or_else(|| record.timeline[0].basis.clone()),
            ),
        }
    }

    // Basis assignment per frame. None = keep the online output.
    let mut store: Vec<BasisMatrix> = Vec::new();
    let mut assign: Vec<Option<usize>> = vec![None; d];
    let push = |store: &mut Vec<BasisMatrix>, b: BasisMatrix| {
        store.push(b);
        store.len() - 1
    };

    // Default: every frame of phase j gets that phase's final estimate.
    let mut phase_start = vec![0usize; phases];
    for (j, &th) in record.t_hat.iter().enumerate() {
        phase_start[j + 1] = th;
    }
    for j in 0..phases {
        let id = push(&mut store, finals[j].clone());
        let start = phase_start[j];
        let end = if j + 1 < phases { phase_start[j + 1] } else { d };
        for slot in assign.iter_mut().take(end).skip(start) {
            *slot = Some(id);
        }
    }

    // Transition windows: union basis between the previous and current final
    // estimates, from right after the previous phase settled to right before
    // this one does. An unfinished last phase extends to the stream end.
    for j in 1..phases {
        let prev_fin = match fin[j - 1] {
            Some(f) => f,
            None => continue,
        };
        let (r1, r2) = (finals[j - 1].r(), finals[j].r());
        let mut joined = DMatrix::<f64>::zeros(n, r1 + r2);
        joined.view_mut((0, 0), (n, r1)).copy_from(finals[j - 1].as_matrix());
        joined.view_mut((0, r1), (n, r2)).copy_from(finals[j].as_matrix());
        let union = orthonormal_basis(&joined)?;
        let id = push(&mut store, union);
        let w_end = match fin[j] {
            Some(f) => f.saturating_sub(1),
            None => d - 1,
        };
        for slot in assign.iter_mut().take(w_end.min(d - 1) + 1).skip(prev_fin + 1) {
            *slot = Some(id);
        }
    }

    // Settled tail: the online pass already used the final estimate there.
    if let Some(last_fin) = fin[phases - 1] {
        for slot in assign.iter_mut().take(d).skip(last_fin + 1) {
            *slot = None;
        }
    }

    let mut out = Vec::with_capacity(d);
    let mut warm: Option<f64> = None;
    for t in 0..d {
        match assign[t] {
            None => out.push(record.frames[t].clone()),
            Some(id) => {
                let basis = &store[id];
                let col = y.column(t).into_owned();
                let mut flags = Vec::new();
                let l1 = l1_min_warm(basis, &col, params.xi, &params.cs_config, warm)?;
                if l1.iterations > 0 && l1.converged {
                    warm = Some(l1.lambda);
                }
                if !l1.converged {
                    flags.push(FrameFlag::L1Unconverged);
                }
                let support = estimate_support(&l1.x, params.omega_supp);
                let x_hat = match ls_debias(basis, &col, &support, &params.cs_config) {
                    Ok(deb) => {
                        if !deb.converged {
                            flags.push(FrameFlag::LsUnconverged);
                        }
                        deb.x
                    }
                    Err(CsError::SingularSupportSystem { .. }) => {
                        flags.push(FrameFlag::LsFallback);
                        let mut x = DVector::<f64>::zeros(n);
                        for &i in &support {
                            x[i] = l1.x[i];
                        }
                        x
                    }
                    Err(e) => return Err(e.into()),
                };
                let l_hat = &col - &x_hat;
                out.push(FrameResult {
                    x_hat,
                    support,
                    l_hat,
                    detection_stat: None,
                    subspace_updated: false,
                    flags,
                });
            }
        }
    }
    Ok(out)
}

// --- Checkpointing -------------------------------------------------------
//
// Self-describing little-endian blob, version tagged. Restoring and stepping
// continues bit for bit where the saved tracker left off.

const CHECKPOINT_MAGIC: &[u8; 4] = b"NCKP";
const CHECKPOINT_VERSION: u32 = 1;

struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn vector(&mut self, v: &DVector<f64>) {
        self.u64(v.len() as u64);
        for x in v.iter() {
            self.f64(*x);
        }
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for x in m.iter() {
            self.f64(*x);
        }
    }
}

struct BlobReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], TrackerError> {
        if self.pos + len > self.buf.len() {
            return Err(TrackerError::BadCheckpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64, TrackerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, TrackerError> {
        Ok(self.u64()? as usize)
    }
    fn f64(&mut self) -> Result<f64, TrackerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8, TrackerError> {
        Ok(self.take(1)?[0])
    }
    fn vector(&mut self) -> Result<DVector<f64>, TrackerError> {
        let len = self.usize()?;
        if len > (1 << 32) {
            return Err(TrackerError::BadCheckpoint("implausible vector length".into()));
        }
        let mut v = DVector::<f64>::zeros(len);
        for i in 0..len {
            v[i] = self.f64()?;
        }
        Ok(v)
    }
    fn matrix(&mut self) -> Result<DMatrix<f64>, TrackerError> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        if rows.checked_mul(cols).map_or(true, |c| c > (1 << 32)) {
            return Err(TrackerError::BadCheckpoint("implausible matrix shape".into()));
        }
        let mut m = DMatrix::<f64>::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                m[(r, c)] = self.f64()?;
            }
        }
        Ok(m)
    }
}

impl TrackerState {
    /// Serializes the full state machine to a version-tagged blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter { buf: Vec::new() };
        w.buf.extend_from_slice(CHECKPOINT_MAGIC);
        w.buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

        let p = &self.params;
        w.u64(p.r as u64);
        w.u64(p.alpha as u64);
        w.u64(p.k_updates as u64);
        w.f64(p.xi);
        w.f64(p.omega_supp);
        w.f64(p.omega_evals);
        w.u8(match p.xmin_mode {
            XminMode::Fixed => 0,
            XminMode::Adaptive => 1,
        });
        let cs = &p.cs_config;
        w.f64(cs.l1_tolerance);
        w.u64(cs.l1_max_iterations as u64);
        w.f64(cs.ls_tolerance);
        w.u64(cs.ls_max_iterations as u64);
        w.u64(cs.bisection_steps as u64);
        w.f64(cs.lambda_floor_ratio);
        w.f64(cs.constraint_slack);

        w.u8(match self.variant {
            Variant::Norst => 0,
            Variant::NoDet => 1,
            Variant::StaticRpca => 2,
        });
        w.u64(self.n as u64);
        w.u8(match self.phase {
            Phase::Update => 0,
            Phase::Detect => 1,
        });
        w.u64(self.j as u64);
        w.u64(self.k as u64);
        w.u64(self.t as u64);
        w.u64(self.anchor as u64);
        w.u64(self.fin as u64);
        w.u64(self.t_hat.len() as u64);
        for &th in &self.t_hat {
            w.u64(th as u64);
        }
        match self.warm_lambda {
            Some(v) => {
                w.u8(1);
                w.f64(v);
            }
            None => w.u8(0),
        }
        match self.xmin_est {
            Some(v) => {
                w.u8(1);
                w.f64(v);
            }
            None => w.u8(0),
        }
        w.matrix(self.p_hat.as_matrix());
        w.matrix(self.p_prev.as_matrix());
        w.u64(self.buffer.len() as u64);
        for f in &self.buffer {
            w.vector(f);
        }
        w.buf
    }

    /// Restores a tracker checkpointed by [`TrackerState::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrackerError> {
        let mut r = BlobReader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrackerError::BadCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TrackerError::BadCheckpoint(format!("unsupported version {version}")));
        }

        let rk = r.usize()?;
        let alpha = r.usize()?;
        let k_updates = r.usize()?;
        let xi = r.f64()?;
        let omega_supp = r.f64()?;
        let omega_evals = r.f64()?;
        let xmin_mode = match r.u8()? {
            0 => XminMode::Fixed,
            1 => XminMode::Adaptive,
            v => return Err(TrackerError::BadCheckpoint(format!("unknown xmin mode {v}"))),
        };
        let cs_config = CsSolverConfig {
            l1_tolerance: r.f64()?,
            l1_max_iterations: r.usize()?,
            ls_tolerance: r.f64()?,
            ls_max_iterations: r.usize()?,
            bisection_steps: r.usize()?,
            lambda_floor_ratio: r.f64()?,
            constraint_slack: r.f64()?,
        };
        let params = NorstParams {
            r: rk,
            alpha,
            k_updates,
            xi,
            omega_supp,
            omega_evals,
            xmin_mode,
            cs_config,
        };
        params.validate().map_err(|e| TrackerError::BadCheckpoint(e.to_string()))?;

        let variant = match r.u8()? {
            0 => Variant::Norst,
            1 => Variant::NoDet,
            2 => Variant::StaticRpca,
            v => return Err(TrackerError::BadCheckpoint(format!("unknown variant {v}"))),
        };
        let n = r.usize()?;
        let phase = match r.u8()? {
            0 => Phase::Update,
            1 => Phase::Detect,
            v => return Err(TrackerError::BadCheckpoint(format!("unknown phase {v}"))),
        };
        let j = r.usize()?;
        let k = r.usize()?;
        let t = r.usize()?;
        let anchor = r.usize()?;
        let fin = r.usize()?;
        let th_count = r.usize()?;
        if th_count > t {
            return Err(TrackerError::BadCheckpoint("more changes than frames".into()));
        }
        let mut t_hat = Vec::with_capacity(th_count);
        for _ in 0..th_count {
            t_hat.push(r.usize()?);
        }
        if t_hat.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrackerError::BadCheckpoint("change times not increasing".into()));
        }
        let warm_lambda = if r.u8()? == 1 { Some(r.f64()?) } else { None };
        let xmin_est = if r.u8()? == 1 { Some(r.f64()?) } else { None };

        let p_hat_m = r.matrix()?;
        let p_prev_m = r.matrix()?;
        if p_hat_m.nrows() != n || p_hat_m.ncols() != rk {
            return Err(TrackerError::BadCheckpoint("estimate shape mismatch".into()));
        }
        let p_hat =
            BasisMatrix::new(p_hat_m).map_err(|e| TrackerError::BadCheckpoint(e.to_string()))?;
        let p_prev =
            BasisMatrix::new(p_prev_m).map_err(|e| TrackerError::BadCheckpoint(e.to_string()))?;

        let buf_len = r.usize()?;
        if buf_len > alpha {
            return Err(TrackerError::BadCheckpoint("buffer longer than alpha".into()));
        }
        let mut buffer = VecDeque::with_capacity(buf_len);
        for _ in 0..buf_len {
            let v = r.vector()?;
            if v.len() != n {
                return Err(TrackerError::BadCheckpoint("buffered frame length mismatch".into()));
            }
            buffer.push_back(v);
        }
        if r.pos != bytes.len() {
            return Err(TrackerError::BadCheckpoint("trailing bytes".into()));
        }

        Ok(Self {
            params,
            variant,
            n,
            p_hat,
            p_prev,
            phase,
            j,
            k,
            t,
            anchor,
            fin,
            t_hat,
            buffer,
            warm_lambda,
            xmin_est,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrackerError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, TrackerError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
