//! Experiment drivers behind the CLI subcommands.
//!
//! Seeding: each trial owns the seed `derive_seed(master, trial)`, and every
//! random ingredient inside a trial draws from a fixed stream of that trial
//! seed (the scene uses it directly; streams below cover the rest). Outputs
//! are therefore byte-identical across reruns with the same config and seed,
//! regardless of thread count.

use crate::config::{
    Algo, Config, ConfigError, ParamsSection, SceneSection, SupportSection, XminStudySection,
};
use crate::metrics::{self, MetricsRow};
use norst_core::datagen::{
    assemble_scene, coefficient_bounds, gen_subspace_sequence, gen_support_bernoulli,
    perturb_basis, write_scene, ChangeModel, SupportModel, SyntheticScene,
};
use norst_core::linalg::{sin_theta_max, BasisMatrix};
use norst_core::nalgebra::DMatrix;
use norst_core::rng::derive_seed;
use norst_core::sddn;
use norst_core::tracker::{
    smoothing_pass, static_rpca_mode, track_norst, track_norst_nodet, track_st_missing,
    FrameResult, NorstParams, RunRecord,
};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// Trial-seed streams for the non-scene ingredients.
const STREAM_INIT: u64 = 11;
const STREAM_MASKS: u64 = 12;
const STREAM_RANDOM_INIT: u64 = 13;

/// Everything a driver needs: the loaded config plus resolved overrides.
pub struct RunContext {
    pub config_path: PathBuf,
    pub config: Config,
    pub seed: u64,
    pub trials: usize,
    pub threads: usize,
    pub out: PathBuf,
}

/// Files written (relative to the output directory) and observations worth
/// surfacing in the manifest.
#[derive(Debug, Default)]
pub struct DriverOutput {
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

impl RunContext {
    fn invalid(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid { path: self.config_path.clone(), message: message.into() }
    }

    fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, trial as u64)
    }
}

/// Runs one closure per trial on a dedicated pool, results in trial order.
fn parallel_trials<T: Send>(
    threads: usize,
    trials: usize,
    run: impl Fn(usize) -> anyhow::Result<T> + Sync + Send,
) -> anyhow::Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| (0..trials).into_par_iter().map(run).collect())
}

/// Model parameters for the configured rank and condition ratio.
fn build_params(
    section: &ParamsSection,
    r: usize,
    f: f64,
    path: &Path,
) -> Result<NorstParams, ConfigError> {
    if r == 0 {
        return Err(ConfigError::Invalid {
            path: path.to_path_buf(),
            message: "scene.r must be at least 1".into(),
        });
    }
    let q = coefficient_bounds(r, f);
    let lambda_plus = q[0] * q[0] / 3.0;
    section.to_params(r, lambda_plus).map_err(|message| ConfigError::Invalid {
        path: path.to_path_buf(),
        message: format!("[params] rejected: {message}"),
    })
}

/// Flags change spacings too tight for a full refinement pass in between.
fn spacing_notes(scene: &SceneSection, params: &NorstParams) -> Vec<String> {
    let need = (params.k_updates + 2) * params.alpha;
    let mut starts = vec![0usize];
    starts.extend_from_slice(&scene.change_times);
    let mut ends = scene.change_times.clone();
    ends.push(scene.d);
    starts
        .iter()
        .zip(&ends)
        .filter(|(s, e)| *e - *s < need)
        .map(|(s, e)| {
            format!(
                "frames {s}..{e} leave {} frames between changes; detection plus full \
                 refinement wants about {need}, so updates there may still be converging",
                e - s
            )
        })
        .collect()
}

fn bernoulli_masks(
    n: usize,
    d: usize,
    rho: f64,
    seed: u64,
) -> anyhow::Result<Vec<Vec<usize>>> {
    Ok(gen_support_bernoulli(n, d, rho, seed)?)
}

fn zero_fill(y: &DMatrix<f64>, masks: &[Vec<usize>]) -> DMatrix<f64> {
    let mut out = y.clone();
    for (t, rows) in masks.iter().enumerate() {
        for &i in rows {
            out[(i, t)] = 0.0;
        }
    }
    out
}

fn random_basis(n: usize, r: usize, seed: u64) -> anyhow::Result<BasisMatrix> {
    let chain = gen_subspace_sequence(n, r, &ChangeModel::GivensRotation { thetas: vec![] }, seed)?;
    Ok(chain.into_iter().next().expect("chain holds the initial basis"))
}

/// Output of one tracking trial, already reduced to what the CSVs need.
struct TrialRun {
    trial: usize,
    rows: Vec<MetricsRow>,
    final_sin_theta: f64,
    rel_frobenius: f64,
    t_hat: Vec<usize>,
    flagged: usize,
    notes: Vec<String>,
}

fn run_tracking_trial(
    ctx: &RunContext,
    scene_section: &SceneSection,
    params_section: &ParamsSection,
    params: &NorstParams,
    algo: Algo,
    trial: usize,
) -> anyhow::Result<TrialRun> {
    let trial_seed = ctx.trial_seed(trial);
    let scene = assemble_scene(&scene_section.to_config(trial_seed))?;
    let init = perturb_basis(
        &scene.subspaces[0],
        params_section.init_err,
        derive_seed(trial_seed, STREAM_INIT),
    )?;

    let mut smoothed: Option<Vec<FrameResult>> = None;
    let record: RunRecord = match algo {
        Algo::Norst => track_norst(&scene.y, &init, params)?,
        Algo::Nodet => track_norst_nodet(&scene.y, &init, params)?,
        Algo::Static => static_rpca_mode(&scene.y, &init, params)?,
        Algo::Smoothing => {
            let record = track_norst(&scene.y, &init, params)?;
            smoothed = Some(smoothing_pass(&scene.y, &record, params)?);
            record
        }
        Algo::StMissing => {
            let missing = ctx
                .config
                .missing
                .as_ref()
                .ok_or_else(|| ctx.invalid("algo \"st-missing\" needs a [missing] section"))?;
            let masks = bernoulli_masks(
                scene.config.n,
                scene.config.d,
                missing.rho,
                derive_seed(trial_seed, STREAM_MASKS),
            )?;
            let observed = zero_fill(&scene.y, &masks);
            let start_basis = if missing.random_init {
                random_basis(
                    scene.config.n,
                    scene.config.r,
                    derive_seed(trial_seed, STREAM_RANDOM_INIT),
                )?
            } else {
                init
            };
            track_st_missing(&observed, &masks, &start_basis, params)?
        }
    };

    let rows = match &smoothed {
        Some(frames) => metrics::smoothed_metrics(&scene, &record, frames),
        None => metrics::online_metrics(&scene, &record),
    };
    let rel_frobenius = match &smoothed {
        Some(frames) => metrics::rel_frobenius(frames, &scene.l),
        None => metrics::rel_frobenius(&record.frames, &scene.l),
    };
    let final_sin_theta = sin_theta_max(record.final_basis(), scene.true_subspace_at(scene.config.d - 1))?
        .value();

    let mut notes = Vec::new();
    let expected = scene.config.change_times.len();
    if algo != Algo::Nodet && algo != Algo::Static && record.t_hat.len() != expected {
        notes.push(format!(
            "trial {trial}: detected {} of {expected} changes",
            record.t_hat.len()
        ));
    }
    if !record.log.is_empty() {
        notes.push(format!("trial {trial}: {} flagged frames", record.log.len()));
    }

    Ok(TrialRun {
        trial,
        rows,
        final_sin_theta,
        rel_frobenius,
        t_hat: record.t_hat,
        flagged: record.log.len(),
        notes,
    })
}

fn write_trials_csv(path: &Path, runs: &[TrialRun]) -> std::io::Result<()> {
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|run| {
            let t_hat =
                run.t_hat.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";");
            vec![
                run.trial.to_string(),
                metrics::cell(run.final_sin_theta),
                metrics::cell(run.rel_frobenius),
                run.t_hat.len().to_string(),
                run.flagged.to_string(),
                t_hat,
            ]
        })
        .collect();
    metrics::write_table_csv(
        path,
        "trial,final_sin_theta,rel_frobenius,detections,flagged,t_hat",
        &rows,
    )
}

/// `curve`: per-frame metrics and the trial-averaged error curve for the
/// configured algorithm.
pub fn run_error_curve(ctx: &RunContext) -> anyhow::Result<DriverOutput> {
    let scene_section = ctx.config.require_scene(&ctx.config_path)?;
    let params_section = ctx.config.require_params(&ctx.config_path)?;
    let algo = ctx.config.experiment.algo;
    let params = build_params(params_section, scene_section.r, scene_section.f, &ctx.config_path)?;

    let mut output = DriverOutput::default();
    output.notes.extend(spacing_notes(scene_section, &params));

    let runs = parallel_trials(ctx.threads, ctx.trials, |trial| {
        run_tracking_trial(ctx, scene_section, params_section, &params, algo, trial)
    })?;

    let frame_rows: Vec<(usize, Vec<MetricsRow>)> =
        runs.iter().map(|run| (run.trial, run.rows.clone())).collect();
    metrics::write_frames_csv(&ctx.out.join("frames.csv"), &frame_rows)?;
    metrics::write_error_curve_csv(&ctx.out.join("error_curve.csv"), params.alpha, &frame_rows)?;
    write_trials_csv(&ctx.out.join("trials.csv"), &runs)?;

    for run in &runs {
        output.notes.extend(run.notes.iter().cloned());
    }
    output.outputs =
        vec!["frames.csv".into(), "error_curve.csv".into(), "trials.csv".into()];
    Ok(output)
}

/// `st-miss`: final subspace error per trial under missing entries.
pub fn run_st_missing(ctx: &RunContext) -> anyhow::Result<DriverOutput> {
    let scene_section = ctx.config.require_scene(&ctx.config_path)?;
    let params_section = ctx.config.require_params(&ctx.config_path)?;
    if ctx.config.missing.is_none() {
        return Err(ctx.invalid("missing [missing] section").into());
    }
    let params = build_params(params_section, scene_section.r, scene_section.f, &ctx.config_path)?;

    let runs = parallel_trials(ctx.threads, ctx.trials, |trial| {
        run_tracking_trial(ctx, scene_section, params_section, &params, Algo::StMissing, trial)
    })?;

    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|run| {
            vec![
                run.trial.to_string(),
                metrics::cell(run.final_sin_theta),
                metrics::cell(run.rel_frobenius),
                run.flagged.to_string(),
            ]
        })
        .collect();
    metrics::write_table_csv(
        &ctx.out.join("st_miss.csv"),
        "trial,final_sin_theta,rel_frobenius,flagged",
        &rows,
    )?;

    let mut output = DriverOutput::default();
    let tol = 2.0 * params_section.eps;
    let good = runs.iter().filter(|run| run.final_sin_theta <= tol).count();
    output.notes.push(format!(
        "{good} of {} trials ended with subspace error <= {tol}",
        runs.len()
    ));
    for run in &runs {
        output.notes.extend(run.notes.iter().cloned());
    }
    output.outputs = vec!["st_miss.csv".into()];
    Ok(output)
}

/// Support model for one occupancy grid point, following the kind configured
/// in the scene. Bernoulli: each entry corrupted with probability `b0`.
/// Moving object: the block advances every `ceil(b0 tau)` frames through `B`
/// positions and is the largest that still fits the sweep, `s = floor(n / B)`.
fn phase_support(
    base: &SupportSection,
    n: usize,
    tau: usize,
    b0: f64,
) -> Result<SupportSection, String> {
    if !(b0 > 0.0 && b0 <= 1.0) {
        return Err(format!("occupancy {b0} outside (0, 1]"));
    }
    match base {
        SupportSection::Bernoulli { .. } => Ok(SupportSection::Bernoulli { rho: b0 }),
        SupportSection::Moving { .. } => {
            let beta = (b0 * tau as f64).ceil().max(1.0) as usize;
            let positions = tau.div_ceil(beta);
            let s = n / positions;
            if s == 0 {
                return Err(format!("n = {n} rows cannot host {positions} object positions"));
            }
            Ok(SupportSection::Moving { s, tau, c0: b0 })
        }
    }
}

/// `phase`: success-rate grid over outlier occupancy and rank.
pub fn run_phase_transition(ctx: &RunContext) -> anyhow::Result<DriverOutput> {
    let scene_section = ctx.config.require_scene(&ctx.config_path)?;
    let params_section = ctx.config.require_params(&ctx.config_path)?;
    let phase = ctx
        .config
        .phase
        .as_ref()
        .ok_or_else(|| ctx.invalid("missing [phase] section"))?;

    let mut output = DriverOutput::default();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (pi, &b0) in phase.b0_grid.iter().enumerate() {
        for (ri, &r) in phase.r_grid.iter().enumerate() {
            let support = phase_support(&scene_section.support, scene_section.n, phase.tau, b0)
                .map_err(|message| ctx.invalid(format!("[phase] rejected: {message}")))?;
            let mut section = scene_section.clone();
            section.r = r;
            section.support = support;
            let params = build_params(params_section, r, section.f, &ctx.config_path)?;

            let point = (pi * phase.r_grid.len() + ri) as u64;
            let point_seed = derive_seed(ctx.seed, 1_000 + point);
            let point_ctx = RunContext {
                config_path: ctx.config_path.clone(),
                config: ctx.config.clone(),
                seed: point_seed,
                trials: ctx.trials,
                threads: ctx.threads,
                out: ctx.out.clone(),
            };
            let runs = parallel_trials(ctx.threads, ctx.trials, |trial| {
                run_tracking_trial(
                    &point_ctx,
                    &section,
                    params_section,
                    &params,
                    Algo::Smoothing,
                    trial,
                )
            })?;

            let successes = runs
                .iter()
                .filter(|run| run.rel_frobenius < phase.success_threshold)
                .count();
            let mut rels: Vec<f64> = runs.iter().map(|run| run.rel_frobenius).collect();
            rels.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
            let median = rels[rels.len() / 2];
            let support_desc = match &section.support {
                SupportSection::Moving { s, tau, c0 } => format!("moving(s={s} tau={tau} c0={c0})"),
                SupportSection::Bernoulli { rho } => format!("bernoulli(rho={rho})"),
            };
            rows.push(vec![
                metrics::cell(b0),
                r.to_string(),
                support_desc.clone(),
                metrics::cell(successes as f64 / runs.len() as f64),
                metrics::cell(median),
            ]);
            output.notes.push(format!(
                "point b0={b0} r={r} [{support_desc}]: {successes}/{} runs under {}",
                runs.len(),
                phase.success_threshold
            ));
        }
    }

    metrics::write_table_csv(
        &ctx.out.join("phase.csv"),
        "b0,r,support,success_rate,median_rel_frobenius",
        &rows,
    )?;
    output.outputs = vec!["phase.csv".into()];
    Ok(output)
}

/// `xmin`: sweep of the outlier magnitude with the tracker thresholds held
/// fixed, the same trial seeds at every magnitude.
pub fn run_xmin_study(ctx: &RunContext) -> anyhow::Result<DriverOutput> {
    let scene_section = ctx.config.require_scene(&ctx.config_path)?;
    let params_section = ctx.config.require_params(&ctx.config_path)?;
    let study: &XminStudySection = ctx
        .config
        .xmin_study
        .as_ref()
        .ok_or_else(|| ctx.invalid("missing [xmin_study] section"))?;
    let params = build_params(params_section, scene_section.r, scene_section.f, &ctx.config_path)?;
    let algo = ctx.config.experiment.algo;

    let smallest = study
        .values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut output = DriverOutput::default();
    for &value in &study.values {
        let mut section = scene_section.clone();
        section.outliers.xmin = value;
        section.outliers.xmax = value;
        // Only the weakest magnitude gets dense noise: its outliers fall
        // below the support threshold and act as part of the noise floor,
        // which would otherwise be zero.
        section.noise = (value == smallest)
            .then_some(crate::config::NoiseSection { lambda_v: study.small_noise });

        let runs = parallel_trials(ctx.threads, ctx.trials, |trial| {
            run_tracking_trial(ctx, &section, params_section, &params, algo, trial)
        })?;
        let mean_sin =
            runs.iter().map(|run| run.final_sin_theta).sum::<f64>() / runs.len() as f64;
        let mean_rel =
            runs.iter().map(|run| run.rel_frobenius).sum::<f64>() / runs.len() as f64;
        rows.push(vec![
            metrics::cell(value),
            metrics::cell(mean_sin),
            metrics::cell(mean_rel),
        ]);
        output
            .notes
            .push(format!("xmin={value}: mean final subspace error {mean_sin:.3e}"));
    }

    metrics::write_table_csv(
        &ctx.out.join("xmin_study.csv"),
        "xmin,mean_final_sin_theta,mean_rel_frobenius",
        &rows,
    )?;
    output.outputs = vec!["xmin_study.csv".into()];
    Ok(output)
}

fn sddn_with_occupancy(support: &SupportModel, b: f64) -> SupportModel {
    match support {
        SupportModel::MovingObject { s, tau, .. } => {
            SupportModel::MovingObject { s: *s, tau: *tau, c0: b }
        }
        SupportModel::Bernoulli { .. } => SupportModel::Bernoulli { rho: b },
    }
}

/// `pca-sddn`: batch PCA error against its noise bound, with optional batch
/// length and occupancy sweeps.
pub fn run_pca_sddn(ctx: &RunContext) -> anyhow::Result<DriverOutput> {
    let section = ctx
        .config
        .sddn
        .as_ref()
        .ok_or_else(|| ctx.invalid("missing [sddn] section"))?;
    let config = section.to_config(ctx.seed);
    let mut output = DriverOutput::default();

    let report = sddn::empirical_bound_check(&config, ctx.trials)?;
    sddn::write_report_csv(&report.rows, &ctx.out.join("sddn_trials.csv"))?;
    output.outputs.push("sddn_trials.csv".into());
    output.notes.push(format!(
        "median error {:.3e} against median bound {:.3e}; {:.0}% of trials under the bound",
        report.median_err,
        report.bound,
        report.fraction_below_bound * 100.0
    ));

    if !section.alphas.is_empty() {
        let rows = sddn::error_vs_alpha_curve(&config, &section.alphas, ctx.trials)?;
        sddn::write_report_csv(&rows, &ctx.out.join("sddn_alpha.csv"))?;
        output.outputs.push("sddn_alpha.csv".into());
    }

    if !section.occupancies.is_empty() {
        let mut rows: Vec<Vec<String>> = Vec::new();
        for (i, &b) in section.occupancies.iter().enumerate() {
            let mut cfg = config.clone();
            cfg.support = sddn_with_occupancy(&config.support, b);
            cfg.seed = derive_seed(ctx.seed, 2_000 + i as u64);
            let report = sddn::empirical_bound_check(&cfg, ctx.trials)?;
            let measured_b = report.rows.iter().map(|row| row.b).sum::<f64>()
                / report.rows.len() as f64;
            rows.push(vec![
                metrics::cell(b),
                metrics::cell(measured_b),
                metrics::cell(report.median_err),
                metrics::cell(report.bound),
                metrics::cell(report.fraction_below_bound),
            ]);
        }
        metrics::write_table_csv(
            &ctx.out.join("sddn_occupancy.csv"),
            "b_target,b_measured,median_err,median_bound,fraction_below_bound",
            &rows,
        )?;
        output.outputs.push("sddn_occupancy.csv".into());
    }
    Ok(output)
}

/// `gen-scene`: generate one scene and store it with its ground truth.
pub fn gen_scene(ctx: &RunContext) -> anyhow::Result<DriverOutput> {
    let scene_section = ctx.config.require_scene(&ctx.config_path)?;
    let scene: SyntheticScene = assemble_scene(&scene_section.to_config(ctx.trial_seed(0)))?;
    let path = ctx.out.join("scene.bin");
    write_scene(&scene, &path)?;

    let mut output = DriverOutput::default();
    let thetas = scene
        .change_sin_thetas()
        .iter()
        .map(|v| format!("{v:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    if !thetas.is_empty() {
        output.notes.push(format!("measured change magnitudes (sin theta): {thetas}"));
    }
    output.outputs = vec!["scene.bin".into()];
    Ok(output)
}
