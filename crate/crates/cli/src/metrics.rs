//! Per-frame metrics and CSV emission.
//!
//! All CSVs start with a `# schema=1` comment followed by a header line.
//! Timing is reported in the run manifest only, so output files are
//! byte-reproducible from (config, seed).

use norst_core::datagen::SyntheticScene;
use norst_core::linalg::sin_theta_max;
use norst_core::nalgebra::DMatrix;
use norst_core::tracker::{FrameResult, RunRecord};
use std::io::{BufWriter, Write};
use std::path::Path;

/// Metrics for one frame of one trial. Timing never appears here; it lives
/// in the run manifest so CSVs stay byte-reproducible.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub t: usize,
    pub sin_theta_err: f64,
    pub l_rel_err: f64,
    pub support_exact: bool,
    pub detect_stat: Option<f64>,
}

/// Per-frame metrics for an online tracking run.
pub fn online_metrics(scene: &SyntheticScene, record: &RunRecord) -> Vec<MetricsRow> {
    let d = scene.config.d;
    (0..d)
        .map(|t| {
            let estimate = record.subspace_estimate_at(t);
            let sin_theta_err = sin_theta_max(estimate, scene.true_subspace_at(t))
                .expect("matching dimensions")
                .value();
            MetricsRow {
                t,
                sin_theta_err,
                l_rel_err: l_rel_err(&record.frames[t], scene, t),
                support_exact: record.frames[t].support == scene.supports[t],
                detect_stat: record.frames[t].detection_stat,
            }
        })
        .collect()
}

/// Metrics for a smoothed frame sequence. The subspace-error column keeps
/// the online estimates (the pass reuses and reorders those bases per frame
/// without producing a new per-frame subspace history); the reconstruction
/// column reflects the smoothed output.
pub fn smoothed_metrics(
    scene: &SyntheticScene,
    online: &RunRecord,
    smoothed: &[FrameResult],
) -> Vec<MetricsRow> {
    let mut rows = online_metrics(scene, online);
    for (t, row) in rows.iter_mut().enumerate() {
        row.l_rel_err = l_rel_err(&smoothed[t], scene, t);
        row.support_exact = smoothed[t].support == scene.supports[t];
        row.detect_stat = None;
    }
    rows
}

fn l_rel_err(frame: &FrameResult, scene: &SyntheticScene, t: usize) -> f64 {
    let truth = scene.l.column(t);
    (&frame.l_hat - &truth).norm() / truth.norm()
}

/// Relative Frobenius error of a cleaned stream against the true low-rank
/// matrix.
pub fn rel_frobenius(frames: &[FrameResult], l: &DMatrix<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, frame) in frames.iter().enumerate() {
        num += (&frame.l_hat - &l.column(t)).norm_squared();
        den += l.column(t).norm_squared();
    }
    (num / den).sqrt()
}

pub const SCHEMA_HEADER: &str = "# schema=1";

fn float(v: f64) -> String {
    // Shortest representation that round-trips; keeps files deterministic.
    format!("{v}")
}

/// Writes per-trial, per-frame rows.
pub fn write_frames_csv(path: &Path, rows: &[(usize, Vec<MetricsRow>)]) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{SCHEMA_HEADER}")?;
    writeln!(w, "trial,t,sin_theta_err,l_rel_err,support_exact,detect_stat")?;
    for (trial, frames) in rows {
        for row in frames {
            let stat = row.detect_stat.map(float).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                trial,
                row.t,
                float(row.sin_theta_err),
                float(row.l_rel_err),
                u8::from(row.support_exact),
                stat
            )?;
        }
    }
    w.flush()
}

/// Writes the trial-averaged subspace-error curve sampled at the refinement
/// boundaries `t = k alpha - 1`.
pub fn write_error_curve_csv(
    path: &Path,
    alpha: usize,
    trials: &[(usize, Vec<MetricsRow>)],
) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{SCHEMA_HEADER}")?;
    writeln!(w, "t,mean_sin_theta,mean_l_rel")?;
    let d = trials.first().map_or(0, |(_, rows)| rows.len());
    let mut t = alpha.saturating_sub(1);
    while t < d {
        let mut sin_sum = 0.0;
        let mut rel_sum = 0.0;
        for (_, rows) in trials {
            sin_sum += rows[t].sin_theta_err;
            rel_sum += rows[t].l_rel_err;
        }
        let count = trials.len() as f64;
        writeln!(w, "{},{},{}", t, float(sin_sum / count), float(rel_sum / count))?;
        t += alpha;
    }
    w.flush()
}

/// Generic small-table writer: schema comment, header, then rows of
/// preformatted cells.
pub fn write_table_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{SCHEMA_HEADER}")?;
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

pub fn cell(v: f64) -> String {
    float(v)
}
