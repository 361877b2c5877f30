//! Trajectory metrics: absolute error, per-interval drift, relative pose
//! error, and the on-disk trajectory format.
//!
//! Trajectories are timestamped pose sequences. Metrics pair estimate and
//! ground-truth samples by nearest timestamp (within half the ground truth's
//! median sample period), so the two trajectories may run at different rates
//! and cover different spans.
//!
//! The file format is one sample per line, `timestamp tx ty tz qx qy qz qw`
//! (Hamilton quaternion, scalar last), ASCII decimals, `#` comments. The
//! writer is deterministic: identical trajectories serialize to identical
//! bytes.

use crate::geometry::{quat_log, Pose};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("timestamps must strictly increase: {t:.6} after {prev:.6}")]
    NonMonotonicTimestamps { t: f64, prev: f64 },
    #[error("trajectories share no associated samples")]
    NoOverlap,
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A time-ordered pose sequence.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Trajectory {
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose) -> Result<(), EvalError> {
        if let Some(&(prev, _)) = self.samples.last() {
            if timestamp <= prev {
                return Err(EvalError::NonMonotonicTimestamps { t: timestamp, prev });
            }
        }
        self.samples.push((timestamp, pose));
        Ok(())
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start_time(&self) -> Option<f64> {
        self.samples.first().map(|s| s.0)
    }

    pub fn end_time(&self) -> Option<f64> {
        self.samples.last().map(|s| s.0)
    }

    /// Parses the line format documented at module level.
    pub fn load(path: &Path) -> Result<Trajectory, EvalError> {
        let display = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
            path: display.clone(),
            source,
        })?;
        let mut traj = Trajectory::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| EvalError::Io {
                path: display.clone(),
                source,
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let parse = |err: String| EvalError::Parse {
                path: display.clone(),
                line: idx + 1,
                message: err,
            };
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(parse(format!(
                    "expected 8 fields (timestamp tx ty tz qx qy qz qw), got {}",
                    fields.len()
                )));
            }
            let mut v = [0.0_f64; 8];
            for (k, field) in fields.iter().enumerate() {
                v[k] = field
                    .parse()
                    .map_err(|e| parse(format!("field {}: {e}", k + 1)))?;
            }
            let quat = Quaternion::new(v[7], v[4], v[5], v[6]);
            if quat.norm() < 1e-6 {
                return Err(parse("quaternion norm is zero".to_string()));
            }
            let pose = Pose::new(
                UnitQuaternion::from_quaternion(quat),
                Vector3::new(v[1], v[2], v[3]),
            );
            traj.push(v[0], pose).map_err(|e| parse(e.to_string()))?;
        }
        Ok(traj)
    }

    /// Writes the line format documented at module level, deterministically.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# timestamp tx ty tz qx qy qz qw")?;
        for (t, pose) in &self.samples {
            let p = pose.translation;
            let q = pose.rotation;
            writeln!(
                out,
                "{t:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                p.x, p.y, p.z, q.i, q.j, q.k, q.w
            )?;
        }
        out.flush()
    }
}

/// Whether and how the estimate is rigidly aligned to the ground truth
/// before absolute errors are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    /// Compare in the shared world frame as-is.
    None,
    /// Best-fit SE(3) alignment of the estimate onto the ground truth.
    Se3,
}

/// Pose discrepancy `truth^-1 * estimate`, expressed in the truth frame.
#[derive(Clone, Copy, Debug)]
pub struct PoseError {
    pub translation: Vector3<f64>,
    /// Geodesic rotation error, radians.
    pub rotation: f64,
}

/// Relative pose error between one truth/estimate pair.
pub fn relative_pose_error(truth: &Pose, estimate: &Pose) -> PoseError {
    let err = truth.inverse().compose(estimate);
    PoseError {
        translation: err.translation,
        rotation: quat_log(&err.rotation).norm(),
    }
}

/// Nearest-timestamp association: for each estimate sample, the closest
/// ground-truth sample no further than half the truth's median period.
fn associate(estimate: &Trajectory, truth: &Trajectory) -> Result<Vec<(usize, usize)>, EvalError> {
    if estimate.is_empty() || truth.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let ts = truth.samples();
    let mut gaps: Vec<f64> = ts.windows(2).map(|w| w[1].0 - w[0].0).collect();
    let tolerance = if gaps.is_empty() {
        f64::INFINITY
    } else {
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        0.5 * gaps[gaps.len() / 2]
    };

    let mut pairs = Vec::with_capacity(estimate.len());
    let mut cursor = 0;
    for (ei, &(te, _)) in estimate.samples().iter().enumerate() {
        while cursor + 1 < ts.len() && (ts[cursor + 1].0 - te).abs() <= (ts[cursor].0 - te).abs() {
            cursor += 1;
        }
        if (ts[cursor].0 - te).abs() <= tolerance {
            pairs.push((ei, cursor));
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    Ok(pairs)
}

/// Best-fit rigid transform `R * src + t ~ dst` over matched points.
pub fn umeyama_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    assert_eq!(src.len(), dst.len());
    assert!(!src.is_empty());
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let mut d = Matrix3::identity();
    d[(2, 2)] = (v * u.transpose()).determinant().signum();
    let r = v * d * u.transpose();
    let rotation = UnitQuaternion::from_matrix(&r);
    Pose::new(rotation, cd - r * cs)
}

fn aligned_pairs(
    estimate: &Trajectory,
    truth: &Trajectory,
    alignment: Alignment,
) -> Result<Vec<(Pose, Pose)>, EvalError> {
    let assoc = associate(estimate, truth)?;
    let es = estimate.samples();
    let ts = truth.samples();
    let correction = match alignment {
        Alignment::None => Pose::identity(),
        Alignment::Se3 => {
            let src: Vec<_> = assoc.iter().map(|&(e, _)| es[e].1.translation).collect();
            let dst: Vec<_> = assoc.iter().map(|&(_, t)| ts[t].1.translation).collect();
            umeyama_alignment(&src, &dst)
        }
    };
    Ok(assoc
        .into_iter()
        .map(|(e, t)| (correction.compose(&es[e].1), ts[t].1))
        .collect())
}

/// Absolute trajectory error: RMS of the translation discrepancy over all
/// associated pairs, optionally after rigid alignment.
pub fn ate_rmse(
    estimate: &Trajectory,
    truth: &Trajectory,
    alignment: Alignment,
) -> Result<f64, EvalError> {
    let pairs = aligned_pairs(estimate, truth, alignment)?;
    let sum: f64 = pairs
        .iter()
        .map(|(e, t)| (e.translation - t.translation).norm_squared())
        .sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// RMS geodesic rotation error in degrees over all associated pairs.
pub fn rotation_rmse_deg(
    estimate: &Trajectory,
    truth: &Trajectory,
    alignment: Alignment,
) -> Result<f64, EvalError> {
    let pairs = aligned_pairs(estimate, truth, alignment)?;
    let sum: f64 = pairs
        .iter()
        .map(|(e, t)| {
            let angle = relative_pose_error(t, e).rotation;
            angle * angle
        })
        .sum();
    Ok((sum / pairs.len() as f64).sqrt().to_degrees())
}

/// Drift accumulated over one evaluation interval.
#[derive(Clone, Copy, Debug)]
pub struct IntervalError {
    pub start: f64,
    pub end: f64,
    /// Translation discrepancy of the relative motion across the interval,
    /// metres.
    pub error: f64,
}

/// Splits the common time span into consecutive `interval`-second spans and
/// reports, per span, how far the estimate's relative motion drifted from
/// the ground truth's: `|| trans( (T_t(a)^-1 T_t(b))^-1 (E(a)^-1 E(b)) ) ||`.
///
/// Unlike the absolute error, this localizes drift in time: a span the
/// estimator survived scores near zero even after an earlier failure.
pub fn interval_translation_errors(
    estimate: &Trajectory,
    truth: &Trajectory,
    interval: f64,
) -> Result<Vec<IntervalError>, EvalError> {
    assert!(interval > 0.0, "interval must be positive");
    let pairs = aligned_pairs(estimate, truth, Alignment::None)?;
    let times: Vec<f64> = {
        let assoc = associate(estimate, truth)?;
        assoc
            .iter()
            .map(|&(e, _)| estimate.samples()[e].0)
            .collect()
    };

    // Closest associated pair to a boundary time.
    let nearest = |t: f64| -> usize {
        let mut best = 0;
        for (k, &tk) in times.iter().enumerate() {
            if (tk - t).abs() < (times[best] - t).abs() {
                best = k;
            }
        }
        best
    };

    let t0 = *times.first().unwrap();
    let t1 = *times.last().unwrap();
    let mut out = Vec::new();
    let mut start = t0;
    while start + interval <= t1 + 1e-9 {
        let end = start + interval;
        let a = nearest(start);
        let b = nearest(end);
        if b > a {
            let (est_a, tru_a) = pairs[a];
            let (est_b, tru_b) = pairs[b];
            let rel_truth = tru_a.inverse().compose(&tru_b);
            let rel_est = est_a.inverse().compose(&est_b);
            let drift = rel_truth.inverse().compose(&rel_est);
            out.push(IntervalError {
                start,
                end,
                error: drift.translation.norm(),
            });
        }
        start = end;
    }
    Ok(out)
}
