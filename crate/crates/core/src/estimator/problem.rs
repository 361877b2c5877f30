//! The sliding-window nonlinear least-squares problem and its solver.
//!
//! Variables are the window keyframe states (pose, velocity, IMU biases;
//! 15 numbers per frame, poses perturbed multiplicatively) and the world
//! positions of the landmarks the window observes. The oldest window
//! frame's pose is held fixed as the gauge. Terms are inertial factors
//! between consecutive frames, stereo reprojection factors, and planar
//! sonar registration factors, the latter two under a Huber loss.
//!
//! The solver is Levenberg-Marquardt on the Gauss-Newton normal equations
//! with landmarks eliminated by their Schur complement, so the dense solve
//! only spans the frame states. Damping floors the diagonal, which keeps
//! directions the factors cannot see (for example depth under sonar-only
//! constraints) harmlessly stationary instead of exploding the solve.

use crate::factors::{
    camera_information, camera_residual, huber_weight, sonar_information, sonar_residual,
    CameraObservation, SonarFactorObservation,
};
use crate::geometry::{AxisAnglePerturbation, Pose};
use crate::imu::{
    imu_residual, imu_residual_jacobians, information_matrix, ImuError, ImuNoise,
    PreintegratedImu, RobotState,
};
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use std::collections::BTreeMap;

/// Keeps zero diagonal entries (unconstrained directions) positive after
/// damping so the factorization stays valid and those directions hold still.
const DIAG_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Stop when an accepted step reduces the cost by less than this
    /// fraction.
    pub relative_decrease: f64,
    /// Stop when the gradient infinity norm falls below this.
    pub gradient_tol: f64,
    pub lambda_init: f64,
    /// Damping beyond this is divergence.
    pub lambda_max: f64,
    /// Huber width on whitened camera and sonar residual norms.
    pub huber_width: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 50,
            relative_decrease: 1e-8,
            gradient_tol: 1e-10,
            lambda_init: 1e-4,
            lambda_max: 1e12,
            huber_width: crate::factors::HUBER_WIDTH,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvergenceReason {
    GradientSmall,
    CostStalled,
    IterationLimit,
}

#[derive(Clone, Copy, Debug)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub reason: ConvergenceReason,
}

#[derive(Debug)]
pub(crate) enum SolverFailure {
    /// Damping grew past the limit without finding a descent step.
    Diverged { lambda: f64 },
    /// The problem itself is inconsistent (stale tuple, bias outside the
    /// trust region at the accepted state); the estimator must rebuild it.
    Problem(ImuError),
}

/// One stereo reprojection term.
#[derive(Clone)]
pub(crate) struct CameraTerm {
    pub frame: usize,
    pub obs: CameraObservation,
    pub t_cam_from_body: Pose,
}

/// One planar sonar registration term between the keyframe and a frame.
#[derive(Clone)]
pub(crate) struct SonarTerm {
    pub keyframe: SonarKeyframeRef,
    pub frame: usize,
    pub obs: SonarFactorObservation,
    /// Information scale (the degradation weight).
    pub weight: f64,
}

/// Keyframe side of a sonar term. A keyframe that slid out of the window
/// keeps constraining later frames through the estimate it held at exit;
/// dropping those factors instead would leave stretches of the window with
/// no sonar tie at every keyframe handoff.
#[derive(Clone)]
pub(crate) enum SonarKeyframeRef {
    InWindow(usize),
    Retired(Pose),
}

/// One inertial term between consecutive window frames.
#[derive(Clone)]
pub(crate) struct ImuTerm {
    pub i: usize,
    pub j: usize,
    pub pre: PreintegratedImu,
    /// Sonar-odometry pose pinned in place of frame `i`'s estimate.
    pub anchor: Option<Pose>,
    pub interval: f64,
}

#[derive(Clone)]
pub(crate) struct Problem {
    pub n_frames: usize,
    /// Window index whose pose stays fixed (the gauge).
    pub frozen_pose: usize,
    pub camera: Vec<CameraTerm>,
    pub sonar: Vec<SonarTerm>,
    pub imu: Vec<ImuTerm>,
    pub noise: ImuNoise,
    pub t_body_from_sonar: Pose,
    pub settings: SolverSettings,
}

#[derive(Clone, Debug)]
pub(crate) struct Variables {
    pub states: Vec<RobotState>,
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
}

/// Normal-equation contributions of one landmark: its own 3x3 block, its
/// gradient, and the cross blocks against every pose observing it.
struct LandmarkBlocks {
    h_ll: Matrix3<f64>,
    b_l: Vector3<f64>,
    cross: Vec<(usize, SMatrix<f64, 6, 3>)>,
}

impl LandmarkBlocks {
    fn new() -> Self {
        LandmarkBlocks {
            h_ll: Matrix3::zeros(),
            b_l: Vector3::zeros(),
            cross: Vec::new(),
        }
    }

    fn cross_mut(&mut self, frame: usize) -> &mut SMatrix<f64, 6, 3> {
        if let Some(k) = self.cross.iter().position(|(f, _)| *f == frame) {
            return &mut self.cross[k].1;
        }
        self.cross.push((frame, SMatrix::zeros()));
        &mut self.cross.last_mut().unwrap().1
    }
}

struct NormalEquations {
    h: DMatrix<f64>,
    b: DVector<f64>,
    landmarks: BTreeMap<u64, LandmarkBlocks>,
    cost: f64,
    /// Camera terms that evaluated successfully. Steps may not reduce this:
    /// pushing a landmark behind a camera silently deletes cost terms, and
    /// comparing costs over different term sets would reward exactly that.
    active: usize,
}

fn add_block<const R: usize, const C: usize>(
    h: &mut DMatrix<f64>,
    row: usize,
    col: usize,
    block: &SMatrix<f64, R, C>,
) {
    for r in 0..R {
        for c in 0..C {
            h[(row + r, col + c)] += block[(r, c)];
        }
    }
}

fn add_rows<const R: usize>(b: &mut DVector<f64>, row: usize, block: &SMatrix<f64, R, 1>) {
    for r in 0..R {
        b[row + r] += block[(r, 0)];
    }
}

/// Huber loss on a whitened residual norm.
fn huber_rho(s: f64, width: f64) -> f64 {
    if s <= width {
        0.5 * s * s
    } else {
        width * (s - 0.5 * width)
    }
}

impl Problem {
    fn pose_col(&self, frame: usize) -> usize {
        15 * frame
    }

    /// Robust total cost at `vars` plus the count of successfully evaluated
    /// camera terms. `Ok(None)` flags a candidate that left an inertial
    /// trust region and must be rejected; structural inconsistencies are
    /// hard errors.
    fn try_cost(&self, vars: &Variables) -> Result<Option<(f64, usize)>, ImuError> {
        let mut cost = 0.0;
        let mut active = 0;
        for term in &self.imu {
            let r = match imu_residual(
                &vars.states[term.i],
                &vars.states[term.j],
                &term.pre,
                term.anchor.as_ref(),
                term.interval,
                &self.noise,
            ) {
                Ok(r) => r,
                Err(ImuError::BiasTrustRegionExceeded { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let info = information_matrix(&term.pre);
            cost += 0.5 * (r.transpose() * info * r)[(0, 0)];
        }
        for term in &self.camera {
            let Some(landmark) = vars.landmarks.get(&term.obs.landmark_id) else {
                continue;
            };
            let Ok(eval) = camera_residual(
                &vars.states[term.frame].pose,
                landmark,
                &term.obs,
                &term.t_cam_from_body,
            ) else {
                continue;
            };
            active += 1;
            let info = camera_information(&term.obs);
            let s = (eval.residual.transpose() * info * eval.residual)[(0, 0)].sqrt();
            cost += huber_rho(s, self.settings.huber_width);
        }
        for term in &self.sonar {
            let pose_k = match &term.keyframe {
                SonarKeyframeRef::InWindow(k) => &vars.states[*k].pose,
                SonarKeyframeRef::Retired(pose) => pose,
            };
            let eval = sonar_residual(
                pose_k,
                &vars.states[term.frame].pose,
                &term.obs,
                &self.t_body_from_sonar,
            );
            let info = sonar_information(&term.obs, crate::factors::SONAR_Z_WEIGHT) * term.weight;
            let s = (eval.residual.transpose() * info * eval.residual)[(0, 0)].sqrt();
            cost += huber_rho(s, self.settings.huber_width);
        }
        Ok(Some((cost, active)))
    }

    /// Builds the damped-free normal equations at `vars`.
    fn assemble(&self, vars: &Variables) -> Result<NormalEquations, ImuError> {
        let n = 15 * self.n_frames;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        let mut landmarks: BTreeMap<u64, LandmarkBlocks> = BTreeMap::new();
        let mut cost = 0.0;
        let mut active = 0;

        for term in &self.imu {
            let r = imu_residual(
                &vars.states[term.i],
                &vars.states[term.j],
                &term.pre,
                term.anchor.as_ref(),
                term.interval,
                &self.noise,
            )?;
            let (ji, jj) = imu_residual_jacobians(
                &vars.states[term.i],
                &vars.states[term.j],
                &term.pre,
                term.anchor.as_ref(),
                term.interval,
                &self.noise,
            )?;
            let info = information_matrix(&term.pre);
            cost += 0.5 * (r.transpose() * info * r)[(0, 0)];
            let (ci, cj) = (15 * term.i, 15 * term.j);
            let jti = ji.transpose() * info;
            let jtj = jj.transpose() * info;
            add_block(&mut h, ci, ci, &(jti * ji));
            add_block(&mut h, ci, cj, &(jti * jj));
            add_block(&mut h, cj, ci, &(jtj * ji));
            add_block(&mut h, cj, cj, &(jtj * jj));
            add_rows(&mut b, ci, &(jti * r));
            add_rows(&mut b, cj, &(jtj * r));
        }

        for term in &self.camera {
            let Some(landmark) = vars.landmarks.get(&term.obs.landmark_id) else {
                continue;
            };
            let Ok(eval) = camera_residual(
                &vars.states[term.frame].pose,
                landmark,
                &term.obs,
                &term.t_cam_from_body,
            ) else {
                continue;
            };
            active += 1;
            let info = camera_information(&term.obs);
            let s = (eval.residual.transpose() * info * eval.residual)[(0, 0)].sqrt();
            let w = huber_weight(s, self.settings.huber_width);
            cost += huber_rho(s, self.settings.huber_width);
            let info = info * w;
            let col = self.pose_col(term.frame);
            let jtp = eval.j_pose.transpose() * info;
            let jtl = eval.j_landmark.transpose() * info;
            add_block(&mut h, col, col, &(jtp * eval.j_pose));
            add_rows(&mut b, col, &(jtp * eval.residual));
            let blocks = landmarks
                .entry(term.obs.landmark_id)
                .or_insert_with(LandmarkBlocks::new);
            blocks.h_ll += jtl * eval.j_landmark;
            blocks.b_l += jtl * eval.residual;
            *blocks.cross_mut(term.frame) += jtp * eval.j_landmark;
        }

        for term in &self.sonar {
            let pose_k = match &term.keyframe {
                SonarKeyframeRef::InWindow(k) => &vars.states[*k].pose,
                SonarKeyframeRef::Retired(pose) => pose,
            };
            let eval = sonar_residual(
                pose_k,
                &vars.states[term.frame].pose,
                &term.obs,
                &self.t_body_from_sonar,
            );
            let info = sonar_information(&term.obs, crate::factors::SONAR_Z_WEIGHT) * term.weight;
            let s = (eval.residual.transpose() * info * eval.residual)[(0, 0)].sqrt();
            let w = huber_weight(s, self.settings.huber_width);
            cost += huber_rho(s, self.settings.huber_width);
            let info = info * w;
            let cf = self.pose_col(term.frame);
            let jtf = eval.j_pose_i.transpose() * info;
            add_block(&mut h, cf, cf, &(jtf * eval.j_pose_i));
            add_rows(&mut b, cf, &(jtf * eval.residual));
            if let SonarKeyframeRef::InWindow(k) = &term.keyframe {
                let ck = self.pose_col(*k);
                let jtk = eval.j_pose_k.transpose() * info;
                add_block(&mut h, ck, ck, &(jtk * eval.j_pose_k));
                add_block(&mut h, ck, cf, &(jtk * eval.j_pose_i));
                add_block(&mut h, cf, ck, &(jtf * eval.j_pose_k));
                add_rows(&mut b, ck, &(jtk * eval.residual));
            }
        }

        Ok(NormalEquations {
            h,
            b,
            landmarks,
            cost,
            active,
        })
    }

    /// One damped step from the assembled equations; `None` when the
    /// factorization fails at this damping.
    fn try_step(&self, eq: &NormalEquations, vars: &Variables, lambda: f64) -> Option<Variables> {
        let n = eq.h.nrows();
        let mut h = eq.h.clone();
        for k in 0..n {
            h[(k, k)] += lambda * eq.h[(k, k)].max(DIAG_FLOOR);
        }
        let mut rhs = -&eq.b;

        // Schur complement: fold each landmark into the frame system.
        let mut lm_solve: BTreeMap<u64, (Matrix3<f64>, Vector3<f64>)> = BTreeMap::new();
        for (&id, blocks) in &eq.landmarks {
            let mut c = blocks.h_ll;
            for k in 0..3 {
                c[(k, k)] += lambda * blocks.h_ll[(k, k)].max(DIAG_FLOOR);
            }
            let c_inv = c.try_inverse()?;
            for (fa, ja) in &blocks.cross {
                let ja_cinv = ja * c_inv;
                let col_a = self.pose_col(*fa);
                add_rows(&mut rhs, col_a, &(ja_cinv * blocks.b_l));
                for (fb, jb) in &blocks.cross {
                    add_block(
                        &mut h,
                        col_a,
                        self.pose_col(*fb),
                        &(-(ja_cinv * jb.transpose())),
                    );
                }
            }
            lm_solve.insert(id, (c_inv, blocks.b_l));
        }

        // The gauge: drop the frozen pose's six columns and rows.
        let frozen = self.pose_col(self.frozen_pose);
        let active: Vec<usize> = (0..n).filter(|&k| !(frozen..frozen + 6).contains(&k)).collect();
        let na = active.len();
        let h_a = DMatrix::from_fn(na, na, |r, c| h[(active[r], active[c])]);
        let rhs_a = DVector::from_fn(na, |r, _| rhs[active[r]]);
        let chol = h_a.cholesky()?;
        let delta_a = chol.solve(&rhs_a);
        let mut delta = DVector::<f64>::zeros(n);
        for (k, &col) in active.iter().enumerate() {
            delta[col] = delta_a[k];
        }

        // Back-substitute the landmarks, then retract.
        let mut next = vars.clone();
        for (id, (c_inv, b_l)) in &lm_solve {
            let blocks = &eq.landmarks[id];
            let mut rhs_l = -b_l;
            for (f, j) in &blocks.cross {
                let col = self.pose_col(*f);
                let delta_pose = SMatrix::<f64, 6, 1>::from_fn(|r, _| delta[col + r]);
                rhs_l -= j.transpose() * delta_pose;
            }
            *next.landmarks.get_mut(id).expect("landmark exists") += c_inv * rhs_l;
        }
        for (k, state) in next.states.iter_mut().enumerate() {
            let col = 15 * k;
            let pert = AxisAnglePerturbation::new(
                Vector3::new(delta[col], delta[col + 1], delta[col + 2]),
                Vector3::new(delta[col + 3], delta[col + 4], delta[col + 5]),
            );
            state.pose = state.pose.apply(&pert);
            state.velocity += Vector3::new(delta[col + 6], delta[col + 7], delta[col + 8]);
            state.bias.accel += Vector3::new(delta[col + 9], delta[col + 10], delta[col + 11]);
            state.bias.gyro += Vector3::new(delta[col + 12], delta[col + 13], delta[col + 14]);
        }
        Some(next)
    }

    /// Gradient infinity norm over frames and landmarks, the frozen pose
    /// excluded.
    fn gradient_inf(&self, eq: &NormalEquations) -> f64 {
        let frozen = self.pose_col(self.frozen_pose);
        let mut g: f64 = 0.0;
        for k in 0..eq.b.len() {
            if (frozen..frozen + 6).contains(&k) {
                continue;
            }
            g = g.max(eq.b[k].abs());
        }
        for blocks in eq.landmarks.values() {
            g = g.max(blocks.b_l.amax());
        }
        g
    }

    pub fn solve(&self, vars: Variables) -> Result<(Variables, SolveReport), SolverFailure> {
        let mut vars = vars;
        let mut eq = self.assemble(&vars).map_err(SolverFailure::Problem)?;
        let initial_cost = eq.cost;
        let mut lambda = self.settings.lambda_init;
        let mut iterations = 0;
        let mut reason = ConvergenceReason::IterationLimit;

        for _ in 0..self.settings.max_iterations {
            iterations += 1;
            if self.gradient_inf(&eq) < self.settings.gradient_tol {
                reason = ConvergenceReason::GradientSmall;
                break;
            }
            let mut accepted = None;
            while accepted.is_none() {
                let candidate = self.try_step(&eq, &vars, lambda);
                let improvement = match &candidate {
                    None => None,
                    Some(cand) => match self
                        .try_cost(cand)
                        .map_err(SolverFailure::Problem)?
                    {
                        Some((c, act)) if c < eq.cost && act >= eq.active => Some(c),
                        _ => None,
                    },
                };
                match improvement {
                    Some(cost) => {
                        accepted = Some((candidate.expect("checked above"), cost));
                        lambda = (lambda / 3.0).max(1e-9);
                    }
                    None => {
                        lambda *= 10.0;
                        if lambda > self.settings.lambda_max {
                            return Err(SolverFailure::Diverged { lambda });
                        }
                    }
                }
            }
            let (next, cost) = accepted.expect("loop exits only with a step or an error");
            let decrease = eq.cost - cost;
            vars = next;
            eq = self.assemble(&vars).map_err(SolverFailure::Problem)?;
            if decrease < self.settings.relative_decrease * eq.cost.max(1e-12) {
                reason = ConvergenceReason::CostStalled;
                break;
            }
        }

        let report = SolveReport {
            iterations,
            initial_cost,
            final_cost: eq.cost,
            reason,
        };
        Ok((vars, report))
    }
}
