//! IMU pre-integration, state propagation, and the inter-keyframe inertial
//! residual.
//!
//! Raw gyro and accelerometer samples between two keyframes are folded into
//! a pre-integrated tuple `(alpha, beta, delta_q)`: relative position,
//! velocity, and rotation expressed in the first keyframe's body frame, plus
//! a 15x15 covariance over the error state
//! `(d_alpha, d_beta, d_theta, d_bias_a, d_bias_g)`.
//!
//! Measurement model, with `g_w` pointing up (a stationary level
//! accelerometer reads `+g` on z):
//!
//! ```text
//! gyro  = omega_body + bias_g + noise_g
//! accel = R_body_from_world * (a_world + g_w) + bias_a + noise_a
//! ```
//!
//! Integration is midpoint: each interval rotates with the averaged
//! bias-corrected gyro sample, and accumulates the average of the two
//! endpoint accelerations expressed in their own integrated frames.
//!
//! Bias handling trades Jacobian bookkeeping for recomputation: the tuple is
//! valid only near its linearization bias, residual Jacobians with respect
//! to bias are zero, and once an estimate moves outside the trust region
//! ([`BIAS_TRUST_ACCEL`], [`BIAS_TRUST_GYRO`]) the caller re-integrates from
//! the buffered samples. Re-integration with identical inputs is
//! bit-for-bit reproducible.

use crate::geometry::{quat_exp, skew, Pose};
use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use thiserror::Error;

/// Accelerometer bias may move this far (metres/second^2, norm) from the
/// linearization point before the tuple must be re-integrated.
pub const BIAS_TRUST_ACCEL: f64 = 0.05;
/// Gyro bias trust radius, radians/second.
pub const BIAS_TRUST_GYRO: f64 = 0.01;

/// Ridge added to the pre-integration covariance before inversion, so a
/// noise-free tuple still yields a finite information matrix.
pub const INFORMATION_JITTER: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ImuError {
    #[error("pre-integration needs at least 2 samples, got {got}")]
    NotEnoughSamples { got: usize },
    #[error("IMU timestamps must strictly increase: sample {index} at {t:.6} s after {prev:.6} s")]
    NonMonotonicTimestamps { index: usize, t: f64, prev: f64 },
    #[error(
        "bias moved {deviation:.4} from the linearization point (trust radius {radius:.4}); \
         re-integrate before evaluating"
    )]
    BiasTrustRegionExceeded { deviation: f64, radius: f64 },
    #[error("residual spans {expected:.6} s but the tuple integrates {actual:.6} s")]
    IntervalMismatch { expected: f64, actual: f64 },
}

/// One IMU reading. `angular_velocity` and `acceleration` are the raw
/// (biased, noisy) gyro and accelerometer outputs in the body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub angular_velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

/// Continuous-time noise densities and the local gravity magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuNoise {
    /// Accelerometer white noise, m/s^2/sqrt(Hz).
    pub sigma_a: f64,
    /// Gyro white noise, rad/s/sqrt(Hz).
    pub sigma_g: f64,
    /// Accelerometer bias random walk, m/s^3/sqrt(Hz).
    pub sigma_ba: f64,
    /// Gyro bias random walk, rad/s^2/sqrt(Hz).
    pub sigma_bg: f64,
    /// Gravity magnitude, m/s^2.
    pub gravity: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        ImuNoise {
            sigma_a: 0.02,
            sigma_g: 0.002,
            sigma_ba: 1e-4,
            sigma_bg: 1e-5,
            gravity: 9.81,
        }
    }
}

impl ImuNoise {
    /// World-frame gravity reference, pointing up: the vector a stationary
    /// level accelerometer reports.
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.gravity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuBias {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

impl ImuBias {
    pub fn zero() -> Self {
        ImuBias {
            accel: Vector3::zeros(),
            gyro: Vector3::zeros(),
        }
    }

    fn check_trust_region(&self, lin: &ImuBias) -> Result<(), ImuError> {
        let da = (self.accel - lin.accel).norm();
        if da > BIAS_TRUST_ACCEL {
            return Err(ImuError::BiasTrustRegionExceeded {
                deviation: da,
                radius: BIAS_TRUST_ACCEL,
            });
        }
        let dg = (self.gyro - lin.gyro).norm();
        if dg > BIAS_TRUST_GYRO {
            return Err(ImuError::BiasTrustRegionExceeded {
                deviation: dg,
                radius: BIAS_TRUST_GYRO,
            });
        }
        Ok(())
    }
}

/// Full navigation state of one keyframe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotState {
    pub pose: Pose,
    /// World-frame velocity, m/s.
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
}

impl RobotState {
    pub fn at_rest(pose: Pose) -> Self {
        RobotState {
            pose,
            velocity: Vector3::zeros(),
            bias: ImuBias::zero(),
        }
    }
}

/// Pre-integrated IMU tuple between two keyframes, expressed in the first
/// keyframe's body frame and linearized at `bias_lin`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreintegratedImu {
    /// Relative position integral.
    pub alpha: Vector3<f64>,
    /// Relative velocity integral.
    pub beta: Vector3<f64>,
    /// Relative rotation.
    pub delta_q: UnitQuaternion<f64>,
    /// Covariance over `(d_alpha, d_beta, d_theta, d_bias_a, d_bias_g)`.
    pub covariance: SMatrix<f64, 15, 15>,
    /// Integrated duration, seconds.
    pub dt: f64,
    pub bias_lin: ImuBias,
}

/// Incremental pre-integrator. Feed samples in timestamp order; every
/// consecutive pair advances the tuple by one midpoint step.
pub struct ImuPreintegrator {
    bias: ImuBias,
    noise: ImuNoise,
    last: Option<ImuSample>,
    samples_seen: usize,
    alpha: Vector3<f64>,
    beta: Vector3<f64>,
    delta_q: UnitQuaternion<f64>,
    covariance: SMatrix<f64, 15, 15>,
    dt: f64,
}

impl ImuPreintegrator {
    pub fn new(bias: ImuBias, noise: ImuNoise) -> Self {
        ImuPreintegrator {
            bias,
            noise,
            last: None,
            samples_seen: 0,
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            delta_q: UnitQuaternion::identity(),
            covariance: SMatrix::zeros(),
            dt: 0.0,
        }
    }

    pub fn push(&mut self, sample: ImuSample) -> Result<(), ImuError> {
        if let Some(prev) = self.last {
            if sample.timestamp <= prev.timestamp {
                return Err(ImuError::NonMonotonicTimestamps {
                    index: self.samples_seen,
                    t: sample.timestamp,
                    prev: prev.timestamp,
                });
            }
            self.step(&prev, &sample);
        }
        self.last = Some(sample);
        self.samples_seen += 1;
        Ok(())
    }

    fn step(&mut self, s0: &ImuSample, s1: &ImuSample) {
        let dt = s1.timestamp - s0.timestamp;
        let omega_mid = 0.5 * (s0.angular_velocity + s1.angular_velocity) - self.bias.gyro;
        let q0 = self.delta_q;
        let q1 = q0 * quat_exp(&(omega_mid * dt));

        let a0 = q0 * (s0.acceleration - self.bias.accel);
        let a1 = q1 * (s1.acceleration - self.bias.accel);
        let a_mid = 0.5 * (a0 + a1);

        // First-order error-state transition for the covariance: rows/cols
        // ordered (d_alpha, d_beta, d_theta, d_bias_a, d_bias_g).
        let r0 = q0.to_rotation_matrix().into_inner();
        let a_body = s0.acceleration - self.bias.accel;
        let mut f = SMatrix::<f64, 15, 15>::zeros();
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-r0 * skew(&a_body)));
        f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-r0));
        f.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-skew(&omega_mid)));
        f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-Matrix3::identity()));

        let mut g = SMatrix::<f64, 15, 12>::zeros();
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r0));
        g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-Matrix3::identity()));
        g.fixed_view_mut::<3, 3>(9, 6).copy_from(&Matrix3::identity());
        g.fixed_view_mut::<3, 3>(12, 9).copy_from(&Matrix3::identity());

        let mut q_noise = SMatrix::<f64, 12, 12>::zeros();
        for k in 0..3 {
            q_noise[(k, k)] = self.noise.sigma_a * self.noise.sigma_a;
            q_noise[(3 + k, 3 + k)] = self.noise.sigma_g * self.noise.sigma_g;
            q_noise[(6 + k, 6 + k)] = self.noise.sigma_ba * self.noise.sigma_ba;
            q_noise[(9 + k, 9 + k)] = self.noise.sigma_bg * self.noise.sigma_bg;
        }

        let a_t = SMatrix::<f64, 15, 15>::identity() + f * dt;
        self.covariance = a_t * self.covariance * a_t.transpose() + (g * q_noise * g.transpose()) * dt;

        self.alpha += self.beta * dt + a_mid * (0.5 * dt * dt);
        self.beta += a_mid * dt;
        self.delta_q = q1;
        self.dt += dt;
    }

    /// Covariance trace so far; non-decreasing in the sample count.
    pub fn covariance_trace(&self) -> f64 {
        self.covariance.trace()
    }

    pub fn finish(self) -> Result<PreintegratedImu, ImuError> {
        if self.samples_seen < 2 {
            return Err(ImuError::NotEnoughSamples {
                got: self.samples_seen,
            });
        }
        Ok(PreintegratedImu {
            alpha: self.alpha,
            beta: self.beta,
            delta_q: self.delta_q,
            covariance: self.covariance,
            dt: self.dt,
            bias_lin: self.bias,
        })
    }
}

/// Pre-integrates a buffered sample run at a fixed linearization bias.
pub fn preintegrate(
    samples: &[ImuSample],
    bias_lin: ImuBias,
    noise: &ImuNoise,
) -> Result<PreintegratedImu, ImuError> {
    let mut integ = ImuPreintegrator::new(bias_lin, *noise);
    for s in samples {
        integ.push(*s)?;
    }
    integ.finish()
}

/// Propagates a keyframe state across a pre-integrated tuple:
///
/// ```text
/// p_j = p_i + v_i dt - 1/2 g_w dt^2 + R_i alpha
/// v_j = v_i - g_w dt + R_i beta
/// q_j = q_i * delta_q
/// ```
///
/// Bias carries over unchanged. Fails when the state's bias sits outside the
/// tuple's trust region.
pub fn propagate_state(
    prior: &RobotState,
    pre: &PreintegratedImu,
    noise: &ImuNoise,
) -> Result<RobotState, ImuError> {
    prior.bias.check_trust_region(&pre.bias_lin)?;
    let g = noise.gravity_vector();
    let dt = pre.dt;
    let r_i = prior.pose.rotation;
    let position =
        prior.pose.translation + prior.velocity * dt - 0.5 * g * dt * dt + r_i * pre.alpha;
    let velocity = prior.velocity - g * dt + r_i * pre.beta;
    Ok(RobotState {
        pose: Pose::new(r_i * pre.delta_q, position),
        velocity,
        bias: prior.bias,
    })
}

/// The 15-dim inertial residual between keyframes `i` and `j`, rows ordered
/// `(e_alpha, e_beta, e_q, e_bias_a, e_bias_g)`.
///
/// `anchor_override` replaces keyframe `i`'s pose (not its velocity or bias)
/// as the frame the tuple is compared in; the estimator passes a sonar-odometry
/// prediction here to pin the inertial chain during visual degradation.
/// `expected_interval` is the keyframe gap the caller believes this tuple
/// spans; a mismatch is an error, catching stale tuples before they corrupt
/// the solve.
pub fn imu_residual(
    state_i: &RobotState,
    state_j: &RobotState,
    pre: &PreintegratedImu,
    anchor_override: Option<&Pose>,
    expected_interval: f64,
    noise: &ImuNoise,
) -> Result<SVector<f64, 15>, ImuError> {
    if (expected_interval - pre.dt).abs() > 1e-9 {
        return Err(ImuError::IntervalMismatch {
            expected: expected_interval,
            actual: pre.dt,
        });
    }
    state_i.bias.check_trust_region(&pre.bias_lin)?;

    let anchor = anchor_override.unwrap_or(&state_i.pose);
    let g = noise.gravity_vector();
    let dt = pre.dt;
    let r_anchor_t = anchor.rotation.inverse();

    let u_p = state_j.pose.translation
        - anchor.translation
        - state_i.velocity * dt
        + 0.5 * g * dt * dt;
    let u_v = state_j.velocity - state_i.velocity + g * dt;

    let e_alpha = r_anchor_t * u_p - pre.alpha;
    let e_beta = r_anchor_t * u_v - pre.beta;
    let q_e = pre.delta_q.inverse() * (r_anchor_t * state_j.pose.rotation);
    let e_q = 2.0 * Vector3::new(q_e.i, q_e.j, q_e.k);
    let e_ba = state_j.bias.accel - state_i.bias.accel;
    let e_bg = state_j.bias.gyro - state_i.bias.gyro;

    let mut r = SVector::<f64, 15>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&e_alpha);
    r.fixed_rows_mut::<3>(3).copy_from(&e_beta);
    r.fixed_rows_mut::<3>(6).copy_from(&e_q);
    r.fixed_rows_mut::<3>(9).copy_from(&e_ba);
    r.fixed_rows_mut::<3>(12).copy_from(&e_bg);
    Ok(r)
}

/// Analytic Jacobians of [`imu_residual`] with respect to the two keyframe
/// states, columns ordered `(d_theta, d_p, d_v, d_bias_a, d_bias_g)` per
/// state. Pose perturbations follow the crate convention (rotation
/// right-multiplied in the body frame, translation additive in world).
///
/// Bias columns of the alpha/beta/q rows are zero by the re-integration
/// design. With an anchor override, keyframe `i`'s pose columns vanish: the
/// residual no longer depends on that pose.
pub fn imu_residual_jacobians(
    state_i: &RobotState,
    state_j: &RobotState,
    pre: &PreintegratedImu,
    anchor_override: Option<&Pose>,
    expected_interval: f64,
    noise: &ImuNoise,
) -> Result<(SMatrix<f64, 15, 15>, SMatrix<f64, 15, 15>), ImuError> {
    if (expected_interval - pre.dt).abs() > 1e-9 {
        return Err(ImuError::IntervalMismatch {
            expected: expected_interval,
            actual: pre.dt,
        });
    }
    state_i.bias.check_trust_region(&pre.bias_lin)?;

    let anchor = anchor_override.unwrap_or(&state_i.pose);
    let g = noise.gravity_vector();
    let dt = pre.dt;
    let r_anchor_t = anchor.rotation.inverse().to_rotation_matrix().into_inner();

    let u_p = state_j.pose.translation
        - anchor.translation
        - state_i.velocity * dt
        + 0.5 * g * dt * dt;
    let u_v = state_j.velocity - state_i.velocity + g * dt;

    let q_e = pre.delta_q.inverse() * (anchor.rotation.inverse() * state_j.pose.rotation);
    // d(2 vec(q_e * Exp(u/2))) / du at u = 0.
    let q_right = q_e.w * Matrix3::identity() + skew(&Vector3::new(q_e.i, q_e.j, q_e.k));

    let mut j_i = SMatrix::<f64, 15, 15>::zeros();
    let mut j_j = SMatrix::<f64, 15, 15>::zeros();

    // Keyframe j columns.
    j_j.fixed_view_mut::<3, 3>(0, 3).copy_from(&r_anchor_t);
    j_j.fixed_view_mut::<3, 3>(3, 6).copy_from(&r_anchor_t);
    j_j.fixed_view_mut::<3, 3>(6, 0).copy_from(&q_right);
    j_j.fixed_view_mut::<3, 3>(9, 9).copy_from(&Matrix3::identity());
    j_j.fixed_view_mut::<3, 3>(12, 12)
        .copy_from(&Matrix3::identity());

    // Keyframe i columns common to both anchor modes.
    j_i.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-r_anchor_t * dt));
    j_i.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-r_anchor_t));
    j_i.fixed_view_mut::<3, 3>(9, 9).copy_from(&(-Matrix3::identity()));
    j_i.fixed_view_mut::<3, 3>(12, 12)
        .copy_from(&(-Matrix3::identity()));

    if anchor_override.is_none() {
        let r_ij = (state_i.pose.rotation.inverse() * state_j.pose.rotation)
            .to_rotation_matrix()
            .into_inner();
        j_i.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&skew(&(r_anchor_t * u_p)));
        j_i.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_anchor_t));
        j_i.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&skew(&(r_anchor_t * u_v)));
        j_i.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-q_right * r_ij.transpose()));
    }

    Ok((j_i, j_j))
}

/// Information matrix of a pre-integrated tuple: the ridge-stabilized
/// inverse of its covariance.
pub fn information_matrix(pre: &PreintegratedImu) -> SMatrix<f64, 15, 15> {
    let ridged = pre.covariance + SMatrix::<f64, 15, 15>::identity() * INFORMATION_JITTER;
    ridged
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| SMatrix::identity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AxisAnglePerturbation;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn quiet_noise() -> ImuNoise {
        ImuNoise {
            sigma_a: 0.01,
            sigma_g: 0.001,
            sigma_ba: 1e-4,
            sigma_bg: 1e-5,
            gravity: 9.81,
        }
    }

    fn constant_samples(
        accel: Vector3<f64>,
        omega: Vector3<f64>,
        hz: f64,
        duration: f64,
    ) -> Vec<ImuSample> {
        let n = (duration * hz).round() as usize;
        (0..=n)
            .map(|k| ImuSample {
                timestamp: k as f64 / hz,
                angular_velocity: omega,
                acceleration: accel,
            })
            .collect()
    }

    fn random_state(rng: &mut StdRng) -> RobotState {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        RobotState {
            pose: Pose::new(
                quat_exp(&(axis * rng.random_range(-2.0..2.0))),
                Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ),
            ),
            velocity: Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            bias: ImuBias {
                accel: Vector3::new(
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.02..0.02),
                ),
                gyro: Vector3::new(
                    rng.random_range(-0.005..0.005),
                    rng.random_range(-0.005..0.005),
                    rng.random_range(-0.005..0.005),
                ),
            },
        }
    }

    fn random_tuple(rng: &mut StdRng, bias: ImuBias, noise: &ImuNoise) -> (PreintegratedImu, f64) {
        let hz = 100.0;
        let duration = 0.5;
        let n = (duration * hz) as usize;
        let samples: Vec<ImuSample> = (0..=n)
            .map(|k| ImuSample {
                timestamp: k as f64 / hz,
                angular_velocity: Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ),
                acceleration: Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(7.0..12.0),
                ),
            })
            .collect();
        let pre = preintegrate(&samples, bias, noise).unwrap();
        let dt = pre.dt;
        (pre, dt)
    }

    #[test]
    fn zero_input_integrates_to_zero() {
        let samples = constant_samples(Vector3::zeros(), Vector3::zeros(), 100.0, 1.0);
        let pre = preintegrate(&samples, ImuBias::zero(), &quiet_noise()).unwrap();
        assert!(pre.alpha.norm() < 1e-15);
        assert!(pre.beta.norm() < 1e-15);
        assert!(crate::geometry::quat_log(&pre.delta_q).norm() < 1e-15);
        assert!((pre.dt - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_acceleration_closed_form() {
        let t = 5.0;
        let samples = constant_samples(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros(), 1000.0, t);
        let pre = preintegrate(&samples, ImuBias::zero(), &quiet_noise()).unwrap();
        assert!((pre.beta - Vector3::new(t, 0.0, 0.0)).norm() < 1e-6);
        assert!((pre.alpha - Vector3::new(0.5 * t * t, 0.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn constant_rotation_closed_form() {
        let t = 5.0;
        let omega = Vector3::new(0.0, 0.0, 0.5);
        let samples = constant_samples(Vector3::zeros(), omega, 1000.0, t);
        let pre = preintegrate(&samples, ImuBias::zero(), &quiet_noise()).unwrap();
        let expected = quat_exp(&(omega * t));
        let err = crate::geometry::quat_log(&(expected.inverse() * pre.delta_q));
        assert!(err.norm() < 1e-8, "rotation error {}", err.norm());
    }

    #[test]
    fn bias_is_subtracted_before_integration() {
        let bias = ImuBias {
            accel: Vector3::new(0.02, -0.01, 0.03),
            gyro: Vector3::new(0.004, 0.002, -0.003),
        };
        // Raw samples equal to the bias integrate to nothing.
        let samples: Vec<ImuSample> = (0..=100)
            .map(|k| ImuSample {
                timestamp: k as f64 / 100.0,
                angular_velocity: bias.gyro,
                acceleration: bias.accel,
            })
            .collect();
        let pre = preintegrate(&samples, bias, &quiet_noise()).unwrap();
        assert!(pre.alpha.norm() < 1e-14);
        assert!(pre.beta.norm() < 1e-14);
        assert!(crate::geometry::quat_log(&pre.delta_q).norm() < 1e-14);
    }

    #[test]
    fn stationary_level_imu_propagates_to_no_motion() {
        let noise = quiet_noise();
        // A stationary level IMU reads +g on its z axis.
        let samples = constant_samples(noise.gravity_vector(), Vector3::zeros(), 1000.0, 5.0);
        let pre = preintegrate(&samples, ImuBias::zero(), &noise).unwrap();
        let next = propagate_state(&RobotState::at_rest(Pose::identity()), &pre, &noise).unwrap();
        assert!(next.pose.translation.norm() < 1e-6);
        assert!(next.velocity.norm() < 1e-6);
    }

    #[test]
    fn constant_world_acceleration_propagates_closed_form() {
        let noise = quiet_noise();
        let t = 5.0;
        let accel = Vector3::new(1.0, 0.0, 0.0) + noise.gravity_vector();
        let samples = constant_samples(accel, Vector3::zeros(), 1000.0, t);
        let pre = preintegrate(&samples, ImuBias::zero(), &noise).unwrap();
        let next = propagate_state(&RobotState::at_rest(Pose::identity()), &pre, &noise).unwrap();
        assert!((next.pose.translation - Vector3::new(0.5 * t * t, 0.0, 0.0)).norm() < 1e-6);
        assert!((next.velocity - Vector3::new(t, 0.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn propagation_respects_initial_yaw() {
        let noise = quiet_noise();
        let t = 2.0;
        // Body x pushed at 1 m/s^2 while yawed 90 degrees: motion along world y.
        let accel = Vector3::new(1.0, 0.0, noise.gravity);
        let samples = constant_samples(accel, Vector3::zeros(), 1000.0, t);
        let pre = preintegrate(&samples, ImuBias::zero(), &noise).unwrap();
        let yawed = Pose::new(
            quat_exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)),
            Vector3::zeros(),
        );
        let next = propagate_state(&RobotState::at_rest(yawed), &pre, &noise).unwrap();
        assert!((next.pose.translation - Vector3::new(0.0, 0.5 * t * t, 0.0)).norm() < 1e-8);
    }

    #[test]
    fn covariance_trace_never_decreases() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut integ = ImuPreintegrator::new(ImuBias::zero(), quiet_noise());
        let mut prev_trace = 0.0;
        for k in 0..=2000 {
            integ
                .push(ImuSample {
                    timestamp: k as f64 / 200.0,
                    angular_velocity: Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                    acceleration: Vector3::new(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(6.0..13.0),
                    ),
                })
                .unwrap();
            let trace = integ.covariance_trace();
            assert!(
                trace >= prev_trace - 1e-18,
                "trace decreased at step {k}: {prev_trace} -> {trace}"
            );
            prev_trace = trace;
        }
        assert!(prev_trace > 0.0);
    }

    #[test]
    fn reintegration_is_bit_for_bit() {
        let mut rng = StdRng::seed_from_u64(32);
        let bias = ImuBias {
            accel: Vector3::new(0.01, 0.0, -0.01),
            gyro: Vector3::new(0.001, -0.002, 0.0),
        };
        let (a, _) = random_tuple(&mut rng, bias, &quiet_noise());
        let mut rng = StdRng::seed_from_u64(32);
        let (b, _) = random_tuple(&mut rng, bias, &quiet_noise());
        assert_eq!(a, b);
    }

    #[test]
    fn residual_is_zero_at_the_propagated_state() {
        let mut rng = StdRng::seed_from_u64(33);
        let noise = quiet_noise();
        for _ in 0..20 {
            let (pre, dt) = random_tuple(&mut rng, ImuBias::zero(), &noise);
            let mut state_i = random_state(&mut rng);
            state_i.bias = ImuBias::zero();
            let state_j = propagate_state(&state_i, &pre, &noise).unwrap();
            let r = imu_residual(&state_i, &state_j, &pre, None, dt, &noise).unwrap();
            assert!(r.norm() < 1e-10, "residual {}", r.norm());
        }
    }

    #[test]
    fn position_error_maps_through_anchor_rotation() {
        let mut rng = StdRng::seed_from_u64(34);
        let noise = quiet_noise();
        let (pre, dt) = random_tuple(&mut rng, ImuBias::zero(), &noise);
        let mut state_i = random_state(&mut rng);
        state_i.bias = ImuBias::zero();
        let state_j = propagate_state(&state_i, &pre, &noise).unwrap();
        let shift = Vector3::new(0.3, -0.2, 0.5);
        let mut moved = state_j;
        moved.pose = Pose::new(state_j.pose.rotation, state_j.pose.translation + shift);
        let r = imu_residual(&state_i, &moved, &pre, None, dt, &noise).unwrap();
        let expected = state_i.pose.rotation.inverse() * shift;
        assert!((r.fixed_rows::<3>(0) - expected).norm() < 1e-9);
    }

    #[test]
    fn override_equal_to_state_pose_changes_nothing() {
        let mut rng = StdRng::seed_from_u64(35);
        let noise = quiet_noise();
        let (pre, dt) = random_tuple(&mut rng, ImuBias::zero(), &noise);
        let mut state_i = random_state(&mut rng);
        state_i.bias = ImuBias::zero();
        let mut state_j = random_state(&mut rng);
        state_j.bias = ImuBias::zero();
        let plain = imu_residual(&state_i, &state_j, &pre, None, dt, &noise).unwrap();
        let anchored =
            imu_residual(&state_i, &state_j, &pre, Some(&state_i.pose), dt, &noise).unwrap();
        assert_eq!(plain, anchored);
    }

    #[test]
    fn structural_errors() {
        let noise = quiet_noise();
        assert!(matches!(
            preintegrate(&[], ImuBias::zero(), &noise),
            Err(ImuError::NotEnoughSamples { got: 0 })
        ));
        let one = ImuSample {
            timestamp: 0.0,
            angular_velocity: Vector3::zeros(),
            acceleration: Vector3::zeros(),
        };
        assert!(matches!(
            preintegrate(&[one], ImuBias::zero(), &noise),
            Err(ImuError::NotEnoughSamples { got: 1 })
        ));
        let backwards = [
            ImuSample {
                timestamp: 0.1,
                ..one
            },
            one,
        ];
        assert!(matches!(
            preintegrate(&backwards, ImuBias::zero(), &noise),
            Err(ImuError::NonMonotonicTimestamps { .. })
        ));

        let samples = constant_samples(Vector3::zeros(), Vector3::zeros(), 100.0, 0.5);
        let pre = preintegrate(&samples, ImuBias::zero(), &noise).unwrap();
        let mut drifted = RobotState::at_rest(Pose::identity());
        drifted.bias.accel = Vector3::new(0.06, 0.0, 0.0);
        assert!(matches!(
            propagate_state(&drifted, &pre, &noise),
            Err(ImuError::BiasTrustRegionExceeded { .. })
        ));
        let rest = RobotState::at_rest(Pose::identity());
        assert!(matches!(
            imu_residual(&rest, &rest, &pre, None, 0.75, &noise),
            Err(ImuError::IntervalMismatch { .. })
        ));
        assert!(matches!(
            imu_residual(&drifted, &rest, &pre, None, 0.5, &noise),
            Err(ImuError::BiasTrustRegionExceeded { .. })
        ));
    }

    #[test]
    fn information_matrix_is_finite_and_symmetric() {
        let mut rng = StdRng::seed_from_u64(36);
        let (pre, _) = random_tuple(&mut rng, ImuBias::zero(), &quiet_noise());
        let info = information_matrix(&pre);
        assert!(info.iter().all(|x| x.is_finite()));
        assert!((info - info.transpose()).norm() < 1e-6 * info.norm());
        // Noise-free tuple: the ridge keeps the inverse finite.
        let silent = ImuNoise {
            sigma_a: 0.0,
            sigma_g: 0.0,
            sigma_ba: 0.0,
            sigma_bg: 0.0,
            gravity: 9.81,
        };
        let samples = constant_samples(Vector3::zeros(), Vector3::zeros(), 100.0, 0.5);
        let pre0 = preintegrate(&samples, ImuBias::zero(), &silent).unwrap();
        let info0 = information_matrix(&pre0);
        assert!(info0.iter().all(|x| x.is_finite()));
    }

    /// Central finite-difference check of the analytic Jacobians, both with
    /// and without an anchor override.
    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(37);
        let noise = quiet_noise();
        let h = 1e-6;
        for trial in 0..50 {
            let bias = ImuBias {
                accel: Vector3::new(0.01, -0.005, 0.0),
                gyro: Vector3::new(0.001, 0.0, -0.002),
            };
            let (pre, dt) = random_tuple(&mut rng, bias, &noise);
            let mut state_i = random_state(&mut rng);
            let mut state_j = random_state(&mut rng);
            state_i.bias = bias;
            state_j.bias = bias;
            let anchor_pose = random_state(&mut rng).pose;
            let anchor = if trial % 2 == 0 {
                None
            } else {
                Some(&anchor_pose)
            };

            let (j_i, j_j) =
                imu_residual_jacobians(&state_i, &state_j, &pre, anchor, dt, &noise).unwrap();

            for (which, j_an) in [(0, j_i), (1, j_j)] {
                for col in 0..15 {
                    let mut delta = [0.0; 15];
                    delta[col] = h;
                    let plus = perturb_pair(&state_i, &state_j, which, &delta);
                    delta[col] = -h;
                    let minus = perturb_pair(&state_i, &state_j, which, &delta);
                    let rp =
                        imu_residual(&plus.0, &plus.1, &pre, anchor, dt, &noise).unwrap();
                    let rm =
                        imu_residual(&minus.0, &minus.1, &pre, anchor, dt, &noise).unwrap();
                    let fd = (rp - rm) / (2.0 * h);
                    for row in 0..15 {
                        let an = j_an[(row, col)];
                        let scale = an.abs().max(fd[row].abs()).max(1.0);
                        assert!(
                            (fd[row] - an).abs() <= 1e-4 * scale,
                            "trial {trial} state {which} entry ({row},{col}): fd {} vs analytic {an}",
                            fd[row]
                        );
                    }
                }
            }
        }
    }

    fn perturb_state(state: &RobotState, delta: &[f64; 15]) -> RobotState {
        let d = AxisAnglePerturbation::new(
            Vector3::new(delta[0], delta[1], delta[2]),
            Vector3::new(delta[3], delta[4], delta[5]),
        );
        RobotState {
            pose: state.pose.apply(&d),
            velocity: state.velocity + Vector3::new(delta[6], delta[7], delta[8]),
            bias: ImuBias {
                accel: state.bias.accel + Vector3::new(delta[9], delta[10], delta[11]),
                gyro: state.bias.gyro + Vector3::new(delta[12], delta[13], delta[14]),
            },
        }
    }

    fn perturb_pair(
        state_i: &RobotState,
        state_j: &RobotState,
        which: usize,
        delta: &[f64; 15],
    ) -> (RobotState, RobotState) {
        if which == 0 {
            (perturb_state(state_i, delta), *state_j)
        } else {
            (*state_i, perturb_state(state_j, delta))
        }
    }
}
