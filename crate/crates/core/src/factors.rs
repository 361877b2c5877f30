//! Exteroceptive residual blocks: stereo-camera reprojection and sonar
//! point registration, with analytic Jacobians in the crate perturbation
//! convention (rotation right-multiplied in the body frame, translation
//! additive in world; pose Jacobian columns ordered `(d_theta, d_p)`).
//!
//! Camera observations live on the normalized image plane, so intrinsics
//! never appear: an observation is `z = (x/z, y/z)` of the landmark in the
//! camera frame, plus noise. The residual is `z - h(pose, landmark)`.
//!
//! A sonar factor ties the two body poses that saw the same target: the
//! zero-elevation detections are lifted to body-frame points and compared
//! in the world frame,
//!
//! ```text
//! e_s = T_wb_i * T_bs * lift(P_si) - T_wb_k * T_bs * lift(P_sk)
//! ```
//!
//! with `lift(x, y) = (x, y, 0)`. The unknown elevation makes the z
//! component fictitious, so the sonar information matrix weights it by
//! [`SONAR_Z_WEIGHT`] = 0: the factor constrains in-plane motion only, and
//! z, roll and pitch stay with the camera and the IMU's gravity reference.

use crate::geometry::{skew, Pose};
use nalgebra::{Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use thiserror::Error;

/// Landmarks closer to the image plane than this depth (metres) cannot be
/// projected.
pub const MIN_CAMERA_DEPTH: f64 = 1e-3;

/// Residual magnitude, in standard deviations, where the Huber loss switches
/// from quadratic to linear.
pub const HUBER_WIDTH: f64 = 1.345;

/// Weight on the fictitious z component of the sonar residual.
pub const SONAR_Z_WEIGHT: f64 = 0.0;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("landmark at depth {depth:.6} m is behind the camera (minimum {MIN_CAMERA_DEPTH} m)")]
    LandmarkBehindCamera { depth: f64 },
}

/// One feature detection: `point` is on the normalized image plane of
/// camera `camera` (0 = left, 1 = right), `sigma` its isotropic noise.
/// `landmark_id` is the persistent track identity the front end assigned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraObservation {
    pub frame_id: u64,
    pub camera: usize,
    pub landmark_id: u64,
    pub point: Vector2<f64>,
    pub sigma: f64,
}

/// Camera reprojection residual and Jacobians at one (pose, landmark) pair.
#[derive(Clone, Copy, Debug)]
pub struct CameraEvaluation {
    pub residual: Vector2<f64>,
    /// With respect to the body pose, columns `(d_theta, d_p)`.
    pub j_pose: SMatrix<f64, 2, 6>,
    /// With respect to the landmark's world position.
    pub j_landmark: SMatrix<f64, 2, 3>,
}

/// Evaluates the reprojection residual `z - h` of `landmark` seen from
/// `pose_wb` through the camera mounted at `t_cam_from_body`.
pub fn camera_residual(
    pose_wb: &Pose,
    landmark: &Vector3<f64>,
    observation: &CameraObservation,
    t_cam_from_body: &Pose,
) -> Result<CameraEvaluation, FactorError> {
    let r_wb_t = pose_wb.rotation.inverse().to_rotation_matrix().into_inner();
    let p_body = r_wb_t * (landmark - pose_wb.translation);
    let p_cam = t_cam_from_body.transform_point(&p_body);
    if p_cam.z < MIN_CAMERA_DEPTH {
        return Err(FactorError::LandmarkBehindCamera { depth: p_cam.z });
    }

    let inv_z = 1.0 / p_cam.z;
    let h = Vector2::new(p_cam.x * inv_z, p_cam.y * inv_z);
    let residual = observation.point - h;

    // dh/dP_cam.
    let h_proj = SMatrix::<f64, 2, 3>::new(
        inv_z,
        0.0,
        -p_cam.x * inv_z * inv_z,
        0.0,
        inv_z,
        -p_cam.y * inv_z * inv_z,
    );
    let r_cb = t_cam_from_body.rotation_matrix();

    // P_cam responses: body-frame point rotates as Exp(-d_theta) * P_body.
    let d_pcam_d_theta = r_cb * skew(&p_body);
    let d_pcam_d_p = -r_cb * r_wb_t;
    let d_pcam_d_lm = r_cb * r_wb_t;

    let mut j_pose = SMatrix::<f64, 2, 6>::zeros();
    j_pose
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(-h_proj * d_pcam_d_theta));
    j_pose
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(-h_proj * d_pcam_d_p));

    Ok(CameraEvaluation {
        residual,
        j_pose,
        j_landmark: -h_proj * d_pcam_d_lm,
    })
}

/// Information matrix of a camera observation: isotropic, `1/sigma^2`.
pub fn camera_information(observation: &CameraObservation) -> Matrix2<f64> {
    Matrix2::identity() / (observation.sigma * observation.sigma)
}

/// A registered sonar target pair: the same target's planar coordinates in
/// the sonar keyframe (`point_k`) and in the current frame (`point_i`),
/// with the registration noise `sigma` (metres).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SonarFactorObservation {
    pub keyframe_id: u64,
    pub frame_id: u64,
    pub point_k: Vector2<f64>,
    pub point_i: Vector2<f64>,
    pub sigma: f64,
}

/// Sonar registration residual and Jacobians at the two body poses.
#[derive(Clone, Copy, Debug)]
pub struct SonarEvaluation {
    pub residual: Vector3<f64>,
    /// With respect to the keyframe body pose, columns `(d_theta, d_p)`.
    pub j_pose_k: SMatrix<f64, 3, 6>,
    /// With respect to the current body pose.
    pub j_pose_i: SMatrix<f64, 3, 6>,
}

fn lift(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 0.0)
}

/// Evaluates the sonar registration residual between the keyframe body pose
/// `pose_k` and the current body pose `pose_i`, with the sonar mounted at
/// `t_sonar_from_body^-1` (the argument is body-from-sonar).
pub fn sonar_residual(
    pose_k: &Pose,
    pose_i: &Pose,
    observation: &SonarFactorObservation,
    t_body_from_sonar: &Pose,
) -> SonarEvaluation {
    let m_k = t_body_from_sonar.transform_point(&lift(&observation.point_k));
    let m_i = t_body_from_sonar.transform_point(&lift(&observation.point_i));
    let residual = pose_i.transform_point(&m_i) - pose_k.transform_point(&m_k);

    let r_k = pose_k.rotation_matrix();
    let r_i = pose_i.rotation_matrix();

    let mut j_pose_k = SMatrix::<f64, 3, 6>::zeros();
    j_pose_k
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(r_k * skew(&m_k)));
    j_pose_k
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-Matrix3::identity()));

    let mut j_pose_i = SMatrix::<f64, 3, 6>::zeros();
    j_pose_i
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-r_i * skew(&m_i)));
    j_pose_i
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());

    SonarEvaluation {
        residual,
        j_pose_k,
        j_pose_i,
    }
}

/// Information matrix of a sonar pair: in-plane components at `1/sigma^2`,
/// the fictitious z component scaled by `z_weight` (0 in normal operation).
pub fn sonar_information(observation: &SonarFactorObservation, z_weight: f64) -> Matrix3<f64> {
    let w = 1.0 / (observation.sigma * observation.sigma);
    Matrix3::from_diagonal(&Vector3::new(w, w, z_weight * w))
}

/// IRLS weight of the Huber loss for a whitened residual norm: 1 in the
/// quadratic region, decaying as `width / norm` beyond it. Multiply rows of
/// the whitened residual and Jacobian by its square root.
pub fn huber_weight(whitened_norm: f64, width: f64) -> f64 {
    if whitened_norm <= width {
        1.0
    } else {
        width / whitened_norm
    }
}
