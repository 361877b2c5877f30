//! Deterministic synthetic scenario generation.
//!
//! [`generate`] turns a validated [`Scenario`] plus a run seed into the
//! exact stream a live system would consume: per-frame stereo feature
//! tracks, sonar detections on the sonar ticks, and the IMU samples
//! covering each frame gap, together with the ground truth they were
//! synthesized from. All randomness flows from one counter-mode generator
//! seeded by the run seed, consumed in a fixed order, so the same scenario
//! and seed reproduce every byte; different seeds redraw the world layout,
//! the noise, and the degradation survivors.
//!
//! Degradation windows model turbidity or darkness: inside a window, the
//! camera's visible feature set collapses to at most
//! `max_degraded_features` randomly chosen tracks, re-drawn every frame so
//! tracks also lose continuity, the way a starved feature tracker behaves.
//! Landmarks flagged `always_visible` survive on top of the budget.
//!
//! Sonar detections carry slant range, so targets off the zero-elevation
//! plane land in the fan image with the second-order radial error the real
//! sensor exhibits; scenarios with targets near the plane make planar
//! registration exact, scenarios with raised targets measure the
//! approximation cost.

mod scenario;
mod spline;

pub use scenario::{RatesConfig, Scatter, Scenario, ScenarioError, StereoCamera, Waypoint};

use crate::eval::Trajectory;
use crate::factors::CameraObservation;
use crate::geometry::{quat_exp, Pose};
use crate::imu::{ImuBias, ImuSample, RobotState};
use crate::sonar::{SonarIntrinsics, SonarPoint};
use crate::sonar_odometry::{SonarCorrespondenceSet, SonarFrame};
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use spline::CubicTrack;

/// A world point the camera can track.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimLandmark {
    pub id: u64,
    pub position: Vector3<f64>,
    /// Survives degradation windows on top of the feature budget.
    pub always_visible: bool,
}

/// Everything the pipeline receives for one camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub frame_id: u64,
    pub timestamp: f64,
    /// Feature observations from both cameras, ascending landmark id,
    /// left before right per landmark.
    pub camera: Vec<CameraObservation>,
    /// Present on sonar ticks.
    pub sonar: Option<SonarFrame>,
    /// IMU samples spanning the previous frame to this one, boundary
    /// samples included on both ends; empty for the first frame.
    pub imu: Vec<ImuSample>,
    /// Pre-noise kinematic state this frame was rendered from.
    pub truth: RobotState,
}

/// A generated run: the sensor stream plus the world it was rendered from.
#[derive(Clone, Debug)]
pub struct SimRun {
    pub bundles: Vec<FrameBundle>,
    /// Ground-truth poses at camera timestamps.
    pub ground_truth: Trajectory,
    pub landmarks: Vec<SimLandmark>,
    pub sonar_targets: Vec<(u64, Vector3<f64>)>,
}

/// Continuous-time trajectory sampling from the waypoint splines.
struct TrajectorySampler {
    x: CubicTrack,
    y: CubicTrack,
    z: CubicTrack,
    yaw: CubicTrack,
    pitch: CubicTrack,
    roll: CubicTrack,
}

/// Kinematic truth at one instant.
struct KinematicSample {
    pose: Pose,
    velocity: Vector3<f64>,
    /// World-frame acceleration, gravity not included.
    acceleration: Vector3<f64>,
    /// Body-frame angular velocity.
    omega_body: Vector3<f64>,
}

impl TrajectorySampler {
    fn new(waypoints: &[Waypoint]) -> Self {
        let times: Vec<f64> = waypoints.iter().map(|w| w.time).collect();
        let channel = |f: fn(&Waypoint) -> f64| {
            let values: Vec<f64> = waypoints.iter().map(f).collect();
            CubicTrack::new(&times, &values)
        };
        TrajectorySampler {
            x: channel(|w| w.position.x),
            y: channel(|w| w.position.y),
            z: channel(|w| w.position.z),
            yaw: channel(|w| w.yaw),
            pitch: channel(|w| w.pitch),
            roll: channel(|w| w.roll),
        }
    }

    fn sample(&self, t: f64) -> KinematicSample {
        let (px, vx, ax) = self.x.sample(t);
        let (py, vy, ay) = self.y.sample(t);
        let (pz, vz, az) = self.z.sample(t);
        let (yaw, yaw_d, _) = self.yaw.sample(t);
        let (pitch, pitch_d, _) = self.pitch.sample(t);
        let (roll, roll_d, _) = self.roll.sample(t);

        // Intrinsic z-y-x Euler composition: yaw, then pitch, then roll.
        let rotation = quat_exp(&Vector3::new(0.0, 0.0, yaw))
            * quat_exp(&Vector3::new(0.0, pitch, 0.0))
            * quat_exp(&Vector3::new(roll, 0.0, 0.0));

        // Body angular velocity from Euler-angle rates.
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let omega_body = Vector3::new(
            roll_d - yaw_d * sp,
            pitch_d * cr + yaw_d * cp * sr,
            yaw_d * cp * cr - pitch_d * sr,
        );

        KinematicSample {
            pose: Pose::new(rotation, Vector3::new(px, py, pz)),
            velocity: Vector3::new(vx, vy, vz),
            acceleration: Vector3::new(ax, ay, az),
            omega_body,
        }
    }
}

fn uniform_in_box(
    rng: &mut ChaCha8Rng,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(lo.x..hi.x),
        rng.random_range(lo.y..hi.y),
        rng.random_range(lo.z..hi.z),
    )
}

fn materialize_scatter(rng: &mut ChaCha8Rng, scatter: &Scatter) -> Vec<(Vector3<f64>, bool)> {
    let mut out = Vec::with_capacity(scatter.count + scatter.explicit.len());
    for _ in 0..scatter.count {
        out.push((
            uniform_in_box(rng, &scatter.region_min, &scatter.region_max),
            false,
        ));
    }
    out.extend(scatter.explicit.iter().copied());
    out
}

/// Normalized-plane projection of a world point into one camera, if it lies
/// inside the frustum.
fn project_into_camera(
    cam: &StereoCamera,
    t_cam_from_world: &Pose,
    point: &Vector3<f64>,
) -> Option<Vector2<f64>> {
    let p = t_cam_from_world.transform_point(point);
    if p.z < cam.min_depth || p.z > cam.max_depth {
        return None;
    }
    let x = p.x / p.z;
    let y = p.y / p.z;
    if x.abs() > cam.tan_half_fov_x || y.abs() > cam.tan_half_fov_y {
        return None;
    }
    Some(Vector2::new(x, y))
}

/// Renders the full sensor stream for `scenario` under `seed`.
///
/// The scenario must already be validated (construction through the TOML
/// loader guarantees it).
pub fn generate(scenario: &Scenario, seed: u64) -> SimRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = TrajectorySampler::new(&scenario.waypoints);
    let std_normal = StandardNormal;

    // World layout.
    let landmarks: Vec<SimLandmark> = materialize_scatter(&mut rng, &scenario.landmarks)
        .into_iter()
        .enumerate()
        .map(|(k, (position, always_visible))| SimLandmark {
            id: k as u64,
            position,
            always_visible,
        })
        .collect();
    let sonar_targets: Vec<(u64, Vector3<f64>)> =
        materialize_scatter(&mut rng, &scenario.sonar_targets)
            .into_iter()
            .enumerate()
            .map(|(k, (position, _))| (k as u64, position))
            .collect();

    // IMU timeline with bias random walk and white noise.
    let imu_hz = scenario.rates.imu_hz;
    let imu_dt = 1.0 / imu_hz;
    let duration = scenario.duration();
    let n_imu = (duration * imu_hz).round() as u64;
    let noise = &scenario.imu_noise;
    let g_w = noise.gravity_vector();
    let walk_a = noise.sigma_ba * imu_dt.sqrt();
    let walk_g = noise.sigma_bg * imu_dt.sqrt();
    let white_a = noise.sigma_a * imu_hz.sqrt();
    let white_g = noise.sigma_g * imu_hz.sqrt();

    let mut bias = ImuBias::zero();
    let mut imu_samples = Vec::with_capacity(n_imu as usize + 1);
    let mut bias_history = Vec::with_capacity(n_imu as usize + 1);
    for k in 0..=n_imu {
        let t = k as f64 / imu_hz;
        if k > 0 {
            let mut draw = || -> f64 { std_normal.sample(&mut rng) };
            bias.accel += Vector3::new(draw(), draw(), draw()) * walk_a;
            bias.gyro += Vector3::new(draw(), draw(), draw()) * walk_g;
        }
        bias_history.push(bias);
        let kin = sampler.sample(t);
        let r_body_from_world = kin.pose.rotation.inverse();
        let mut draw = || -> f64 { std_normal.sample(&mut rng) };
        let gyro =
            kin.omega_body + bias.gyro + Vector3::new(draw(), draw(), draw()) * white_g;
        let accel = r_body_from_world * (kin.acceleration + g_w)
            + bias.accel
            + Vector3::new(draw(), draw(), draw()) * white_a;
        imu_samples.push(ImuSample {
            timestamp: t,
            angular_velocity: gyro,
            acceleration: accel,
        });
    }

    // Frame loop.
    let imu_per_frame = (imu_hz / scenario.rates.camera_hz).round() as u64;
    let frames_per_ping = (scenario.rates.camera_hz / scenario.rates.sonar_hz).round() as u64;
    let n_frames = n_imu / imu_per_frame;
    let pixel_noise = Normal::new(0.0, scenario.pixel_sigma).expect("validated sigma");
    let range_noise = Normal::new(0.0, scenario.sonar_range_sigma).expect("validated sigma");
    let bearing_noise = Normal::new(0.0, scenario.sonar_bearing_sigma).expect("validated sigma");

    let t_left_from_body = scenario.t_body_from_camera.inverse();
    let t_right_from_body = scenario
        .t_body_from_camera
        .compose(&Pose::new(
            nalgebra::UnitQuaternion::identity(),
            Vector3::new(scenario.camera.baseline, 0.0, 0.0),
        ))
        .inverse();
    let t_sonar_from_body = scenario.t_body_from_sonar.inverse();

    let mut bundles = Vec::with_capacity(n_frames as usize + 1);
    let mut ground_truth = Trajectory::new();
    for frame_id in 0..=n_frames {
        let imu_index = frame_id * imu_per_frame;
        let t = imu_index as f64 / imu_hz;
        let kin = sampler.sample(t);
        let truth = RobotState {
            pose: kin.pose,
            velocity: kin.velocity,
            bias: bias_history[imu_index as usize],
        };
        let t_world_from_body = kin.pose;
        let t_left_from_world = t_left_from_body.compose(&t_world_from_body.inverse());
        let t_right_from_world = t_right_from_body.compose(&t_world_from_body.inverse());

        // Visibility, then the degradation budget, then noise.
        let mut visible: Vec<(&SimLandmark, Vector2<f64>, Option<Vector2<f64>>)> = Vec::new();
        for lm in &landmarks {
            if let Some(left) = project_into_camera(&scenario.camera, &t_left_from_world, &lm.position)
            {
                let right =
                    project_into_camera(&scenario.camera, &t_right_from_world, &lm.position);
                visible.push((lm, left, right));
            }
        }

        let degraded = scenario
            .degradation_windows
            .iter()
            .any(|&(start, end)| t >= start && t < end);
        let survivors: Vec<usize> = if degraded {
            let mut pool: Vec<usize> = (0..visible.len())
                .filter(|&k| !visible[k].0.always_visible)
                .collect();
            let keep = pool.len().min(scenario.max_degraded_features);
            for k in 0..keep {
                let j = rng.random_range(k..pool.len());
                pool.swap(k, j);
            }
            pool.truncate(keep);
            let mut chosen: Vec<usize> = (0..visible.len())
                .filter(|&k| visible[k].0.always_visible)
                .chain(pool)
                .collect();
            chosen.sort_unstable();
            chosen
        } else {
            (0..visible.len()).collect()
        };

        let mut camera = Vec::with_capacity(survivors.len() * 2);
        for &k in &survivors {
            let (lm, left, right) = &visible[k];
            let noisy = Vector2::new(
                left.x + pixel_noise.sample(&mut rng),
                left.y + pixel_noise.sample(&mut rng),
            );
            camera.push(CameraObservation {
                frame_id,
                camera: 0,
                landmark_id: lm.id,
                point: noisy,
                sigma: scenario.pixel_sigma,
            });
            if let Some(right) = right {
                let noisy = Vector2::new(
                    right.x + pixel_noise.sample(&mut rng),
                    right.y + pixel_noise.sample(&mut rng),
                );
                camera.push(CameraObservation {
                    frame_id,
                    camera: 1,
                    landmark_id: lm.id,
                    point: noisy,
                    sigma: scenario.pixel_sigma,
                });
            }
        }

        let sonar = if frame_id % frames_per_ping == 0 {
            let t_sonar_from_world = t_sonar_from_body.compose(&t_world_from_body.inverse());
            let mut detections = Vec::new();
            for &(id, target) in &sonar_targets {
                let p_sonar = t_sonar_from_world.transform_point(&target);
                if let Some(clean) = scenario.sonar.point_from_euclidean(&p_sonar) {
                    let r = clean.range + range_noise.sample(&mut rng);
                    let theta = clean.bearing + bearing_noise.sample(&mut rng);
                    if r >= 0.0
                        && r <= scenario.sonar.r_max
                        && theta >= scenario.sonar.theta_min
                        && theta <= scenario.sonar.theta_max
                    {
                        detections.push((id, SonarPoint::from_polar(&scenario.sonar, r, theta)));
                    }
                }
            }
            Some(SonarFrame {
                frame_id,
                timestamp: t,
                detections,
            })
        } else {
            None
        };

        let imu = if frame_id == 0 {
            Vec::new()
        } else {
            let lo = (frame_id - 1) * imu_per_frame;
            imu_samples[lo as usize..=imu_index as usize].to_vec()
        };

        ground_truth.push(t, kin.pose).expect("frame times increase");
        bundles.push(FrameBundle {
            frame_id,
            timestamp: t,
            camera,
            sonar,
            imu,
            truth,
        });
    }

    SimRun {
        bundles,
        ground_truth,
        landmarks,
        sonar_targets,
    }
}

/// Seed for one [`correspondence_provider`] call, mixed from the run seed
/// and both frame identities so every keyframe/frame pairing draws an
/// independent, reproducible outlier pattern.
pub fn provider_seed(base: u64, keyframe_id: u64, frame_id: u64) -> u64 {
    let mut x = base
        ^ keyframe_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ frame_id.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    // SplitMix64 finalizer.
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Matches detections between the current sonar frame and the keyframe by
/// target id, then replaces `floor(outlier_fraction * n)` of the
/// current-side points with uniformly drawn in-fan impostors, emulating
/// front-end mismatches. Returns the correspondence set and the indices
/// that were corrupted (for diagnostics; the estimator never sees them).
pub fn correspondence_provider(
    current: &SonarFrame,
    keyframe: &SonarFrame,
    outlier_fraction: f64,
    intrinsics: &SonarIntrinsics,
    seed: u64,
) -> (SonarCorrespondenceSet, Vec<usize>) {
    let mut pairs: Vec<(SonarPoint, SonarPoint)> = Vec::new();
    for (id_k, point_k) in &keyframe.detections {
        if let Some((_, point_i)) = current.detections.iter().find(|(id_i, _)| id_i == id_k) {
            pairs.push((*point_k, *point_i));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_outliers = (outlier_fraction * pairs.len() as f64).floor() as usize;
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    for k in 0..n_outliers {
        let j = rng.random_range(k..indices.len());
        indices.swap(k, j);
    }
    let mut corrupted: Vec<usize> = indices[..n_outliers].to_vec();
    corrupted.sort_unstable();
    for &k in &corrupted {
        let range = rng.random_range(0.05 * intrinsics.r_max..intrinsics.r_max);
        let bearing = rng.random_range(intrinsics.theta_min..intrinsics.theta_max);
        pairs[k].1 = SonarPoint::from_polar(intrinsics, range, bearing);
    }

    (
        SonarCorrespondenceSet {
            keyframe_id: keyframe.frame_id,
            frame_id: current.frame_id,
            keyframe_timestamp: keyframe.timestamp,
            timestamp: current.timestamp,
            pairs,
        },
        corrupted,
    )
}
