//! Scenario description: the TOML schema, its validation, and the runtime
//! form the generator consumes.
//!
//! A scenario file declares a waypoint trajectory, the sensor suite
//! (rates, noise, mounting), the visual world (landmarks and sonar
//! targets, either listed explicitly or scattered procedurally inside a
//! box), and the visual-degradation windows. Unknown keys are errors, so a
//! typo cannot silently fall back to a default.
//!
//! Conventions inside the file: angles in degrees, positions in metres,
//! world frame z-up, body frame x-forward/y-left/z-up. Camera optical
//! frames are z-forward/x-right/y-down; extrinsics are body-from-sensor
//! mounts given as `[w, x, y, z]` quaternions. Trajectories must start at
//! the origin, level and unrotated: the estimator publishes in its first
//! body frame, and starting from identity makes that frame the world frame,
//! so absolute errors are meaningful without alignment.

use crate::geometry::Pose;
use crate::imu::ImuNoise;
use crate::sonar::SonarIntrinsics;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing scenario: {0}")]
    Toml(#[from] Box<toml::de::Error>),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    seed: u64,
    #[serde(default)]
    outlier_fraction: f64,
    #[serde(default = "default_degraded_budget")]
    max_degraded_features: usize,
    rates: RatesConfig,
    noise: NoiseConfig,
    camera: CameraConfig,
    sonar: SonarConfig,
    extrinsics: ExtrinsicsConfig,
    #[serde(rename = "trajectory")]
    waypoints: Vec<WaypointConfig>,
    #[serde(default)]
    landmarks: ScatterConfig,
    #[serde(default)]
    sonar_targets: ScatterConfig,
    #[serde(default, rename = "degradation")]
    degradation_windows: Vec<WindowConfig>,
}

fn default_degraded_budget() -> usize {
    5
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    pub camera_hz: f64,
    pub sonar_hz: f64,
    pub imu_hz: f64,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseConfig {
    pixel_sigma: f64,
    sonar_range_sigma: f64,
    sonar_bearing_sigma: f64,
    accel_sigma: f64,
    gyro_sigma: f64,
    accel_bias_walk: f64,
    gyro_bias_walk: f64,
    #[serde(default = "default_gravity")]
    gravity: f64,
}

fn default_gravity() -> f64 {
    9.81
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraConfig {
    horizontal_half_fov_deg: f64,
    vertical_half_fov_deg: f64,
    min_depth: f64,
    max_depth: f64,
    baseline: f64,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SonarConfig {
    bearing_fov_deg: f64,
    elevation_fov_deg: f64,
    max_range: f64,
    image_width: u32,
    image_height: u32,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtrinsicsConfig {
    /// Body-from-left-camera mount rotation, `[w, x, y, z]`.
    camera_quat: [f64; 4],
    camera_translation: [f64; 3],
    /// Body-from-sonar mount rotation, `[w, x, y, z]`.
    sonar_quat: [f64; 4],
    sonar_translation: [f64; 3],
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointConfig {
    time: f64,
    position: [f64; 3],
    #[serde(default)]
    yaw_deg: f64,
    #[serde(default)]
    pitch_deg: f64,
    #[serde(default)]
    roll_deg: f64,
}

/// Procedurally scattered points plus explicit extras.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScatterConfig {
    #[serde(default)]
    count: usize,
    region_min: Option<[f64; 3]>,
    region_max: Option<[f64; 3]>,
    #[serde(default)]
    explicit: Vec<ExplicitPoint>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplicitPoint {
    position: [f64; 3],
    #[serde(default)]
    always_visible: bool,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowConfig {
    start: f64,
    end: f64,
}

/// One trajectory waypoint in runtime units (radians, seconds).
#[derive(Clone, Copy, Debug)]
pub struct Waypoint {
    pub time: f64,
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

/// Stereo pair parameters: frustum bounds on the normalized image plane and
/// the baseline between the two optical centres (right camera offset along
/// the left camera's x axis).
#[derive(Clone, Copy, Debug)]
pub struct StereoCamera {
    pub tan_half_fov_x: f64,
    pub tan_half_fov_y: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub baseline: f64,
}

/// Where points may be scattered, and which are pinned down by hand.
#[derive(Clone, Debug)]
pub struct Scatter {
    pub count: usize,
    pub region_min: Vector3<f64>,
    pub region_max: Vector3<f64>,
    pub explicit: Vec<(Vector3<f64>, bool)>,
}

/// A validated scenario, ready for the generator. The world itself
/// (landmark and target positions drawn from the scatter regions) is
/// materialized per run seed by [`generate`](super::generate).
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    /// Default run seed; the pipeline may override it per run.
    pub seed: u64,
    /// Fraction of sonar correspondences replaced by mismatches.
    pub outlier_fraction: f64,
    /// Feature-track budget per frame inside a degradation window.
    pub max_degraded_features: usize,
    pub rates: RatesConfig,
    pub pixel_sigma: f64,
    pub sonar_range_sigma: f64,
    pub sonar_bearing_sigma: f64,
    pub imu_noise: ImuNoise,
    pub camera: StereoCamera,
    pub sonar: SonarIntrinsics,
    /// Body-from-left-camera mount.
    pub t_body_from_camera: Pose,
    /// Body-from-sonar mount.
    pub t_body_from_sonar: Pose,
    pub waypoints: Vec<Waypoint>,
    pub landmarks: Scatter,
    pub sonar_targets: Scatter,
    /// Sorted, disjoint `[start, end)` spans of camera degradation.
    pub degradation_windows: Vec<(f64, f64)>,
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Scenario, ScenarioError> {
        let file: ScenarioFile = toml::from_str(text).map_err(Box::new)?;
        let scenario = Scenario::from_file(file)?;
        scenario.validate()?;
        Ok(scenario)
    }

    fn from_file(f: ScenarioFile) -> Result<Scenario, ScenarioError> {
        let quat = |q: [f64; 4]| -> Result<UnitQuaternion<f64>, ScenarioError> {
            let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
            if raw.norm() < 1e-6 {
                return Err(ScenarioError::Invalid(
                    "extrinsic quaternion has zero norm".to_string(),
                ));
            }
            Ok(UnitQuaternion::from_quaternion(raw))
        };
        let vec = |v: [f64; 3]| Vector3::new(v[0], v[1], v[2]);
        let scatter = |s: &ScatterConfig, what: &str| -> Result<Scatter, ScenarioError> {
            let (region_min, region_max) = match (s.region_min, s.region_max) {
                (Some(lo), Some(hi)) => (vec(lo), vec(hi)),
                (None, None) if s.count == 0 => (Vector3::zeros(), Vector3::zeros()),
                _ => {
                    return Err(ScenarioError::Invalid(format!(
                        "{what}: region_min and region_max must both be given when count > 0"
                    )))
                }
            };
            Ok(Scatter {
                count: s.count,
                region_min,
                region_max,
                explicit: s
                    .explicit
                    .iter()
                    .map(|e| (vec(e.position), e.always_visible))
                    .collect(),
            })
        };

        Ok(Scenario {
            name: f.name,
            seed: f.seed,
            outlier_fraction: f.outlier_fraction,
            max_degraded_features: f.max_degraded_features,
            rates: f.rates,
            pixel_sigma: f.noise.pixel_sigma,
            sonar_range_sigma: f.noise.sonar_range_sigma,
            sonar_bearing_sigma: f.noise.sonar_bearing_sigma,
            imu_noise: ImuNoise {
                sigma_a: f.noise.accel_sigma,
                sigma_g: f.noise.gyro_sigma,
                sigma_ba: f.noise.accel_bias_walk,
                sigma_bg: f.noise.gyro_bias_walk,
                gravity: f.noise.gravity,
            },
            camera: StereoCamera {
                tan_half_fov_x: f.camera.horizontal_half_fov_deg.to_radians().tan(),
                tan_half_fov_y: f.camera.vertical_half_fov_deg.to_radians().tan(),
                min_depth: f.camera.min_depth,
                max_depth: f.camera.max_depth,
                baseline: f.camera.baseline,
            },
            sonar: SonarIntrinsics {
                theta_min: -0.5 * f.sonar.bearing_fov_deg.to_radians(),
                theta_max: 0.5 * f.sonar.bearing_fov_deg.to_radians(),
                phi_min: -0.5 * f.sonar.elevation_fov_deg.to_radians(),
                phi_max: 0.5 * f.sonar.elevation_fov_deg.to_radians(),
                r_max: f.sonar.max_range,
                image_width: f.sonar.image_width,
                image_height: f.sonar.image_height,
            },
            t_body_from_camera: Pose::new(
                quat(f.extrinsics.camera_quat)?,
                vec(f.extrinsics.camera_translation),
            ),
            t_body_from_sonar: Pose::new(
                quat(f.extrinsics.sonar_quat)?,
                vec(f.extrinsics.sonar_translation),
            ),
            waypoints: f
                .waypoints
                .iter()
                .map(|w| Waypoint {
                    time: w.time,
                    position: vec(w.position),
                    yaw: w.yaw_deg.to_radians(),
                    pitch: w.pitch_deg.to_radians(),
                    roll: w.roll_deg.to_radians(),
                })
                .collect(),
            landmarks: scatter(&f.landmarks, "landmarks")?,
            sonar_targets: scatter(&f.sonar_targets, "sonar_targets")?,
            degradation_windows: f.degradation_windows.iter().map(|w| (w.start, w.end)).collect(),
        })
    }

    /// Scenario length: the last waypoint's time.
    pub fn duration(&self) -> f64 {
        self.waypoints.last().map(|w| w.time).unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::Invalid(msg));

        if self.waypoints.len() < 2 {
            return fail(format!(
                "trajectory needs at least 2 waypoints, got {}",
                self.waypoints.len()
            ));
        }
        if self.waypoints[0].time != 0.0 {
            return fail("trajectory must start at time 0".to_string());
        }
        let w0 = &self.waypoints[0];
        if w0.position.norm() != 0.0 || w0.yaw != 0.0 || w0.pitch != 0.0 || w0.roll != 0.0 {
            return fail(
                "trajectory must start at the origin with zero yaw/pitch/roll; \
                 the first body frame is the world frame"
                    .to_string(),
            );
        }
        for pair in self.waypoints.windows(2) {
            if pair[1].time <= pair[0].time {
                return fail(format!(
                    "waypoint times must strictly increase: {} then {}",
                    pair[0].time, pair[1].time
                ));
            }
        }

        for (name, hz) in [
            ("camera_hz", self.rates.camera_hz),
            ("sonar_hz", self.rates.sonar_hz),
            ("imu_hz", self.rates.imu_hz),
        ] {
            if !(hz > 0.0) {
                return fail(format!("{name} must be positive, got {hz}"));
            }
        }
        let imu_per_frame = self.rates.imu_hz / self.rates.camera_hz;
        if (imu_per_frame - imu_per_frame.round()).abs() > 1e-9 || imu_per_frame < 1.0 {
            return fail(format!(
                "imu_hz must be an integer multiple of camera_hz, got ratio {imu_per_frame}"
            ));
        }
        let frames_per_ping = self.rates.camera_hz / self.rates.sonar_hz;
        if (frames_per_ping - frames_per_ping.round()).abs() > 1e-9 || frames_per_ping < 1.0 {
            return fail(format!(
                "camera_hz must be an integer multiple of sonar_hz, got ratio {frames_per_ping}"
            ));
        }

        for (name, sigma) in [
            ("pixel_sigma", self.pixel_sigma),
            ("sonar_range_sigma", self.sonar_range_sigma),
            ("sonar_bearing_sigma", self.sonar_bearing_sigma),
            ("accel_sigma", self.imu_noise.sigma_a),
            ("gyro_sigma", self.imu_noise.sigma_g),
            ("accel_bias_walk", self.imu_noise.sigma_ba),
            ("gyro_bias_walk", self.imu_noise.sigma_bg),
        ] {
            if sigma < 0.0 {
                return fail(format!("{name} must be non-negative, got {sigma}"));
            }
        }
        if !(self.imu_noise.gravity > 0.0) {
            return fail(format!(
                "gravity must be positive, got {}",
                self.imu_noise.gravity
            ));
        }

        if !(self.camera.tan_half_fov_x > 0.0 && self.camera.tan_half_fov_y > 0.0) {
            return fail("camera field of view must be positive".to_string());
        }
        if !(self.camera.min_depth > 0.0 && self.camera.max_depth > self.camera.min_depth) {
            return fail(format!(
                "camera depth range [{}, {}] is invalid",
                self.camera.min_depth, self.camera.max_depth
            ));
        }
        if !(self.camera.baseline > 0.0) {
            return fail("stereo baseline must be positive".to_string());
        }

        self.sonar
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;

        for (what, scatter) in [("landmarks", &self.landmarks), ("sonar_targets", &self.sonar_targets)]
        {
            if scatter.count > 0 {
                for k in 0..3 {
                    if scatter.region_min[k] >= scatter.region_max[k] {
                        return fail(format!(
                            "{what}: region_min must be componentwise below region_max"
                        ));
                    }
                }
            }
        }

        let duration = self.duration();
        let mut prev_end = f64::NEG_INFINITY;
        for &(start, end) in &self.degradation_windows {
            if start >= end {
                return fail(format!("degradation window [{start}, {end}) is empty"));
            }
            if start < 0.0 || end > duration + 1e-9 {
                return fail(format!(
                    "degradation window [{start}, {end}) leaves the scenario span [0, {duration}]"
                ));
            }
            if start < prev_end {
                return fail("degradation windows must be sorted and disjoint".to_string());
            }
            prev_end = end;
        }

        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return fail(format!(
                "outlier_fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            ));
        }
        Ok(())
    }
}
