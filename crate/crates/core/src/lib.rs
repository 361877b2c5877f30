//! Sensor fusion for vehicles that cannot count on their cameras.
//!
//! `murk` estimates the trajectory of an underwater robot from three
//! complementary sensors: a stereo camera pair, a forward-looking imaging
//! sonar, and an IMU. Camera reprojection residuals carry the estimate while
//! visibility is good; when turbidity or darkness starves the feature
//! tracker, planar sonar odometry takes over both as a pose prior and as an
//! up-weighted residual block, with IMU pre-integration bridging every frame
//! gap. All residuals are fused in a sliding-window nonlinear least-squares
//! estimator.
//!
//! The crate also ships a deterministic synthetic scenario generator and
//! trajectory evaluation tools, so the degradation behaviour can be
//! reproduced end to end on a desk: see the `examples/` directory for one
//! runnable program per capability, or the thin `murk` binary (`run` /
//! `compare` subcommands) for batch experiments.
//!
//! Module map:
//!
//! - [`geometry`]: SE(3) poses, quaternion exp/log, perturbations.
//! - [`sonar`]: imaging-sonar intrinsics, pixel/polar/planar conversions.
//! - [`sonar_odometry`]: RANSAC planar registration between sonar frames.
//! - [`imu`]: pre-integration, state propagation, the 15-dim IMU residual.
//! - [`factors`]: camera and sonar residuals with analytic Jacobians.
//! - [`estimator`]: sliding-window Levenberg-Marquardt fusion.
//! - [`sim`]: deterministic synthetic scenario generation.
//! - [`eval`]: ATE / interval / relative-pose trajectory metrics.
//! - [`cli`]: the `run` / `compare` pipeline and its file formats.

pub mod cli;
pub mod estimator;
pub mod eval;
pub mod factors;
pub mod geometry;
pub mod imu;
pub mod sim;
pub mod sonar;
pub mod sonar_odometry;
