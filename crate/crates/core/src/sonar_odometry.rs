//! Planar registration between two sonar fan images.
//!
//! Successive fan images of the same seafloor targets differ, under the
//! zero-elevation assumption, by a 2D rigid transform. Given point
//! correspondences between a keyframe image and the current image, this
//! module recovers that transform with a closed-form least-squares fit
//! wrapped in RANSAC, and decides when the keyframe has gone stale.
//!
//! Conventions: a correspondence pair is `(keyframe point, current point)`
//! and the fitted transform maps current-frame coordinates into the keyframe,
//! `p_k = R(yaw) * p_i + t`. That is the relative motion the estimator and
//! the pose prior consume directly.
//!
//! The closed form: with demeaned points `qk = pk - mean(pk)`,
//! `qi = pi - mean(pi)`, the optimal yaw maximizes
//! `sum qk . R(yaw) qi = A cos(yaw) + B sin(yaw)` with
//! `A = sum qk . qi` and `B = sum (qk.y qi.x - qk.x qi.y)`, so
//! `yaw = atan2(B, A)` and `t = mean(pk) - R(yaw) mean(pi)`.

use crate::geometry::{quat_exp, Pose};
use crate::sonar::SonarPoint;
use nalgebra::{Matrix2, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Points closer than this are treated as coincident when checking for
/// degenerate fits.
const COINCIDENCE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SonarOdometryError {
    #[error("need at least 2 correspondence pairs, got {got}")]
    NotEnoughPairs { got: usize },
    #[error("correspondence points are coincident; rotation is unobservable")]
    DegenerateConfiguration,
}

/// All detections of one sonar ping, keyed by persistent target id.
#[derive(Clone, Debug, PartialEq)]
pub struct SonarFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub detections: Vec<(u64, SonarPoint)>,
}

/// Matched detections between a sonar keyframe and the current sonar frame.
/// Pairs are `(keyframe point, current point)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SonarCorrespondenceSet {
    pub keyframe_id: u64,
    pub frame_id: u64,
    pub keyframe_timestamp: f64,
    pub timestamp: f64,
    pub pairs: Vec<(SonarPoint, SonarPoint)>,
}

/// 2D rigid transform `p -> R(yaw) p + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarTransform {
    pub yaw: f64,
    pub translation: Vector2<f64>,
}

impl PlanarTransform {
    pub fn identity() -> Self {
        PlanarTransform {
            yaw: 0.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix2<f64> {
        let (s, c) = self.yaw.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn compose(&self, other: &PlanarTransform) -> PlanarTransform {
        PlanarTransform {
            yaw: self.yaw + other.yaw,
            translation: self.rotation_matrix() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PlanarTransform {
        let rt = self.rotation_matrix().transpose();
        PlanarTransform {
            yaw: -self.yaw,
            translation: -(rt * self.translation),
        }
    }

    /// Embeds into SE(3): yaw about +z, translation in the z = 0 plane.
    pub fn to_pose(&self) -> Pose {
        Pose::new(
            quat_exp(&Vector3::new(0.0, 0.0, self.yaw)),
            Vector3::new(self.translation.x, self.translation.y, 0.0),
        )
    }
}

/// Output of [`estimate_planar_pose`]. `valid` is the single gate downstream
/// consumers check; an invalid estimate still reports the numbers that made
/// it invalid.
#[derive(Clone, Debug)]
pub struct PlanarPoseEstimate {
    pub transform: PlanarTransform,
    /// SE(3) embedding of `transform`.
    pub pose: Pose,
    /// Indices into the correspondence pairs that survived RANSAC.
    pub inliers: Vec<usize>,
    /// RMS registration residual over the inliers, metres.
    pub inlier_rms: f64,
    pub valid: bool,
}

/// Tuning for RANSAC and the validity gates. Thresholds scale with the sonar
/// range resolution; see [`SonarOdometryConfig::for_range_resolution`].
#[derive(Clone, Copy, Debug)]
pub struct SonarOdometryConfig {
    /// Inlier residual threshold, metres.
    pub ransac_threshold: f64,
    pub ransac_max_iters: usize,
    /// Fewer surviving inliers than this marks the estimate invalid.
    pub min_inliers: usize,
    /// Larger inlier RMS than this marks the estimate invalid.
    pub rms_max: f64,
    /// Seed for the RANSAC sampler; fixed seed, fixed output.
    pub seed: u64,
}

impl SonarOdometryConfig {
    /// Defaults: inlier threshold and RMS gate at twice the range
    /// resolution (one bin of quantization either side), 200 iterations,
    /// 6 inliers minimum.
    pub fn for_range_resolution(range_resolution: f64, seed: u64) -> Self {
        SonarOdometryConfig {
            ransac_threshold: 2.0 * range_resolution,
            ransac_max_iters: 200,
            min_inliers: 6,
            rms_max: 2.0 * range_resolution,
            seed,
        }
    }
}

/// When to retire the sonar keyframe and promote the current frame.
#[derive(Clone, Copy, Debug)]
pub struct KeyframePolicy {
    /// Promote when inliers drop below this fraction of the pair count.
    pub min_inlier_ratio: f64,
    /// Promote when the registered yaw exceeds this, radians.
    pub max_yaw: f64,
    /// Promote when the registered translation exceeds this, metres.
    pub max_translation: f64,
}

impl KeyframePolicy {
    /// Defaults: 40% inlier ratio, 10 degrees of yaw, a quarter of the
    /// maximum range in translation.
    pub fn for_max_range(r_max: f64) -> Self {
        KeyframePolicy {
            min_inlier_ratio: 0.4,
            max_yaw: 10.0_f64.to_radians(),
            max_translation: 0.25 * r_max,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyframeDecision {
    Keep,
    Promote,
}

/// Applies [`KeyframePolicy`] to a registration result. An invalid estimate
/// always promotes: the overlap with the keyframe is already gone.
pub fn keyframe_decision(
    estimate: &PlanarPoseEstimate,
    pair_count: usize,
    policy: &KeyframePolicy,
) -> KeyframeDecision {
    if !estimate.valid
        || (estimate.inliers.len() as f64) < policy.min_inlier_ratio * pair_count as f64
        || estimate.transform.yaw.abs() > policy.max_yaw
        || estimate.transform.translation.norm() > policy.max_translation
    {
        KeyframeDecision::Promote
    } else {
        KeyframeDecision::Keep
    }
}

/// Closed-form least-squares 2D rigid fit on `(keyframe, current)` point
/// pairs. Needs two pairs minimum; fails when either side's points are
/// mutually coincident, which leaves the rotation unobservable.
pub fn fit_planar_transform(
    pairs: &[(Vector2<f64>, Vector2<f64>)],
) -> Result<PlanarTransform, SonarOdometryError> {
    if pairs.len() < 2 {
        return Err(SonarOdometryError::NotEnoughPairs { got: pairs.len() });
    }
    let n = pairs.len() as f64;
    let mut ck = Vector2::zeros();
    let mut ci = Vector2::zeros();
    for (pk, pi) in pairs {
        ck += pk;
        ci += pi;
    }
    ck /= n;
    ci /= n;

    let mut a = 0.0;
    let mut b = 0.0;
    let mut spread_k: f64 = 0.0;
    let mut spread_i: f64 = 0.0;
    for (pk, pi) in pairs {
        let qk = pk - ck;
        let qi = pi - ci;
        a += qk.dot(&qi);
        b += qk.y * qi.x - qk.x * qi.y;
        spread_k = spread_k.max(qk.norm());
        spread_i = spread_i.max(qi.norm());
    }
    if spread_k < COINCIDENCE_EPS || spread_i < COINCIDENCE_EPS {
        return Err(SonarOdometryError::DegenerateConfiguration);
    }

    let yaw = b.atan2(a);
    let (s, c) = yaw.sin_cos();
    let rot = Matrix2::new(c, -s, s, c);
    Ok(PlanarTransform {
        yaw,
        translation: ck - rot * ci,
    })
}

/// RANSAC over `(keyframe, current)` pairs with two-pair minimal samples.
/// Returns the indices of the largest consensus set, refined by one refit
/// over that set. Fixed `seed`, fixed output. Exits early once every pair is
/// an inlier.
pub fn ransac_filter(
    pairs: &[(Vector2<f64>, Vector2<f64>)],
    threshold: f64,
    max_iters: usize,
    seed: u64,
) -> Result<Vec<usize>, SonarOdometryError> {
    if pairs.len() < 2 {
        return Err(SonarOdometryError::NotEnoughPairs { got: pairs.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..max_iters {
        let i = rng.random_range(0..pairs.len());
        let j = rng.random_range(0..pairs.len());
        if i == j {
            continue;
        }
        let sample = [pairs[i], pairs[j]];
        let Ok(model) = fit_planar_transform(&sample) else {
            continue;
        };
        let inliers = score_inliers(pairs, &model, threshold);
        if inliers.len() > best.len() {
            best = inliers;
            if best.len() == pairs.len() {
                break;
            }
        }
    }
    if best.len() >= 2 {
        // One consensus refinement: refit on the best set, rescore once.
        let subset: Vec<_> = best.iter().map(|&k| pairs[k]).collect();
        if let Ok(model) = fit_planar_transform(&subset) {
            let rescored = score_inliers(pairs, &model, threshold);
            if rescored.len() >= best.len() {
                best = rescored;
            }
        }
    }
    Ok(best)
}

fn score_inliers(
    pairs: &[(Vector2<f64>, Vector2<f64>)],
    model: &PlanarTransform,
    threshold: f64,
) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, (pk, pi))| (model.apply(pi) - pk).norm() <= threshold)
        .map(|(k, _)| k)
        .collect()
}

/// Full registration: RANSAC, refit on inliers, validity gates.
///
/// Structural failures (fewer than two pairs, coincident points) are errors;
/// quality failures (too few inliers, RMS above the gate) return an estimate
/// with `valid == false` so the caller can still inspect it.
pub fn estimate_planar_pose(
    set: &SonarCorrespondenceSet,
    cfg: &SonarOdometryConfig,
) -> Result<PlanarPoseEstimate, SonarOdometryError> {
    let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = set
        .pairs
        .iter()
        .map(|(pk, pi)| (pk.planar_xy(), pi.planar_xy()))
        .collect();
    let inliers = ransac_filter(
        &pairs,
        cfg.ransac_threshold,
        cfg.ransac_max_iters,
        cfg.seed,
    )?;

    let (transform, inlier_rms) = if inliers.len() >= 2 {
        let subset: Vec<_> = inliers.iter().map(|&k| pairs[k]).collect();
        let transform = fit_planar_transform(&subset)?;
        let sq_sum: f64 = subset
            .iter()
            .map(|(pk, pi)| (transform.apply(pi) - pk).norm_squared())
            .sum();
        (transform, (sq_sum / subset.len() as f64).sqrt())
    } else {
        (PlanarTransform::identity(), f64::INFINITY)
    };

    let valid = inliers.len() >= cfg.min_inliers && inlier_rms <= cfg.rms_max;
    Ok(PlanarPoseEstimate {
        transform,
        pose: transform.to_pose(),
        inliers,
        inlier_rms,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sonar::SonarIntrinsics;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn test_intrinsics() -> SonarIntrinsics {
        SonarIntrinsics {
            theta_min: -PI / 4.0,
            theta_max: PI / 4.0,
            phi_min: -0.1,
            phi_max: 0.1,
            r_max: 10.0,
            image_width: 512,
            image_height: 1000,
        }
    }

    fn test_config(seed: u64) -> SonarOdometryConfig {
        SonarOdometryConfig::for_range_resolution(test_intrinsics().range_resolution(), seed)
    }

    fn random_points(rng: &mut StdRng, n: usize) -> Vec<Vector2<f64>> {
        (0..n)
            .map(|_| Vector2::new(rng.random_range(1.0..8.0), rng.random_range(-3.0..3.0)))
            .collect()
    }

    fn make_set(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> SonarCorrespondenceSet {
        let intr = test_intrinsics();
        SonarCorrespondenceSet {
            keyframe_id: 0,
            frame_id: 1,
            keyframe_timestamp: 0.0,
            timestamp: 0.5,
            pairs: pairs
                .iter()
                .map(|(pk, pi)| {
                    (
                        SonarPoint::from_polar(&intr, pk.norm(), pk.y.atan2(pk.x)),
                        SonarPoint::from_polar(&intr, pi.norm(), pi.y.atan2(pi.x)),
                    )
                })
                .collect(),
        }
    }

    /// Builds (keyframe, current) pairs from keyframe points and the
    /// keyframe-from-current transform.
    fn pairs_from_transform(
        points_k: &[Vector2<f64>],
        t_k_from_i: &PlanarTransform,
    ) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let inv = t_k_from_i.inverse();
        points_k.iter().map(|pk| (*pk, inv.apply(pk))).collect()
    }

    #[test]
    fn identity_registration_on_identical_points() {
        let mut rng = StdRng::seed_from_u64(21);
        let pts = random_points(&mut rng, 20);
        let pairs: Vec<_> = pts.iter().map(|p| (*p, *p)).collect();
        let est = estimate_planar_pose(&make_set(&pairs), &test_config(1)).unwrap();
        assert!(est.valid);
        assert_eq!(est.inliers.len(), 20);
        assert!(est.transform.yaw.abs() < 1e-12);
        assert!(est.transform.translation.norm() < 1e-12);
        assert!(est.inlier_rms < 1e-12);
    }

    #[test]
    fn recovers_known_transform_exactly() {
        let mut rng = StdRng::seed_from_u64(22);
        let truth = PlanarTransform {
            yaw: 30.0_f64.to_radians(),
            translation: Vector2::new(0.5, -0.2),
        };
        let pts = random_points(&mut rng, 20);
        let pairs = pairs_from_transform(&pts, &truth);
        let est = estimate_planar_pose(&make_set(&pairs), &test_config(2)).unwrap();
        assert!(est.valid);
        assert!((est.transform.yaw - truth.yaw).abs() < 1e-9);
        assert!((est.transform.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn rejects_outliers_and_identifies_them_exactly() {
        let mut rng = StdRng::seed_from_u64(23);
        let truth = PlanarTransform {
            yaw: -0.15,
            translation: Vector2::new(0.3, 0.4),
        };
        let pts = random_points(&mut rng, 20);
        let mut pairs = pairs_from_transform(&pts, &truth);
        // Eight gross outliers appended after twenty clean pairs.
        for _ in 0..8 {
            pairs.push((
                Vector2::new(rng.random_range(1.0..8.0), rng.random_range(-3.0..3.0)),
                Vector2::new(rng.random_range(1.0..8.0), rng.random_range(-3.0..3.0)),
            ));
        }
        let est = estimate_planar_pose(&make_set(&pairs), &test_config(3)).unwrap();
        assert!(est.valid);
        assert_eq!(est.inliers, (0..20).collect::<Vec<_>>());
        assert!((est.transform.yaw - truth.yaw).abs() < 1e-6);
        assert!((est.transform.translation - truth.translation).norm() < 1e-6);
    }

    #[test]
    fn ransac_returns_all_indices_when_everything_fits() {
        let mut rng = StdRng::seed_from_u64(24);
        let truth = PlanarTransform {
            yaw: 0.1,
            translation: Vector2::new(-0.1, 0.2),
        };
        let pts = random_points(&mut rng, 15);
        let pairs = pairs_from_transform(&pts, &truth);
        let inliers = ransac_filter(&pairs, 0.02, 200, 5).unwrap();
        assert_eq!(inliers, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn ransac_matches_exhaustive_search_on_small_sets() {
        // With ten pairs every 2-subset can be tried, giving the reference
        // answer RANSAC must reproduce.
        let mut rng = StdRng::seed_from_u64(25);
        let truth = PlanarTransform {
            yaw: 0.25,
            translation: Vector2::new(0.6, -0.3),
        };
        let pts = random_points(&mut rng, 6);
        let mut pairs = pairs_from_transform(&pts, &truth);
        for _ in 0..4 {
            pairs.push((
                Vector2::new(rng.random_range(1.0..8.0), rng.random_range(-3.0..3.0)),
                Vector2::new(rng.random_range(1.0..8.0), rng.random_range(-3.0..3.0)),
            ));
        }
        let threshold = 0.02;

        let mut exhaustive_best: Vec<usize> = Vec::new();
        for i in 0..pairs.len() {
            for j in (i + 1)..pairs.len() {
                if let Ok(model) = fit_planar_transform(&[pairs[i], pairs[j]]) {
                    let inliers = score_inliers(&pairs, &model, threshold);
                    if inliers.len() > exhaustive_best.len() {
                        exhaustive_best = inliers;
                    }
                }
            }
        }

        let ransac = ransac_filter(&pairs, threshold, 500, 6).unwrap();
        assert_eq!(ransac, exhaustive_best);
    }

    #[test]
    fn two_pairs_fit_exactly() {
        let pairs = vec![
            (Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)),
            (Vector2::new(2.0, 0.0), Vector2::new(0.0, 2.0)),
        ];
        let t = fit_planar_transform(&pairs).unwrap();
        for (pk, pi) in &pairs {
            assert!((t.apply(pi) - pk).norm() < 1e-12);
        }
        let inliers = ransac_filter(&pairs, 1e-9, 50, 7).unwrap();
        assert_eq!(inliers, vec![0, 1]);
    }

    #[test]
    fn structural_failures_are_errors() {
        assert!(matches!(
            fit_planar_transform(&[]),
            Err(SonarOdometryError::NotEnoughPairs { got: 0 })
        ));
        assert!(matches!(
            fit_planar_transform(&[(Vector2::new(1.0, 1.0), Vector2::new(1.0, 1.0))]),
            Err(SonarOdometryError::NotEnoughPairs { got: 1 })
        ));
        // All keyframe points coincident: rotation unobservable.
        let p = Vector2::new(2.0, 1.0);
        let pairs = vec![
            (p, Vector2::new(1.0, 0.0)),
            (p, Vector2::new(0.0, 1.0)),
            (p, Vector2::new(1.0, 1.0)),
        ];
        assert!(matches!(
            fit_planar_transform(&pairs),
            Err(SonarOdometryError::DegenerateConfiguration)
        ));
    }

    #[test]
    fn too_few_inliers_marks_estimate_invalid() {
        let mut rng = StdRng::seed_from_u64(26);
        // Three consistent pairs, min_inliers is six.
        let truth = PlanarTransform {
            yaw: 0.05,
            translation: Vector2::new(0.1, 0.0),
        };
        let pts = random_points(&mut rng, 3);
        let pairs = pairs_from_transform(&pts, &truth);
        let est = estimate_planar_pose(&make_set(&pairs), &test_config(8)).unwrap();
        assert!(!est.valid);
        assert_eq!(est.inliers.len(), 3);
    }

    #[test]
    fn large_residuals_mark_estimate_invalid() {
        let mut rng = StdRng::seed_from_u64(27);
        let pts = random_points(&mut rng, 12);
        // Identity motion with noise forced above the RMS gate but inside a
        // loosened inlier threshold.
        let pairs: Vec<_> = pts
            .iter()
            .map(|p| {
                (
                    *p,
                    p + Vector2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
                )
            })
            .collect();
        let mut cfg = test_config(9);
        cfg.ransac_threshold = 1.0;
        let est = estimate_planar_pose(&make_set(&pairs), &cfg).unwrap();
        assert!(est.inliers.len() >= cfg.min_inliers);
        assert!(est.inlier_rms > cfg.rms_max);
        assert!(!est.valid);
    }

    #[test]
    fn registration_is_conjugation_equivariant() {
        // Re-expressing both point sets in a moved frame C conjugates the
        // recovered transform: T' = C T C^-1.
        let mut rng = StdRng::seed_from_u64(28);
        for _ in 0..20 {
            let truth = PlanarTransform {
                yaw: rng.random_range(-0.5..0.5),
                translation: Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            };
            let c = PlanarTransform {
                yaw: rng.random_range(-PI..PI),
                translation: Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            };
            let pts = random_points(&mut rng, 10);
            let pairs = pairs_from_transform(&pts, &truth);
            let moved: Vec<_> = pairs
                .iter()
                .map(|(pk, pi)| (c.apply(pk), c.apply(pi)))
                .collect();
            let fitted = fit_planar_transform(&moved).unwrap();
            let expected = c.compose(&truth).compose(&c.inverse());
            assert!((fitted.yaw - expected.yaw).abs() < 1e-9);
            assert!((fitted.translation - expected.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn swapping_sides_inverts_the_fit() {
        let mut rng = StdRng::seed_from_u64(29);
        let truth = PlanarTransform {
            yaw: 0.3,
            translation: Vector2::new(0.4, -0.6),
        };
        let pts = random_points(&mut rng, 10);
        let pairs = pairs_from_transform(&pts, &truth);
        let swapped: Vec<_> = pairs.iter().map(|(pk, pi)| (*pi, *pk)).collect();
        let forward = fit_planar_transform(&pairs).unwrap();
        let backward = fit_planar_transform(&swapped).unwrap();
        let inv = forward.inverse();
        assert!((backward.yaw - inv.yaw).abs() < 1e-8);
        assert!((backward.translation - inv.translation).norm() < 1e-8);
    }

    #[test]
    fn pose_embedding_is_planar() {
        let t = PlanarTransform {
            yaw: 0.7,
            translation: Vector2::new(1.0, -2.0),
        };
        let pose = t.to_pose();
        assert_eq!(pose.translation.z, 0.0);
        // Yaw-only rotation: no x or y quaternion components.
        assert!(pose.rotation.i.abs() < 1e-15);
        assert!(pose.rotation.j.abs() < 1e-15);
        let spun = pose.transform_point(&Vector3::new(1.0, 0.5, 0.3));
        let planar = t.apply(&Vector2::new(1.0, 0.5));
        assert!((spun - Vector3::new(planar.x, planar.y, 0.3)).norm() < 1e-12);
    }

    #[test]
    fn keyframe_policy_cases() {
        let policy = KeyframePolicy::for_max_range(10.0);
        let base = PlanarPoseEstimate {
            transform: PlanarTransform {
                yaw: 0.05,
                translation: Vector2::new(0.5, 0.0),
            },
            pose: Pose::identity(),
            inliers: (0..12).collect(),
            inlier_rms: 0.001,
            valid: true,
        };
        assert_eq!(keyframe_decision(&base, 20, &policy), KeyframeDecision::Keep);

        // Inlier ratio 12/40 < 0.4.
        assert_eq!(
            keyframe_decision(&base, 40, &policy),
            KeyframeDecision::Promote
        );

        let mut yawed = base.clone();
        yawed.transform.yaw = 11.0_f64.to_radians();
        assert_eq!(
            keyframe_decision(&yawed, 20, &policy),
            KeyframeDecision::Promote
        );

        let mut far = base.clone();
        far.transform.translation = Vector2::new(2.6, 0.0);
        assert_eq!(
            keyframe_decision(&far, 20, &policy),
            KeyframeDecision::Promote
        );

        let mut invalid = base.clone();
        invalid.valid = false;
        assert_eq!(
            keyframe_decision(&invalid, 20, &policy),
            KeyframeDecision::Promote
        );
    }
}
