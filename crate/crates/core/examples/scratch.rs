use std::collections::BTreeMap;

use murk::estimator::{Estimator, EstimatorConfig, EstimatorMode, FrameInput, SonarWindowFactors};
use murk::factors::{sonar_information, sonar_residual};
use murk::geometry::Pose;
use murk::sim::{correspondence_provider, generate, provider_seed, Scenario};
use nalgebra::{DMatrix, DVector, Vector3};

struct Snapshot {
    window: Vec<(u64, Pose)>,
    bundles: Vec<SonarWindowFactors>,
}

fn main() {
    let text = std::fs::read_to_string("scenarios/yaw_only.toml").unwrap();
    let scenario = Scenario::from_toml_str(&text).unwrap();
    let config = EstimatorConfig::for_scenario(&scenario, EstimatorMode::SonarInertial);
    config.validate().unwrap();
    let t_body_from_sonar = config.t_body_from_sonar.clone();

    let sim = generate(&scenario, scenario.seed);
    let mut truth_by_frame: BTreeMap<u64, Pose> = BTreeMap::new();
    let mut truth_vel_by_frame: BTreeMap<u64, nalgebra::Vector3<f64>> = BTreeMap::new();
    let mut estimator = Estimator::new(config).unwrap();
    let mut snapshot: Option<Snapshot> = None;
    let mut z_err: Vec<(f64, f64)> = Vec::new();
    let mut xy_err: Vec<f64> = Vec::new();
    let mut reg_errs: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut prev_err: Option<nalgebra::Vector2<f64>> = None;
    let mut drift = [nalgebra::Vector2::<f64>::zeros(); 3];
    let mut body_drift = [nalgebra::Vector2::<f64>::zeros(); 3];
    let mut drift_count = [0usize; 3];
    let mut rel_incs: Vec<nalgebra::Vector2<f64>> = Vec::new();
    let mut kf_wander: BTreeMap<u64, nalgebra::Vector2<f64>> = BTreeMap::new();
    let mut kf_moves: Vec<f64> = Vec::new();

    for bundle in &sim.bundles {
        truth_by_frame.insert(bundle.frame_id, bundle.truth.pose.clone());
        truth_vel_by_frame.insert(bundle.frame_id, bundle.truth.velocity);
        let sonar_pairs = match (&bundle.sonar, estimator.sonar_keyframe()) {
            (Some(ping), Some(keyframe)) if keyframe.frame_id != ping.frame_id => {
                let pair_seed = provider_seed(scenario.seed, keyframe.frame_id, ping.frame_id);
                let (set, _) = correspondence_provider(
                    ping,
                    keyframe,
                    scenario.outlier_fraction,
                    &scenario.sonar,
                    pair_seed,
                );
                Some(set)
            }
            _ => None,
        };
        // Raw registration quality: compare each ping's estimated relative
        // sonar pose against truth before the estimator touches it.
        if let Some(set) = &sonar_pairs {
            let kf_truth = &truth_by_frame[&set.keyframe_id];
            let t_bs = &t_body_from_sonar;
            let truth_rel = t_bs
                .inverse()
                .compose(&kf_truth.inverse())
                .compose(&bundle.truth.pose)
                .compose(t_bs);
            let est = murk::sonar_odometry::estimate_planar_pose(
                set,
                &murk::sonar_odometry::SonarOdometryConfig::for_range_resolution(
                    scenario.sonar.range_resolution(),
                    provider_seed(scenario.seed, set.keyframe_id, set.frame_id) ^ 0x5eed,
                ),
            );
            if let Ok(est) = est {
                if est.valid {
                    let err = truth_rel.inverse().compose(&est.pose);
                    reg_errs.push((bundle.timestamp, err.translation.x, err.translation.y,
                        truth_rel.translation.xy().norm()));
                }
            }
        }
        let summary = estimator
            .process(FrameInput {
                frame_id: bundle.frame_id,
                timestamp: bundle.timestamp,
                camera: bundle.camera.clone(),
                sonar: bundle.sonar.clone(),
                sonar_pairs,
                imu: bundle.imu.clone(),
            })
            .unwrap();
        if summary.init.is_ready() {
            let e_vec = summary.state.pose.translation.xy() - bundle.truth.pose.translation.xy();
            if let Some(prev) = prev_err {
                let inc = e_vec - prev;
                let ping = summary.sonar.is_some();
                let promoted = summary.sonar.as_ref().map(|s| s.promoted).unwrap_or(false);
                let key = if promoted { 2 } else if ping { 1 } else { 0 };
                drift[key] += inc;
                drift_count[key] += 1;
                // Same increment in the body frame of the true attitude.
                let r_t = bundle.truth.pose.rotation_matrix().transpose();
                let inc3 = r_t * nalgebra::Vector3::new(inc.x, inc.y, 0.0);
                body_drift[key] += inc3.xy();
            }
            prev_err = Some(e_vec);
            let dz = (summary.state.pose.translation.z - bundle.truth.pose.translation.z).abs();
            let dxy = (summary.state.pose.translation.xy() - bundle.truth.pose.translation.xy())
                .norm();
            let dyaw = bundle.truth.pose.rotation_angle_to(&summary.state.pose).to_degrees();
            if (bundle.timestamp * 2.0).fract().abs() < 1e-9 && bundle.frame_id % 8 == 0 {
                let inl = summary
                    .sonar
                    .as_ref()
                    .map(|s| format!("{:?}", s))
                    .unwrap_or_default();
                println!(
                    "t={:6.2} xy {:.3} z {:.3} ang {:.2} it {:?} {}",
                    bundle.timestamp,
                    dxy,
                    dz,
                    dyaw,
                    summary.solve.as_ref().map(|r| r.iterations),
                    inl
                );
            }
            z_err.push((bundle.timestamp, dz));
            xy_err.push(dxy);
        }

        if bundle.timestamp >= 33.5 && bundle.timestamp <= 35.5 {
            let errs: Vec<String> = estimator
                .window_states()
                .iter()
                .map(|(id, st)| {
                    let tr = &truth_by_frame[id];
                    let e = st.pose.translation.xy() - tr.translation.xy();
                    format!("{id}:({:.3},{:.3})", e.x, e.y)
                })
                .collect();
            let vels: Vec<String> = estimator
                .window_states()
                .iter()
                .map(|(id, st)| {
                    let vt = &truth_vel_by_frame[id];
                    let dv = st.velocity - vt;
                    format!("{id}:({:.3},{:.3},{:.3})", dv.x, dv.y, dv.z)
                })
                .collect();
            println!(
                "t={:5.2} anchors {:?} kf {:?} it {:?} window {}",
                bundle.timestamp,
                estimator.anchored_frames(),
                summary.sonar.as_ref().map(|s| s.keyframe_id),
                summary.solve.as_ref().map(|r| r.iterations),
                errs.join(" ")
            );
            println!("        vel err {}", vels.join(" "));
        }
        // Accumulate the ping-vs-keyframe error increment in the keyframe's
        // true body frame, and track the keyframe estimate's own wander.
        if let Some(st) = &summary.sonar {
            if st.valid && summary.init.is_ready() {
                let kf_id = st.keyframe_id;
                let kf_est = estimator
                    .window_states()
                    .iter()
                    .find(|(id, _)| *id == kf_id)
                    .map(|(_, s)| s.pose.clone());
                if let Some(kf_est) = kf_est {
                    let kf_truth = &truth_by_frame[&kf_id];
                    let e_kf = kf_est.translation.xy() - kf_truth.translation.xy();
                    let e_now = summary.state.pose.translation.xy()
                        - bundle.truth.pose.translation.xy();
                    let d = e_now - e_kf;
                    let r_t = kf_truth.rotation_matrix().transpose();
                    let d_body = (r_t * nalgebra::Vector3::new(d.x, d.y, 0.0)).xy();
                    rel_incs.push(d_body);
                    if let Some(prev) = kf_wander.get(&kf_id) {
                        kf_moves.push((e_kf - prev).norm());
                    }
                    kf_wander.insert(kf_id, e_kf);
                    if st.promoted {
                        println!(
                            "promo t={:6.2} kf {} e_kf ({:7.4},{:7.4}) -> ping {} e ({:7.4},{:7.4})",
                            bundle.timestamp, kf_id, e_kf.x, e_kf.y,
                            bundle.frame_id, e_now.x, e_now.y
                        );
                    }
                }
            }
        }

        // Snapshot a window whose sonar keyframe is the gauge (oldest) frame
        // and whose factors all reference in-window keyframes.
        if snapshot.is_none() && bundle.timestamp > 20.0 {
            let window = estimator.window_states();
            let bundles = estimator.sonar_factor_terms();
            let ids: Vec<u64> = window.iter().map(|(id, _)| *id).collect();
            let kf_ids: Vec<u64> = bundles.iter().map(|b| b.keyframe_frame_id).collect();
            // The gauge frame must appear as a keyframe in at least one
            // bundle, otherwise x/y/yaw are pure gauge freedoms too.
            let pins_gauge = kf_ids.iter().any(|k| *k <= ids[0]);
            if bundles.len() >= 3 && pins_gauge {
                snapshot = Some(Snapshot {
                    window: window.iter().map(|(id, s)| (*id, s.pose.clone())).collect(),
                    bundles,
                });
                println!(
                    "snapshot at t={} window {:?} kf {:?}",
                    bundle.timestamp, ids, kf_ids
                );
            }
        }
    }

    // Behavioral half: z error grows, xy stays bounded.
    let t_end = z_err.last().unwrap().0;
    let early: Vec<f64> = z_err
        .iter()
        .filter(|(t, _)| *t < z_err[0].0 + 10.0)
        .map(|(_, e)| *e)
        .collect();
    let late: Vec<f64> = z_err
        .iter()
        .filter(|(t, _)| *t > t_end - 10.0)
        .map(|(_, e)| *e)
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let xy_rms = (xy_err.iter().map(|e| e * e).sum::<f64>() / xy_err.len() as f64).sqrt();
    println!(
        "z err: early mean {:.4} late mean {:.4} max {:.4}; xy rms {:.4}",
        mean(&early),
        mean(&late),
        z_err.iter().map(|(_, e)| *e).fold(0.0, f64::max),
        xy_rms
    );

    for (k, name) in ["plain", "ping", "promote"].iter().enumerate() {
        println!(
            "drift[{name}] world ({:.3}, {:.3}) body ({:.3}, {:.3}) over {} frames",
            drift[k].x, drift[k].y, body_drift[k].x, body_drift[k].y, drift_count[k]
        );
    }
    let nr = rel_incs.len() as f64;
    let rel_mean = rel_incs.iter().sum::<nalgebra::Vector2<f64>>() / nr;
    println!(
        "ping-vs-kf increment body mean ({:.4}, {:.4}) over {} pings; kf wander mean {:.4} max {:.4} over {} moves",
        rel_mean.x,
        rel_mean.y,
        rel_incs.len(),
        kf_moves.iter().sum::<f64>() / kf_moves.len() as f64,
        kf_moves.iter().cloned().fold(0.0, f64::max),
        kf_moves.len()
    );
    let n = reg_errs.len() as f64;
    let mx = reg_errs.iter().map(|r| r.1).sum::<f64>() / n;
    let my = reg_errs.iter().map(|r| r.2).sum::<f64>() / n;
    let mt = reg_errs.iter().map(|r| r.3).sum::<f64>() / n;
    let sx = (reg_errs.iter().map(|r| (r.1 - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (reg_errs.iter().map(|r| (r.2 - my).powi(2)).sum::<f64>() / n).sqrt();
    let worst = reg_errs
        .iter()
        .max_by(|a, b| (a.1.hypot(a.2)).total_cmp(&(b.1.hypot(b.2))))
        .unwrap();
    println!(
        "registration err mean ({mx:.4}, {my:.4}) std ({sx:.4}, {sy:.4}) worst t={:.2} ({:.4},{:.4}) over {} pings, mean truth hop {mt:.3}",
        worst.0, worst.1, worst.2,
        reg_errs.len()
    );
    for r in &reg_errs {
        if (r.0 - 34.0).abs() < 0.26 || (r.0 - 34.5).abs() < 0.01 {
            println!("  reg at t={:.2}: err ({:.4},{:.4}) hop {:.3}", r.0, r.1, r.2, r.3);
        }
    }

    // Structural half: sonar-only gauge-fixed normal equations at the truth
    // linearization of the snapshot window.
    let snap = snapshot.expect("no usable window snapshot found");
    let truth: Vec<(u64, Pose)> = snap
        .window
        .iter()
        .map(|(id, _)| (*id, truth_by_frame[id].clone()))
        .collect();
    let col_of: BTreeMap<u64, usize> = truth
        .iter()
        .skip(1)
        .enumerate()
        .map(|(i, (id, _))| (*id, 6 * i))
        .collect();
    let dim = 6 * (truth.len() - 1);
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for bundle in &snap.bundles {
        let pose_k = &truth_by_frame[&bundle.keyframe_frame_id];
        let pose_i = &truth_by_frame[&bundle.frame_id];
        for obs in &bundle.observations {
            let eval = sonar_residual(pose_k, pose_i, obs, &t_body_from_sonar);
            let info = sonar_information(obs, 0.0) * bundle.weight;
            let mut j = DMatrix::<f64>::zeros(3, dim);
            if let Some(&c) = col_of.get(&bundle.keyframe_frame_id) {
                j.view_mut((0, c), (3, 6)).copy_from(&eval.j_pose_k);
            }
            if let Some(&c) = col_of.get(&bundle.frame_id) {
                j.view_mut((0, c), (3, 6)).copy_from(&eval.j_pose_i);
            }
            h += j.transpose() * info * j;
        }
    }
    let svd = h.clone().svd(false, false);
    let sigma_max = svd.singular_values.max();
    let near_null = svd
        .singular_values
        .iter()
        .filter(|s| **s <= 1e-8 * sigma_max)
        .count();
    println!("H dim {dim} sigma_max {sigma_max:.3e} near-null count {near_null}");

    // Global generators: attitude columns use body-frame right perturbation.
    let gen = |axis: Option<Vector3<f64>>, trans: Option<Vector3<f64>>| -> DVector<f64> {
        let mut v = DVector::<f64>::zeros(dim);
        for (id, pose) in truth.iter().skip(1) {
            let c = col_of[id];
            if let Some(a) = axis {
                let r_t = pose.rotation_matrix().transpose();
                v.rows_mut(c, 3).copy_from(&(r_t * a));
                v.rows_mut(c + 3, 3).copy_from(&a.cross(&pose.translation));
            }
            if let Some(t) = trans {
                v.rows_mut(c + 3, 3).copy_from(&t);
            }
        }
        v
    };
    let quotient = |v: &DVector<f64>| (&h * v).norm() / (sigma_max * v.norm());
    let cases = [
        ("z-trans", gen(None, Some(Vector3::z()))),
        ("roll", gen(Some(Vector3::x()), None)),
        ("pitch", gen(Some(Vector3::y()), None)),
        ("x-trans", gen(None, Some(Vector3::x()))),
        ("y-trans", gen(None, Some(Vector3::y()))),
        ("yaw", gen(Some(Vector3::z()), None)),
    ];
    for (name, v) in &cases {
        println!("  {name}: |Hv|/(smax|v|) = {:.3e}", quotient(v));
    }
}
