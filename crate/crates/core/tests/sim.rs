mod common;

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use common::*;
use mmslam::eval::measurement_checksum;
use mmslam::metrics::{add_error, adds_error, best_hypothesis, Metric, ObjectModel};
use mmslam::pose::{relative_object_pose, tangent_distance, Pose3, UnitQuaternion};
use mmslam::sim::*;
use nalgebra::Vector3;

fn quiet(config: SimConfig) -> SimConfig {
    SimConfig {
        meas_sigma_rot: 0.0,
        meas_sigma_trans: 0.0,
        odom_sigma_rot: 0.0,
        odom_sigma_trans: 0.0,
        ..config
    }
}

fn cuboid() -> ObjectModel {
    let mut pts = Vec::new();
    for x in [-0.1, 0.1] {
        for y in [-0.05, 0.05] {
            for z in [-0.02, 0.02] {
                pts.push(Vector3::new(x, y, z));
            }
        }
    }
    ObjectModel::new(0, "cuboid", pts).unwrap()
}

fn square() -> ObjectModel {
    let h = 0.05;
    let pts = vec![
        Vector3::new(h, h, 0.0),
        Vector3::new(-h, h, 0.0),
        Vector3::new(-h, -h, 0.0),
        Vector3::new(h, -h, 0.0),
        Vector3::new(h, h, 0.1),
        Vector3::new(-h, h, 0.1),
        Vector3::new(-h, -h, 0.1),
        Vector3::new(h, -h, 0.1),
    ];
    ObjectModel::new(0, "square_prism", pts).unwrap()
}

#[test]
fn default_world_has_symmetric_objects() {
    let world = generate_world(&SimConfig::default()).unwrap();
    assert_eq!(world.len(), 5);
    let symmetric = world.iter().filter(|o| o.symmetry != SymmetryDescriptor::None).count();
    assert!(symmetric >= 2);
    assert_eq!(world, generate_world(&SimConfig::default()).unwrap());
}

#[test]
fn inner_circle_closes_on_itself() {
    let cfg = SimConfig::default();
    let traj = generate_trajectory(&cfg).unwrap();
    let (n_in, n_tr, _) = trajectory_split(&cfg);
    // bearings advance by TAU / n_in, so the last inner pose sits one step before the first
    let step = TAU / n_in as f64;
    let gap = (traj[n_in - 1].translation - traj[0].translation).norm();
    let chord = 2.0 * cfg.inner_radius * (step / 2.0).sin();
    assert!((gap - chord).abs() < 1e-9);
    assert!(gap <= cfg.step_cap);
    assert!(tangent_distance(&traj[n_in - 1], &traj[0]) < cfg.step_cap + cfg.turn_cap);
    for p in &traj[..n_in] {
        assert!((p.translation.xy().norm() - cfg.inner_radius).abs() < 1e-12);
    }
    for p in &traj[n_in + n_tr..] {
        assert!((p.translation.xy().norm() - cfg.outer_radius).abs() < 1e-12);
    }
}

#[test]
fn odometry_noise_has_the_configured_spread() {
    let cfg = SimConfig {
        odom_sigma_trans: 0.01,
        odom_sigma_rot: 0.01,
        ..SimConfig::default()
    };
    let traj: Vec<Pose3> = (0..1001)
        .map(|k| Pose3::from_translation(Vector3::new(0.1 * k as f64, 0.0, 0.0)))
        .collect();
    let odo = simulate_odometry(&traj, &cfg, &mut seeded_rng(41)).unwrap();
    assert_eq!(odo.len(), 1000);
    let eps: Vec<_> = odo
        .iter()
        .zip(traj.windows(2))
        .map(|(f, w)| f.measurement.compose(&w[0].between(&w[1]).inverse()).log().translation())
        .collect();
    for axis in 0..3 {
        let xs: Vec<f64> = eps.iter().map(|e| e[axis]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((sd - 0.01).abs() < 0.001, "axis {axis}: {sd}");
    }
    let again = simulate_odometry(&traj, &cfg, &mut seeded_rng(41)).unwrap();
    assert_eq!(odo, again);
}

#[test]
fn mirror_pair_members_score_alike() {
    let cfg = quiet(SimConfig {
        n_hypotheses: 2,
        p_cov: 1.0,
        p_spur: 0.0,
        ..SimConfig::default()
    });
    let model = cuboid();
    let normal = Vector3::new(1.0, 0.0, 0.0);
    let sym = SymmetryDescriptor::MirrorPair { normal };
    let mut r = rng(42);
    for _ in 0..20 {
        let truth = pose(&mut r, 2.0);
        let set = generate_hypotheses(0, &truth, &sym, &cfg, &mut seeded_rng(r_seed(&mut r))).unwrap();
        let mirrored = truth.compose(&Pose3::from_rotation(UnitQuaternion::from_axis_angle(&normal, PI)));
        let h = set.hypotheses();
        assert_eq!(h.len(), 2);
        let has = |p: &Pose3| h.iter().any(|q| tangent_distance(p, q) < 1e-12);
        assert!(has(&truth) && has(&mirrored));
        let a = adds_error(&h[0], &truth, &model).unwrap();
        let b = adds_error(&h[1], &truth, &model).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(add_error(&mirrored, &truth, &model).unwrap() > 0.01);
    }
}

fn r_seed(r: &mut impl rand::Rng) -> u64 {
    r.gen()
}

#[test]
fn order_four_rotations_enumerate_the_group() {
    let cfg = quiet(SimConfig {
        n_hypotheses: 5,
        p_cov: 1.0,
        p_spur: 0.0,
        ..SimConfig::default()
    });
    let axis = Vector3::z();
    let sym = SymmetryDescriptor::DiscreteRotations { axis, order: 4 };
    let group: Vec<Pose3> = (0..4)
        .map(|k| Pose3::from_rotation(UnitQuaternion::from_axis_angle(&axis, FRAC_PI_2 * k as f64)))
        .collect();
    let model = square();
    let mut r = rng(43);
    for _ in 0..20 {
        let truth = pose(&mut r, 2.0);
        let set = generate_hypotheses(0, &truth, &sym, &cfg, &mut seeded_rng(r_seed(&mut r))).unwrap();
        let mut counts = [0usize; 4];
        for h in set.hypotheses() {
            let k = group
                .iter()
                .position(|g| tangent_distance(&truth.compose(g), h) < 1e-12)
                .expect("every member is a group image of the truth");
            counts[k] += 1;
            assert!(adds_error(h, &truth, &model).unwrap() < 1e-9);
        }
        assert_eq!(counts[0], 1);
        assert!(counts[1..].iter().all(|c| *c >= 1));
        assert_eq!(counts.iter().sum::<usize>(), 5);
        assert_eq!(counts.iter().filter(|c| **c == 2).count(), 1);
    }
}

#[test]
fn every_object_is_seen_often() {
    for seed in 1..=3 {
        let sim = run_simulation(&SimConfig { seed, ..SimConfig::default() }).unwrap();
        let frames = sim.trajectory.len();
        for o in &sim.objects {
            let seen = (0..frames).filter(|k| sim.visible_ids(*k).contains(&o.id)).count();
            assert!(seen * 10 >= frames, "seed {seed} object {}: {seen}/{frames}", o.id);
        }
    }
}

#[test]
fn simulation_is_a_pure_function_of_config() {
    let cfg = SimConfig { seed: 9, ..SimConfig::default() };
    let a = run_simulation(&cfg).unwrap();
    let b = run_simulation(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(measurement_checksum(&a), measurement_checksum(&b));
    let c = run_simulation(&SimConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(measurement_checksum(&a), measurement_checksum(&c));
}

#[test]
fn hypothesis_sets_are_well_formed() {
    let cfg = SimConfig { seed: 4, ..SimConfig::default() };
    let sim = run_simulation(&cfg).unwrap();
    for frame in &sim.observations {
        for obs in frame {
            assert_eq!(obs.hypotheses.len(), cfg.n_hypotheses);
            assert!(obs.hypotheses.weights().iter().all(|w| (*w - 0.2).abs() < 1e-12));
        }
    }
}

#[test]
fn covered_noiseless_sets_contain_the_truth() {
    let cfg = quiet(SimConfig { seed: 5, p_cov: 1.0, ..SimConfig::default() });
    let sim = run_simulation(&cfg).unwrap();
    for (k, frame) in sim.observations.iter().enumerate() {
        for obs in frame {
            let object = sim.object(obs.landmark).unwrap();
            let truth = relative_object_pose(&sim.trajectory[k], &object.pose_in_world);
            let (_, e) = best_hypothesis(&obs.hypotheses, &truth, &object.model, Metric::Add).unwrap();
            assert!(e < 1e-12);
        }
    }
}

#[test]
fn symmetric_copies_of_closed_models_have_zero_adds() {
    let cfg = quiet(SimConfig { seed: 6, p_cov: 1.0, p_spur: 0.0, ..SimConfig::default() });
    let sim = run_simulation(&cfg).unwrap();
    let mut checked = 0;
    for (k, frame) in sim.observations.iter().enumerate() {
        for obs in frame {
            let object = sim.object(obs.landmark).unwrap();
            let symmetry = object.effective_symmetry(&sim.trajectory[k]);
            let closed = symmetry.elements().iter().all(|g| {
                adds_error(&Pose3::from_rotation(*g), &Pose3::identity(), &object.model).unwrap() < 1e-9
            });
            if symmetry == SymmetryDescriptor::None || !closed {
                continue;
            }
            let truth = relative_object_pose(&sim.trajectory[k], &object.pose_in_world);
            for h in obs.hypotheses.hypotheses() {
                assert!(adds_error(h, &truth, &object.model).unwrap() < 1e-9);
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn zero_visibility_range_yields_no_measurements() {
    let sim = run_simulation(&SimConfig { visibility_range: 0.0, ..SimConfig::default() }).unwrap();
    assert!(sim.observations.iter().all(|f| f.is_empty()));
}
