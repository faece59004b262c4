#![allow(dead_code)]

use std::f64::consts::PI;

use mmslam::graph::Information;
use mmslam::pose::{Pose3, Twist, UnitQuaternion};
use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn rotation(rng: &mut impl Rng) -> UnitQuaternion {
    UnitQuaternion::from_axis_angle(&unit_vector(rng), rng.gen_range(0.0..PI))
}

pub fn pose(rng: &mut impl Rng, extent: f64) -> Pose3 {
    Pose3::new(
        rotation(rng),
        Vector3::new(
            rng.gen_range(-extent..extent),
            rng.gen_range(-extent..extent),
            rng.gen_range(-extent..extent),
        ),
    )
}

/// Twist with rotation norm below `max_angle`.
pub fn twist(rng: &mut impl Rng, max_angle: f64, max_trans: f64) -> Twist {
    let rot = unit_vector(rng) * rng.gen_range(0.0..max_angle);
    let trans = unit_vector(rng) * rng.gen_range(0.0..max_trans);
    Twist::new(rot, trans)
}

pub fn information(rng: &mut impl Rng) -> Information {
    let a = Matrix6::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    Information::new(a * a.transpose() + Matrix6::identity() * 0.5).unwrap()
}

pub fn matrix(p: &Pose3) -> Matrix4<f64> {
    let r = rotation_matrix(&p.rotation);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.translation);
    m
}

/// Rotation matrix written out from the quaternion components.
pub fn rotation_matrix(q: &UnitQuaternion) -> Matrix3<f64> {
    let [w, x, y, z] = q.wxyz();
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn assert_matrix_close(a: &Matrix4<f64>, b: &Matrix4<f64>, tol: f64) {
    let d = (a - b).amax();
    assert!(d < tol, "matrices differ by {d}\n{a}\n{b}");
}

/// Largest Frobenius-relative gap between analytic and central-difference
/// Jacobian blocks of `factor` at `values`.
pub fn jacobian_relative_error(
    factor: &mmslam::graph::Factor,
    values: &mmslam::graph::GraphValues,
) -> f64 {
    let analytic = factor.linearize(values).unwrap();
    let numeric = factor.linearize_numeric(values).unwrap();
    assert_eq!(analytic.component, numeric.component);
    analytic
        .blocks
        .iter()
        .zip(&numeric.blocks)
        .map(|((ka, ja), (kn, jn))| {
            assert_eq!(ka, kn);
            (ja - jn).norm() / jn.norm().max(1e-12)
        })
        .fold(0.0, f64::max)
}

/// Measurement whose residual against `predicted` is the twist `xi`.
pub fn measurement_with_residual(predicted: &Pose3, xi: &Twist) -> Pose3 {
    Pose3::exp(xi).compose(predicted)
}

#[derive(Clone, Copy, Debug)]
pub enum FactorKind {
    Prior,
    Odometry,
    Landmark,
    MaxMixture,
}

pub const FACTOR_KINDS: [FactorKind; 4] = [
    FactorKind::Prior,
    FactorKind::Odometry,
    FactorKind::Landmark,
    FactorKind::MaxMixture,
];

/// Random factor of `kind` with random variable values, random information
/// and a residual rotation of at most 2.5 rad.
pub fn random_factor(
    kind: FactorKind,
    r: &mut impl Rng,
) -> (mmslam::graph::Factor, mmslam::graph::GraphValues) {
    use mmslam::graph::*;
    let a = pose(r, 5.0);
    let b = pose(r, 5.0);
    let info = information(r);
    let xi = twist(r, 2.5, 2.0);
    let (x0, x1, l0) = (VariableKey::robot(0), VariableKey::robot(1), VariableKey::landmark(0));
    let mut v = GraphValues::new();
    let f: Factor = match kind {
        FactorKind::Prior => {
            v.insert(x0, a);
            PriorFactor::new(x0, measurement_with_residual(&a, &xi), info).into()
        }
        FactorKind::Odometry => {
            v.insert(x0, a);
            v.insert(x1, b);
            let z = measurement_with_residual(&a.between(&b), &xi);
            OdometryFactor::new(x0, x1, z, info).unwrap().into()
        }
        FactorKind::Landmark => {
            v.insert(x0, a);
            v.insert(l0, b);
            let z = measurement_with_residual(&a.between(&b), &xi);
            LandmarkFactor::new(x0, l0, z, info).unwrap().into()
        }
        FactorKind::MaxMixture => {
            v.insert(x0, a);
            v.insert(l0, b);
            let mut zs: Vec<Pose3> = (0..5).map(|_| pose(r, 3.0)).collect();
            let k = r.gen_range(0..5);
            zs[k] = measurement_with_residual(&a.between(&b), &xi);
            let w: Vec<f64> = (0..5).map(|_| r.gen_range(0.1..1.0)).collect();
            MaxMixtureFactor::with_weights(x0, l0, zs, w, info).unwrap().into()
        }
    };
    (f, v)
}

/// Random landmark SLAM problem built twice: once with Gaussian landmark
/// factors and once with the same measurements as single-component
/// mixtures. Returns (gaussian, mixture, initial values).
pub fn random_slam_graph(
    seed: u64,
) -> (mmslam::graph::FactorGraph, mmslam::graph::FactorGraph, mmslam::graph::GraphValues) {
    use mmslam::graph::*;
    let mut r = rng(seed);
    let poses = r.gen_range(4..12);
    let landmarks = r.gen_range(1..5);
    let noise = |r: &mut ChaCha8Rng| twist(r, 0.05, 0.05);
    let mut truth = vec![pose(&mut r, 1.0)];
    for _ in 1..poses {
        let step = Pose3::exp(&twist(&mut r, 0.3, 1.0));
        truth.push(truth.last().unwrap().compose(&step));
    }
    let marks: Vec<Pose3> = (0..landmarks).map(|_| pose(&mut r, 4.0)).collect();
    let mut gauss = FactorGraph::new();
    let mut mixed = FactorGraph::new();
    let prior: Factor = PriorFactor::new(VariableKey::robot(0), truth[0], information(&mut r)).into();
    gauss.add(prior.clone());
    mixed.add(prior);
    let mut init = GraphValues::new();
    init.insert(VariableKey::robot(0), truth[0]);
    for k in 1..poses {
        let z = truth[k - 1].between(&truth[k]).compose(&Pose3::exp(&noise(&mut r)));
        let f: Factor = OdometryFactor::new(VariableKey::robot(k as u64 - 1), VariableKey::robot(k as u64), z, information(&mut r))
            .unwrap()
            .into();
        gauss.add(f.clone());
        mixed.add(f);
        let prev = *init.get(&VariableKey::robot(k as u64 - 1)).unwrap();
        init.insert(VariableKey::robot(k as u64), prev.compose(&z));
    }
    for k in 0..poses {
        for (j, m) in marks.iter().enumerate() {
            if r.gen_bool(0.6) || k == 0 {
                let z = Pose3::exp(&noise(&mut r)).compose(&truth[k].between(m));
                let (robot, mark) = (VariableKey::robot(k as u64), VariableKey::landmark(j as u64));
                let info = information(&mut r);
                gauss.add(LandmarkFactor::new(robot, mark, z, info).unwrap());
                mixed.add(MaxMixtureFactor::new(robot, mark, vec![z], info).unwrap());
                if !init.contains(&mark) {
                    init.insert(mark, init.get(&robot).unwrap().compose(&z));
                }
            }
        }
    }
    (gauss, mixed, init)
}

pub fn assert_bit_identical(a: &mmslam::graph::GraphValues, b: &mmslam::graph::GraphValues) {
    assert_eq!(a.len(), b.len());
    for (k, p) in a.iter() {
        let q = b.get(k).unwrap();
        let bits = |p: &Pose3| {
            let mut v: Vec<u64> = p.rotation.wxyz().iter().map(|x| x.to_bits()).collect();
            v.extend(p.translation.iter().map(|x| x.to_bits()));
            v
        };
        assert_eq!(bits(p), bits(q), "{k}");
    }
}

pub fn half_turn_z() -> Pose3 {
    Pose3::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::z(), PI))
}

/// Prior-fixed camera at the origin seeing one landmark through a
/// two-component mixture {truth, truth * Rz(pi)}. Returns (graph, truth, distractor).
pub fn two_mode_problem() -> (mmslam::graph::FactorGraph, Pose3, Pose3) {
    use mmslam::graph::*;
    let x = VariableKey::robot(0);
    let l = VariableKey::landmark(0);
    let truth = Pose3::new(UnitQuaternion::from_axis_angle(&Vector3::new(0.2, 1.0, 0.1), 0.7), Vector3::new(1.0, 0.5, 2.0));
    let distractor = truth.compose(&half_turn_z());
    let info = Information::from_sigmas(0.05, 0.02).unwrap();
    let mut g = FactorGraph::new();
    g.add(PriorFactor::new(x, Pose3::identity(), Information::from_sigmas(1e-3, 1e-3).unwrap()));
    g.add(MaxMixtureFactor::new(x, l, vec![truth, distractor], info).unwrap());
    (g, truth, distractor)
}

/// Two frames see one landmark; each offers {true, distractor}, and the two
/// distractors disagree in the world frame. Frame 1 is 25 times as
/// informative as frame 0. Returns (graph, landmark truth, cameras, world
/// poses of the distractors).
pub fn inconsistent_pair() -> (mmslam::graph::FactorGraph, Pose3, [Pose3; 2], [Pose3; 2]) {
    use mmslam::graph::*;
    let (x0, x1, l) = (VariableKey::robot(0), VariableKey::robot(1), VariableKey::landmark(0));
    let cams = [
        Pose3::identity(),
        Pose3::new(UnitQuaternion::from_axis_angle(&Vector3::y(), 0.6), Vector3::new(2.0, 0.0, 0.5)),
    ];
    let mark = Pose3::new(UnitQuaternion::from_axis_angle(&Vector3::x(), 0.3), Vector3::new(1.0, 0.2, 3.0));
    let wrong = [
        Pose3::new(UnitQuaternion::from_axis_angle(&Vector3::z(), 1.2), Vector3::new(0.4, -0.3, 0.2)),
        Pose3::new(UnitQuaternion::from_axis_angle(&Vector3::x(), -1.0), Vector3::new(-0.5, 0.2, 0.3)),
    ];
    let info = [
        Information::from_sigmas(0.1, 0.1).unwrap(),
        Information::from_sigmas(0.02, 0.02).unwrap(),
    ];
    let mut g = FactorGraph::new();
    for (k, key) in [x0, x1].into_iter().enumerate() {
        g.add(PriorFactor::new(key, cams[k], Information::from_sigmas(1e-3, 1e-3).unwrap()));
    }
    let mut distractor_world = [Pose3::identity(); 2];
    for (k, key) in [x0, x1].into_iter().enumerate() {
        let z_true = cams[k].between(&mark);
        let z_wrong = z_true.compose(&wrong[k]);
        distractor_world[k] = cams[k].compose(&z_wrong);
        g.add(MaxMixtureFactor::new(key, l, vec![z_true, z_wrong], info[k]).unwrap());
    }
    (g, mark, cams, distractor_world)
}

/// Exhaustive oracle: solve the graph with every fixed mode assignment and
/// keep the one with the lowest negative log-likelihood.
pub fn best_assignment(
    graph: &mmslam::graph::FactorGraph,
    init: &mmslam::graph::GraphValues,
) -> (Vec<usize>, mmslam::graph::GraphValues) {
    use mmslam::graph::Factor;
    use mmslam::solver::{optimize, SolverConfig};
    let sizes: Vec<usize> = graph
        .factors()
        .iter()
        .filter_map(|f| match f {
            Factor::MaxMixture(m) => Some(m.len()),
            _ => None,
        })
        .collect();
    let total: usize = sizes.iter().product();
    let mut best: Option<(Vec<usize>, f64, mmslam::graph::GraphValues)> = None;
    for code in 0..total {
        let mut rest = code;
        let picks: Vec<usize> = sizes
            .iter()
            .map(|n| {
                let p = rest % n;
                rest /= n;
                p
            })
            .collect();
        let mut i = 0;
        let collapsed = graph.collapse_mixtures(|_| {
            i += 1;
            picks[i - 1]
        });
        let (out, _) = optimize(&collapsed, init, &SolverConfig::default()).unwrap();
        let err = collapsed.total_error(&out).unwrap();
        if best.as_ref().map_or(true, |(_, e, _)| err < *e) {
            best = Some((picks, err, out));
        }
    }
    let (picks, _, values) = best.unwrap();
    (picks, values)
}

/// Random dataset of vertices, odometry, landmark and mixture edges.
pub fn random_dataset(seed: u64) -> mmslam::dataset::Dataset {
    use mmslam::dataset::Dataset;
    use mmslam::graph::*;
    let mut r = rng(seed);
    let mut ds = Dataset::new();
    let robots = r.gen_range(1..6u64);
    let landmarks = r.gen_range(0..4u64);
    for k in 0..robots {
        ds.push_vertex(VariableKey::robot(k), pose(&mut r, 10.0)).unwrap();
    }
    for j in 0..landmarks {
        ds.push_vertex(VariableKey::landmark(j), pose(&mut r, 10.0)).unwrap();
    }
    for k in 1..robots {
        let f = OdometryFactor::new(VariableKey::robot(k - 1), VariableKey::robot(k), pose(&mut r, 2.0), information(&mut r));
        ds.push_factor(f.unwrap().into()).unwrap();
    }
    for _ in 0..r.gen_range(0..6) {
        if landmarks == 0 {
            break;
        }
        let robot = VariableKey::robot(r.gen_range(0..robots));
        let mark = VariableKey::landmark(r.gen_range(0..landmarks));
        let f: Factor = if r.gen_bool(0.3) {
            LandmarkFactor::new(robot, mark, pose(&mut r, 3.0), information(&mut r)).unwrap().into()
        } else {
            let zs = (0..r.gen_range(1..6)).map(|_| pose(&mut r, 3.0)).collect();
            MaxMixtureFactor::new(robot, mark, zs, information(&mut r)).unwrap().into()
        };
        ds.push_factor(f).unwrap();
    }
    ds
}
