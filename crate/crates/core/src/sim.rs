//! Seeded simulator of an object-SLAM run with ambiguous multi-hypothesis
//! object-pose measurements.
//!
//! Layout: five objects on a ring of radius [`OBJECT_RING_RADIUS`] around a
//! central cuboid footprint. The camera first circles inside the ring facing
//! outward, spirals out, then circles outside the ring facing inward.
//!
//! All randomness comes from one ChaCha8 stream seeded with `SimConfig::seed`
//! and drawn in a fixed order: for every frame, the odometry noise of the
//! step into that frame, then for every visible object (ascending id) the
//! hypothesis draws of [`generate_hypotheses`].

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Information, OdometryFactor, VariableKey};
use crate::metrics::{HypothesisSet, ObjectModel};
use crate::pose::{relative_object_pose, Pose3, Twist, UnitQuaternion};

pub const OBJECT_RING_RADIUS: f64 = 4.0;
/// Half-extent of the central cuboid footprint (m).
pub const CUBOID_HALF_EXTENT: f64 = 1.0;
pub const CAMERA_HEIGHT: f64 = 0.4;
/// Sigmas below this are clamped when building information matrices, so that
/// noise-free runs still get finite weights.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub enum SymmetryDescriptor {
    None,
    DiscreteRotations { axis: Vector3<f64>, order: u32 },
    /// Mirror-image pair about the plane with this normal; realized as the
    /// half turn about the normal (plane reflection followed by point
    /// inversion), the proper motion relating the two images.
    MirrorPair { normal: Vector3<f64> },
    /// Rotations about `axis` sampled at `sample_count` equally spaced angles.
    AxisContinuous { axis: Vector3<f64>, sample_count: u32 },
}

impl SymmetryDescriptor {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: &Vector3<f64>| (v.norm() - 1.0).abs() < 1e-9;
        let ok = match self {
            SymmetryDescriptor::None => true,
            SymmetryDescriptor::DiscreteRotations { axis, order } => unit(axis) && *order >= 2,
            SymmetryDescriptor::MirrorPair { normal } => unit(normal),
            SymmetryDescriptor::AxisContinuous { axis, sample_count } => {
                unit(axis) && *sample_count >= 2
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid symmetry descriptor {self:?}")))
        }
    }

    /// Non-identity object-frame rotations of the symmetry group.
    pub fn elements(&self) -> Vec<UnitQuaternion> {
        let turns = |axis: &Vector3<f64>, n: u32| -> Vec<UnitQuaternion> {
            (1..n)
                .map(|k| UnitQuaternion::from_axis_angle(axis, TAU * k as f64 / n as f64))
                .collect()
        };
        match self {
            SymmetryDescriptor::None => Vec::new(),
            SymmetryDescriptor::DiscreteRotations { axis, order } => turns(axis, *order),
            SymmetryDescriptor::MirrorPair { normal } => {
                vec![UnitQuaternion::from_axis_angle(normal, PI)]
            }
            SymmetryDescriptor::AxisContinuous { axis, sample_count } => turns(axis, *sample_count),
        }
    }
}

/// Viewing directions (object frame) from which the object looks unambiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewCone {
    pub direction: Vector3<f64>,
    pub half_angle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimObject {
    pub id: u32,
    pub pose_in_world: Pose3,
    pub model: ObjectModel,
    pub symmetry: SymmetryDescriptor,
    /// When the camera sits inside this cone the symmetry is broken (e.g. a
    /// visible mug handle) and no symmetric copies are produced.
    pub disambiguating_view: Option<ViewCone>,
}

impl SimObject {
    /// Symmetry in effect when viewed from `camera`.
    pub fn effective_symmetry(&self, camera: &Pose3) -> SymmetryDescriptor {
        if let Some(cone) = &self.disambiguating_view {
            let dir = self
                .pose_in_world
                .inverse()
                .transform_point(&camera.translation);
            if dir.norm() > 0.0 && dir.normalize().dot(&cone.direction.normalize()) >= cone.half_angle.cos() {
                return SymmetryDescriptor::None;
            }
        }
        self.symmetry.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub frame_count: usize,
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Fraction of frames spent on the inner circle.
    pub inner_fraction: f64,
    /// Largest translation between consecutive frames (m).
    pub step_cap: f64,
    /// Largest rotation between consecutive frames (rad).
    pub turn_cap: f64,
    pub odom_sigma_rot: f64,
    pub odom_sigma_trans: f64,
    pub meas_sigma_rot: f64,
    pub meas_sigma_trans: f64,
    pub n_hypotheses: usize,
    pub p_cov: f64,
    pub p_spur: f64,
    pub visibility_range: f64,
    pub visibility_half_angle: f64,
    /// `None` selects the default five-object layout.
    pub objects: Option<Vec<SimObject>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frame_count: 400,
            inner_radius: 2.5,
            outer_radius: 6.0,
            inner_fraction: 0.5,
            step_cap: 0.35,
            turn_cap: 0.2,
            odom_sigma_rot: 0.01,
            odom_sigma_trans: 0.02,
            meas_sigma_rot: 0.05,
            meas_sigma_trans: 0.02,
            n_hypotheses: 5,
            p_cov: 0.8,
            p_spur: 0.2,
            visibility_range: 5.0,
            visibility_half_angle: 0.8,
            objects: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !(prob(self.p_cov) && prob(self.p_spur) && prob(self.inner_fraction)) {
            return Err(Error::invalid("probabilities and fractions must lie in [0, 1]"));
        }
        if self.n_hypotheses == 0 {
            return Err(Error::invalid("hypothesis count must be at least 1"));
        }
        if !(self.inner_radius > 0.0 && self.outer_radius > 0.0) {
            return Err(Error::invalid("circle radii must be positive"));
        }
        if !(self.step_cap > 0.0 && self.turn_cap > 0.0) {
            return Err(Error::invalid("step caps must be positive"));
        }
        let sigmas = [
            self.odom_sigma_rot,
            self.odom_sigma_trans,
            self.meas_sigma_rot,
            self.meas_sigma_trans,
            self.visibility_range,
            self.visibility_half_angle,
        ];
        if !sigmas.iter().all(|s| nonneg(*s)) {
            return Err(Error::invalid("noise sigmas and visibility limits must be nonnegative"));
        }
        Ok(())
    }

    pub fn odometry_information(&self) -> Information {
        Information::from_sigmas(
            self.odom_sigma_rot.max(SIGMA_FLOOR),
            self.odom_sigma_trans.max(SIGMA_FLOOR),
        )
        .expect("floored sigmas give an SPD matrix")
    }

    pub fn measurement_information(&self) -> Information {
        Information::from_sigmas(
            self.meas_sigma_rot.max(SIGMA_FLOOR),
            self.meas_sigma_trans.max(SIGMA_FLOOR),
        )
        .expect("floored sigmas give an SPD matrix")
    }
}

fn box_points(sx: f64, sy: f64, sz: f64) -> Vec<Vector3<f64>> {
    // corners, edge midpoints and face centers of a box resting on z = 0
    let mut pts = Vec::new();
    for ix in -1..=1 {
        for iy in -1..=1 {
            for iz in 0..=2 {
                if ix == 0 && iy == 0 && iz == 1 {
                    continue;
                }
                pts.push(Vector3::new(
                    0.5 * sx * ix as f64,
                    0.5 * sy * iy as f64,
                    0.5 * sz * iz as f64,
                ));
            }
        }
    }
    pts
}

fn cylinder_points(radius: f64, height: f64, around: u32, rings: u32) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for r in 0..rings {
        let z = height * r as f64 / (rings - 1) as f64;
        for k in 0..around {
            let a = TAU * k as f64 / around as f64;
            pts.push(Vector3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    pts.push(Vector3::new(0.0, 0.0, 0.0));
    pts.push(Vector3::new(0.0, 0.0, height));
    pts
}

fn yaw(angle: f64) -> UnitQuaternion {
    UnitQuaternion::from_axis_angle(&Vector3::z(), angle)
}

/// The default world: objects at bearings `18 + 72 k` degrees on the ring.
pub fn default_world() -> Vec<SimObject> {
    let place = |k: usize, heading: f64| {
        let bearing = (18.0 + 72.0 * k as f64).to_radians();
        Pose3::new(
            yaw(bearing + heading),
            Vector3::new(
                OBJECT_RING_RADIUS * bearing.cos(),
                OBJECT_RING_RADIUS * bearing.sin(),
                0.0,
            ),
        )
    };
    let model = |id: u32, name: &str, pts: Vec<Vector3<f64>>| {
        ObjectModel::new(id, name, pts).expect("static model is valid")
    };

    let mut mug = cylinder_points(0.4, 0.5, 36, 3);
    for z in [0.1, 0.25, 0.4] {
        mug.push(Vector3::new(0.55, 0.0, z));
    }
    mug.push(Vector3::new(0.47, 0.0, 0.45));
    mug.push(Vector3::new(0.47, 0.0, 0.05));

    let mut mustard = cylinder_points(0.25, 0.7, 12, 3);
    mustard.extend([
        Vector3::new(0.05, 0.0, 0.85),
        Vector3::new(0.1, 0.0, 0.95),
        Vector3::new(0.35, 0.0, 0.3),
    ]);

    vec![
        SimObject {
            id: 0,
            pose_in_world: place(0, 0.4),
            model: model(0, "cracker_box", box_points(0.8, 0.3, 1.0)),
            symmetry: SymmetryDescriptor::None,
            disambiguating_view: None,
        },
        SimObject {
            id: 1,
            // handle (object +x) points away from the ring center
            pose_in_world: place(1, 0.0),
            model: model(1, "mug", mug),
            symmetry: SymmetryDescriptor::AxisContinuous {
                axis: Vector3::z(),
                sample_count: 36,
            },
            disambiguating_view: Some(ViewCone {
                direction: Vector3::x(),
                half_angle: 70f64.to_radians(),
            }),
        },
        SimObject {
            id: 2,
            pose_in_world: place(2, -0.9),
            model: model(2, "tuna_fish_can", cylinder_points(0.45, 0.3, 36, 2)),
            symmetry: SymmetryDescriptor::AxisContinuous {
                axis: Vector3::z(),
                sample_count: 36,
            },
            disambiguating_view: None,
        },
        SimObject {
            id: 3,
            pose_in_world: place(3, 1.3),
            model: model(3, "sugar_box", box_points(0.45, 0.2, 0.9)),
            symmetry: SymmetryDescriptor::None,
            disambiguating_view: None,
        },
        SimObject {
            id: 4,
            pose_in_world: place(4, -0.3),
            model: model(4, "mustard_bottle", mustard),
            symmetry: SymmetryDescriptor::None,
            disambiguating_view: None,
        },
    ]
}

pub fn generate_world(config: &SimConfig) -> Result<Vec<SimObject>> {
    let objects = config.objects.clone().unwrap_or_else(default_world);
    let mut ids: Vec<u32> = objects.iter().map(|o| o.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("object ids must be unique"));
    }
    for o in &objects {
        o.symmetry.validate()?;
    }
    Ok(objects)
}

/// Camera on a horizontal circle at `bearing`; `facing` rotates the optical
/// axis about world z away from radially outward (0 = outward, pi = inward).
fn circle_pose(radius: f64, bearing: f64, facing: f64) -> Pose3 {
    let heading = bearing + facing;
    let z_axis = Vector3::new(heading.cos(), heading.sin(), 0.0);
    let y_axis = Vector3::new(0.0, 0.0, -1.0);
    let x_axis = y_axis.cross(&z_axis);
    let rot = Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
    let q = nalgebra::UnitQuaternion::from_matrix(&rot);
    let rotation = UnitQuaternion::from_wxyz(q.w, q.i, q.j, q.k).expect("unit quaternion");
    Pose3::new(
        rotation,
        Vector3::new(radius * bearing.cos(), radius * bearing.sin(), CAMERA_HEIGHT),
    )
}

/// Frame counts of the inner circle, the spiral transition and the outer circle.
pub fn trajectory_split(config: &SimConfig) -> (usize, usize, usize) {
    let n = config.frame_count;
    let inner = ((n as f64) * config.inner_fraction).round() as usize;
    let inner = inner.min(n);
    if inner == n {
        return (n, 0, 0);
    }
    let radial = (config.outer_radius - config.inner_radius).abs();
    let transition = ((radial / config.step_cap).ceil() as usize)
        .max((PI / config.turn_cap).ceil() as usize)
        .max(1);
    let transition = transition.min(n - inner);
    (inner, transition, n - inner - transition)
}

pub fn generate_trajectory(config: &SimConfig) -> Result<Vec<Pose3>> {
    if config.frame_count < 2 {
        return Err(Error::invalid("a trajectory needs at least two frames"));
    }
    config.validate()?;
    let (n_in, n_tr, n_out) = trajectory_split(config);
    let mut poses = Vec::with_capacity(config.frame_count);
    let mut bearing = 0.0;
    for k in 0..n_in {
        bearing = TAU * k as f64 / n_in as f64;
        poses.push(circle_pose(config.inner_radius, bearing, 0.0));
    }
    for k in 1..=n_tr {
        let s = k as f64 / n_tr as f64;
        let radius = config.inner_radius + s * (config.outer_radius - config.inner_radius);
        poses.push(circle_pose(radius, bearing, s * PI));
    }
    let start = bearing;
    for k in 1..=n_out {
        let b = start + TAU * k as f64 / n_out as f64;
        poses.push(circle_pose(config.outer_radius, b, PI));
    }
    for w in poses.windows(2) {
        let rel = w[0].between(&w[1]);
        if rel.translation.norm() > config.step_cap + 1e-12 || rel.rotation.angle() > config.turn_cap + 1e-12 {
            return Err(Error::invalid(format!(
                "{} frames are too few for the step caps ({} m, {} rad)",
                config.frame_count, config.step_cap, config.turn_cap
            )));
        }
    }
    Ok(poses)
}

fn sample_twist(rng: &mut ChaCha8Rng, sigma_rot: f64, sigma_trans: f64) -> Twist {
    let rot = Normal::new(0.0, sigma_rot).expect("finite sigma");
    let trans = Normal::new(0.0, sigma_trans).expect("finite sigma");
    let r = Vector3::new(rot.sample(rng), rot.sample(rng), rot.sample(rng));
    let t = Vector3::new(trans.sample(rng), trans.sample(rng), trans.sample(rng));
    Twist::new(r, t)
}

/// Noisy relative motion `exp(e) * (x_i^-1 x_{i+1})` for one step.
fn odometry_step(
    a: &Pose3,
    b: &Pose3,
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
    from: u64,
) -> Result<OdometryFactor> {
    let eps = sample_twist(rng, config.odom_sigma_rot, config.odom_sigma_trans);
    let z = Pose3::exp(&eps).compose(&a.between(b));
    OdometryFactor::new(
        VariableKey::robot(from),
        VariableKey::robot(from + 1),
        z,
        config.odometry_information(),
    )
}

pub fn simulate_odometry(
    gt_trajectory: &[Pose3],
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<OdometryFactor>> {
    if gt_trajectory.len() < 2 {
        return Err(Error::invalid("odometry needs at least two poses"));
    }
    gt_trajectory
        .windows(2)
        .enumerate()
        .map(|(i, w)| odometry_step(&w[0], &w[1], config, rng, i as u64))
        .collect()
}

fn uniform_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion {
    // Shoemake's subgroup algorithm
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    UnitQuaternion::from_wxyz(
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
        b * (TAU * u3).cos(),
    )
    .expect("unit norm by construction")
}

/// Spurious hypothesis: uniform rotation, translation uniform in the ball of
/// radius twice the true object distance, centered on the camera.
fn spurious_pose(true_relative: &Pose3, rng: &mut ChaCha8Rng) -> Pose3 {
    let rotation = uniform_rotation(rng);
    let dir = Vector3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    let u: f64 = rng.gen();
    let radius = 2.0 * true_relative.translation.norm() * u.cbrt();
    let dir: Vector3<f64> = dir;
    let t = if dir.norm() > 0.0 {
        dir.normalize() * radius
    } else {
        Vector3::zeros()
    };
    Pose3::new(rotation, t)
}

/// One multi-hypothesis measurement of `true_relative` (object in camera).
///
/// Slot 0 holds the noisy true pose with probability `p_cov`. Every other slot
/// is spurious with probability `p_spur`, otherwise a noisy symmetric copy
/// `true * S` taking the group elements in a random order, cycling before
/// repeating. Without non-identity elements the copy is the true pose itself
/// when covered, and a spurious pose when not. Slots are shuffled at the end;
/// weights are uniform.
pub fn generate_hypotheses(
    object_id: u32,
    true_relative: &Pose3,
    symmetry: &SymmetryDescriptor,
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<HypothesisSet> {
    let n = config.n_hypotheses;
    if n == 0 {
        return Err(Error::invalid("hypothesis count must be at least 1"));
    }
    let covered = rng.gen::<f64>() < config.p_cov;
    let mut elements = symmetry.elements();
    elements.shuffle(rng);
    let mut next_element = 0usize;
    let mut slots = Vec::with_capacity(n);
    for s in 0..n {
        let noisy = |base: Pose3, rng: &mut ChaCha8Rng| {
            let eps = sample_twist(rng, config.meas_sigma_rot, config.meas_sigma_trans);
            Pose3::exp(&eps).compose(&base)
        };
        if s == 0 && covered {
            slots.push(noisy(*true_relative, rng));
            continue;
        }
        if rng.gen::<f64>() < config.p_spur {
            slots.push(spurious_pose(true_relative, rng));
            continue;
        }
        if elements.is_empty() {
            if covered {
                slots.push(noisy(*true_relative, rng));
            } else {
                slots.push(spurious_pose(true_relative, rng));
            }
        } else {
            let sym = Pose3::from_rotation(elements[next_element % elements.len()]);
            next_element += 1;
            slots.push(noisy(true_relative.compose(&sym), rng));
        }
    }
    slots.shuffle(rng);
    HypothesisSet::uniform(object_id, slots)
}

fn is_visible(camera: &Pose3, object: &SimObject, config: &SimConfig) -> bool {
    let rel = relative_object_pose(camera, &object.pose_in_world).translation;
    let dist = rel.norm();
    if dist > config.visibility_range || dist == 0.0 {
        return false;
    }
    // optical axis is camera +z
    rel.z / dist >= config.visibility_half_angle.cos()
}

/// One object's hypothesis set in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub landmark: u32,
    pub hypotheses: HypothesisSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub objects: Vec<SimObject>,
    pub trajectory: Vec<Pose3>,
    /// `odometry[i]` links frame `i` to frame `i + 1`.
    pub odometry: Vec<OdometryFactor>,
    /// Per frame, one entry per visible object in ascending id order.
    pub observations: Vec<Vec<Observation>>,
    pub measurement_information: Information,
}

impl SimOutput {
    pub fn visible_ids(&self, frame: usize) -> Vec<u32> {
        self.observations[frame].iter().map(|o| o.landmark).collect()
    }

    pub fn object(&self, id: u32) -> Option<&SimObject> {
        self.objects.iter().find(|o| o.id == id)
    }
}

pub fn run_simulation(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let mut objects = generate_world(config)?;
    objects.sort_by_key(|o| o.id);
    let trajectory = generate_trajectory(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut odometry = Vec::with_capacity(trajectory.len() - 1);
    let mut observations = Vec::with_capacity(trajectory.len());
    for (k, camera) in trajectory.iter().enumerate() {
        if k > 0 {
            odometry.push(odometry_step(
                &trajectory[k - 1],
                camera,
                config,
                &mut rng,
                (k - 1) as u64,
            )?);
        }
        let mut frame = Vec::new();
        for object in &objects {
            if !is_visible(camera, object, config) {
                continue;
            }
            let rel = relative_object_pose(camera, &object.pose_in_world);
            let symmetry = object.effective_symmetry(camera);
            let hypotheses = generate_hypotheses(object.id, &rel, &symmetry, config, &mut rng)?;
            frame.push(Observation {
                landmark: object.id,
                hypotheses,
            });
        }
        observations.push(frame);
    }
    Ok(SimOutput {
        objects,
        trajectory,
        odometry,
        observations,
        measurement_information: config.measurement_information(),
    })
}

/// Fresh RNG for callers that drive [`generate_hypotheses`] or
/// [`simulate_odometry`] directly.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
