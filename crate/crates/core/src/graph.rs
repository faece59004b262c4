//! Factor-graph problem representation: pose variables, Gaussian prior and
//! odometry factors, and the max-mixture multi-hypothesis landmark factor.
//!
//! Every residual is whitened (`r_w = L r` with `L^T L = information`) and every
//! Jacobian is taken with respect to the left perturbation `exp(d) * x` of the
//! variable it refers to.

use std::fmt;

use arrayvec::ArrayVec;
use indexmap::IndexMap;
use nalgebra::{Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::metrics::normalize_weights;
use crate::pose::{relative_object_pose, se3_right_jacobian_inv, Pose3, Twist};

/// Step for central finite-difference Jacobians.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariableKind {
    Robot,
    Landmark,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariableKey {
    pub kind: VariableKind,
    pub index: u64,
}

impl VariableKey {
    pub const fn robot(index: u64) -> Self {
        Self {
            kind: VariableKind::Robot,
            index,
        }
    }

    pub const fn landmark(index: u64) -> Self {
        Self {
            kind: VariableKind::Landmark,
            index,
        }
    }

    pub fn is_robot(&self) -> bool {
        self.kind == VariableKind::Robot
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VariableKind::Robot => write!(f, "x{}", self.index),
            VariableKind::Landmark => write!(f, "l{}", self.index),
        }
    }
}

/// Variable assignment, iterated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphValues(IndexMap<VariableKey, Pose3>);

impl GraphValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: VariableKey, pose: Pose3) -> Option<Pose3> {
        self.0.insert(key, pose)
    }

    pub fn get(&self, key: &VariableKey) -> Result<&Pose3> {
        self.0.get(key).ok_or(Error::MissingVariable(*key))
    }

    pub fn try_get(&self, key: &VariableKey) -> Option<&Pose3> {
        self.0.get(key)
    }

    pub fn contains(&self, key: &VariableKey) -> bool {
        self.0.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VariableKey, &Pose3)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VariableKey> {
        self.0.keys()
    }

    pub(crate) fn get_mut(&mut self, key: &VariableKey) -> Option<&mut Pose3> {
        self.0.get_mut(key)
    }
}

impl FromIterator<(VariableKey, Pose3)> for GraphValues {
    fn from_iter<I: IntoIterator<Item = (VariableKey, Pose3)>>(iter: I) -> Self {
        GraphValues(iter.into_iter().collect())
    }
}

/// Symmetric positive-definite 6x6 information matrix with its square root
/// `L` (upper triangular, `L^T L = information`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Information {
    matrix: Matrix6<f64>,
    sqrt: Matrix6<f64>,
}

impl Information {
    pub fn new(matrix: Matrix6<f64>) -> Result<Self> {
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("information matrix is not finite".into()));
        }
        let scale = matrix.amax().max(1.0);
        if (matrix - matrix.transpose()).amax() > 1e-9 * scale {
            return Err(Error::Validation("information matrix is not symmetric".into()));
        }
        let chol = matrix
            .cholesky()
            .ok_or_else(|| Error::Validation("information matrix is not positive definite".into()))?;
        Ok(Self {
            matrix,
            sqrt: chol.l().transpose(),
        })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix6::identity(),
            sqrt: Matrix6::identity(),
        }
    }

    pub fn diagonal(diag: &[f64; 6]) -> Result<Self> {
        Self::new(Matrix6::from_diagonal(&Vector6::from_column_slice(diag)))
    }

    /// `diag(1/sigma_rot^2 x3, 1/sigma_trans^2 x3)`.
    pub fn from_sigmas(sigma_rot: f64, sigma_trans: f64) -> Result<Self> {
        let r = 1.0 / (sigma_rot * sigma_rot);
        let t = 1.0 / (sigma_trans * sigma_trans);
        Self::diagonal(&[r, r, r, t, t, t])
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.matrix
    }

    pub fn sqrt(&self) -> &Matrix6<f64> {
        &self.sqrt
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorFactor {
    pub key: VariableKey,
    pub prior: Pose3,
    pub information: Information,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdometryFactor {
    pub from: VariableKey,
    pub to: VariableKey,
    /// Expected `from^-1 * to`.
    pub measurement: Pose3,
    pub information: Information,
}

/// Single-hypothesis Gaussian object-pose factor.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkFactor {
    pub robot: VariableKey,
    pub landmark: VariableKey,
    /// Object pose in the camera frame.
    pub measurement: Pose3,
    pub information: Information,
}

/// Multi-hypothesis object-pose factor whose likelihood is the maximum over
/// weighted Gaussian components sharing one information matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxMixtureFactor {
    pub robot: VariableKey,
    pub landmark: VariableKey,
    measurements: Vec<Pose3>,
    weights: Vec<f64>,
    /// `ln(w_max) - ln(w_j)`: zero for uniform weights.
    offsets: Vec<f64>,
    pub information: Information,
}

impl PriorFactor {
    pub fn new(key: VariableKey, prior: Pose3, information: Information) -> Self {
        Self {
            key,
            prior,
            information,
        }
    }

    /// `L log(prior * x^-1)`.
    pub fn residual(&self, values: &GraphValues) -> Result<Vector6<f64>> {
        let x = values.get(&self.key)?;
        Ok(self.information.sqrt() * self.prior.compose(&x.inverse()).log().0)
    }

    fn linearize(&self, values: &GraphValues) -> Result<Linearized> {
        let x = values.get(&self.key)?;
        let xi = self.prior.compose(&x.inverse()).log();
        let l = self.information.sqrt();
        let jac = -(l * se3_right_jacobian_inv(&xi));
        let mut blocks = ArrayVec::new();
        blocks.push((self.key, jac));
        Ok(Linearized {
            residual: l * xi.0,
            offset: 0.0,
            component: None,
            blocks,
        })
    }
}

impl OdometryFactor {
    pub fn new(
        from: VariableKey,
        to: VariableKey,
        measurement: Pose3,
        information: Information,
    ) -> Result<Self> {
        if !from.is_robot() || !to.is_robot() {
            return Err(Error::invalid("odometry factors connect robot poses"));
        }
        if from == to {
            return Err(Error::invalid(format!("odometry factor links {from} to itself")));
        }
        Ok(Self {
            from,
            to,
            measurement,
            information,
        })
    }

    pub fn residual(&self, values: &GraphValues) -> Result<Vector6<f64>> {
        let a = values.get(&self.from)?;
        let b = values.get(&self.to)?;
        Ok(self.information.sqrt() * relative_residual(&self.measurement, a, b).0)
    }
}

impl LandmarkFactor {
    pub fn new(
        robot: VariableKey,
        landmark: VariableKey,
        measurement: Pose3,
        information: Information,
    ) -> Result<Self> {
        check_observation_keys(robot, landmark)?;
        Ok(Self {
            robot,
            landmark,
            measurement,
            information,
        })
    }

    pub fn residual(&self, values: &GraphValues) -> Result<Vector6<f64>> {
        let c = values.get(&self.robot)?;
        let o = values.get(&self.landmark)?;
        Ok(self.information.sqrt() * relative_residual(&self.measurement, c, o).0)
    }
}

fn check_observation_keys(robot: VariableKey, landmark: VariableKey) -> Result<()> {
    if !robot.is_robot() || landmark.is_robot() {
        return Err(Error::invalid(
            "object observations connect a robot pose to a landmark",
        ));
    }
    Ok(())
}

/// Unwhitened `log(z * to^-1 * from)`, i.e. `log(z h^-1)` with `h = from^-1 * to`.
fn relative_residual(z: &Pose3, from: &Pose3, to: &Pose3) -> Twist {
    let d = to.inverse().compose(from);
    z.compose(&d).log()
}

/// Whitened residual and the two Jacobian blocks of a relative-pose factor.
fn linearize_relative(
    z: &Pose3,
    from: (VariableKey, &Pose3),
    to: (VariableKey, &Pose3),
    info: &Information,
) -> (Vector6<f64>, ArrayVec<(VariableKey, Matrix6<f64>), 2>) {
    let xi = relative_residual(z, from.1, to.1);
    let l = info.sqrt();
    let j_from = l * se3_right_jacobian_inv(&xi) * from.1.inverse().adjoint();
    let j_to = -j_from;
    let mut blocks = ArrayVec::new();
    blocks.push((from.0, j_from));
    blocks.push((to.0, j_to));
    (l * xi.0, blocks)
}

impl MaxMixtureFactor {
    /// Uniform weights `1/N`.
    pub fn new(
        robot: VariableKey,
        landmark: VariableKey,
        measurements: Vec<Pose3>,
        information: Information,
    ) -> Result<Self> {
        let n = measurements.len();
        if n == 0 {
            return Err(Error::invalid("max-mixture factor needs at least one component"));
        }
        Self::with_weights(robot, landmark, measurements, vec![1.0; n], information)
    }

    /// Weights are normalized; any positive scaling gives the same factor.
    pub fn with_weights(
        robot: VariableKey,
        landmark: VariableKey,
        measurements: Vec<Pose3>,
        weights: Vec<f64>,
        information: Information,
    ) -> Result<Self> {
        check_observation_keys(robot, landmark)?;
        let weights = normalize_weights(&weights, measurements.len())?;
        let w_max = weights.iter().cloned().fold(0.0, f64::max);
        let uniform = weights.iter().all(|w| *w == w_max);
        let offsets = weights
            .iter()
            .map(|w| if uniform { 0.0 } else { w_max.ln() - w.ln() })
            .collect();
        Ok(Self {
            robot,
            landmark,
            measurements,
            weights,
            offsets,
            information,
        })
    }

    pub fn measurements(&self) -> &[Pose3] {
        &self.measurements
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// Constant `-ln(w_j)` relative to the best-weighted component.
    pub fn offset(&self, j: usize) -> f64 {
        self.offsets[j]
    }

    /// Whitened residual `L log(z_j h^-1)` of component `j`.
    pub fn residual_component(&self, j: usize, values: &GraphValues) -> Result<Vector6<f64>> {
        if j >= self.measurements.len() {
            return Err(Error::invalid(format!(
                "component {j} out of range for {} hypotheses",
                self.measurements.len()
            )));
        }
        let c = values.get(&self.robot)?;
        let o = values.get(&self.landmark)?;
        Ok(self.information.sqrt() * relative_residual(&self.measurements[j], c, o).0)
    }

    /// Most likely component: `argmin_j 0.5 |r_j|^2 - ln w_j`, lowest index on ties.
    pub fn select_component(&self, values: &GraphValues) -> Result<usize> {
        Ok(self.evaluate_best(values)?.0)
    }

    /// Active component, its whitened residual and its weight offset.
    pub fn residual_active(&self, values: &GraphValues) -> Result<(usize, Vector6<f64>, f64)> {
        let (j, r, _) = self.evaluate_best(values)?;
        Ok((j, r, self.offsets[j]))
    }

    fn evaluate_best(&self, values: &GraphValues) -> Result<(usize, Vector6<f64>, f64)> {
        let c = values.get(&self.robot)?;
        let o = values.get(&self.landmark)?;
        let d = o.inverse().compose(c);
        let l = self.information.sqrt();
        let mut best: Option<(usize, Vector6<f64>, f64)> = None;
        for (j, z) in self.measurements.iter().enumerate() {
            let r = l * z.compose(&d).log().0;
            let score = 0.5 * r.norm_squared() + self.offsets[j];
            if best.as_ref().map_or(true, |(_, _, s)| score < *s) {
                best = Some((j, r, score));
            }
        }
        Ok(best.expect("factor has at least one component"))
    }

    /// Linearization of a fixed component.
    pub fn linearize_component(&self, j: usize, values: &GraphValues) -> Result<Linearized> {
        let c = values.get(&self.robot)?;
        let o = values.get(&self.landmark)?;
        let (residual, blocks) = linearize_relative(
            &self.measurements[j],
            (self.robot, c),
            (self.landmark, o),
            &self.information,
        );
        Ok(Linearized {
            residual,
            offset: self.offsets[j],
            component: Some(j),
            blocks,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    Prior(PriorFactor),
    Odometry(OdometryFactor),
    Landmark(LandmarkFactor),
    MaxMixture(MaxMixtureFactor),
}

/// Whitened residual with one 6x6 Jacobian block per connected variable.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearized {
    pub residual: Vector6<f64>,
    /// Constant added to `0.5 |r|^2` in the total error.
    pub offset: f64,
    /// Active component for max-mixture factors.
    pub component: Option<usize>,
    pub blocks: ArrayVec<(VariableKey, Matrix6<f64>), 2>,
}

impl Linearized {
    pub fn error(&self) -> f64 {
        0.5 * self.residual.norm_squared() + self.offset
    }
}

impl Factor {
    pub fn keys(&self) -> ArrayVec<VariableKey, 2> {
        let mut out = ArrayVec::new();
        match self {
            Factor::Prior(f) => out.push(f.key),
            Factor::Odometry(f) => {
                out.push(f.from);
                out.push(f.to);
            }
            Factor::Landmark(f) => {
                out.push(f.robot);
                out.push(f.landmark);
            }
            Factor::MaxMixture(f) => {
                out.push(f.robot);
                out.push(f.landmark);
            }
        }
        out
    }

    /// `0.5 |r|^2 + offset` at the most likely component.
    pub fn error(&self, values: &GraphValues) -> Result<f64> {
        Ok(match self {
            Factor::Prior(f) => 0.5 * f.residual(values)?.norm_squared(),
            Factor::Odometry(f) => 0.5 * f.residual(values)?.norm_squared(),
            Factor::Landmark(f) => 0.5 * f.residual(values)?.norm_squared(),
            Factor::MaxMixture(f) => {
                let (j, r, _) = f.evaluate_best(values)?;
                0.5 * r.norm_squared() + f.offsets[j]
            }
        })
    }

    /// Analytic linearization; max-mixture factors use their currently most
    /// likely component.
    pub fn linearize(&self, values: &GraphValues) -> Result<Linearized> {
        match self {
            Factor::MaxMixture(f) => {
                let j = f.select_component(values)?;
                f.linearize_component(j, values)
            }
            other => other.linearize_with(None, values),
        }
    }

    /// Analytic linearization with the max-mixture component fixed to
    /// `component` (ignored for Gaussian factors).
    pub fn linearize_with(&self, component: Option<usize>, values: &GraphValues) -> Result<Linearized> {
        match self {
            Factor::Prior(f) => f.linearize(values),
            Factor::Odometry(f) => {
                let (residual, blocks) = linearize_relative(
                    &f.measurement,
                    (f.from, values.get(&f.from)?),
                    (f.to, values.get(&f.to)?),
                    &f.information,
                );
                Ok(Linearized {
                    residual,
                    offset: 0.0,
                    component: None,
                    blocks,
                })
            }
            Factor::Landmark(f) => {
                let (residual, blocks) = linearize_relative(
                    &f.measurement,
                    (f.robot, values.get(&f.robot)?),
                    (f.landmark, values.get(&f.landmark)?),
                    &f.information,
                );
                Ok(Linearized {
                    residual,
                    offset: 0.0,
                    component: None,
                    blocks,
                })
            }
            Factor::MaxMixture(f) => match component {
                Some(j) if j < f.len() => f.linearize_component(j, values),
                Some(j) => Err(Error::invalid(format!("component {j} out of range"))),
                None => self.linearize(values),
            },
        }
    }

    /// Whitened residual with the mixture component fixed (no reselection).
    fn residual_fixed(&self, component: Option<usize>, values: &GraphValues) -> Result<Vector6<f64>> {
        match self {
            Factor::Prior(f) => f.residual(values),
            Factor::Odometry(f) => f.residual(values),
            Factor::Landmark(f) => f.residual(values),
            Factor::MaxMixture(f) => {
                let j = match component {
                    Some(j) => j,
                    None => f.select_component(values)?,
                };
                f.residual_component(j, values)
            }
        }
    }

    /// Central finite-difference linearization with step [`FD_STEP`], holding
    /// the mixture component chosen at `values` fixed.
    pub fn linearize_numeric(&self, values: &GraphValues) -> Result<Linearized> {
        let analytic = self.linearize(values)?;
        let component = analytic.component;
        let mut blocks = ArrayVec::new();
        for key in self.keys() {
            let base = *values.get(&key)?;
            let mut jac = Matrix6::zeros();
            let mut probe = values.clone();
            for k in 0..6 {
                let mut delta = Vector6::zeros();
                delta[k] = FD_STEP;
                *probe.get_mut(&key).expect("key present") = base.retract(&Twist(delta));
                let plus = self.residual_fixed(component, &probe)?;
                *probe.get_mut(&key).expect("key present") = base.retract(&Twist(-delta));
                let minus = self.residual_fixed(component, &probe)?;
                jac.set_column(k, &((plus - minus) / (2.0 * FD_STEP)));
            }
            blocks.push((key, jac));
        }
        Ok(Linearized {
            residual: analytic.residual,
            offset: analytic.offset,
            component,
            blocks,
        })
    }
}

impl From<PriorFactor> for Factor {
    fn from(f: PriorFactor) -> Self {
        Factor::Prior(f)
    }
}
impl From<OdometryFactor> for Factor {
    fn from(f: OdometryFactor) -> Self {
        Factor::Odometry(f)
    }
}
impl From<LandmarkFactor> for Factor {
    fn from(f: LandmarkFactor) -> Self {
        Factor::Landmark(f)
    }
}
impl From<MaxMixtureFactor> for Factor {
    fn from(f: MaxMixtureFactor) -> Self {
        Factor::MaxMixture(f)
    }
}

/// Ordered list of factors; insertion order fixes every summation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FactorGraph {
    factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, factor: impl Into<Factor>) {
        self.factors.push(factor.into());
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn max_mixture_factors(&self) -> impl Iterator<Item = &MaxMixtureFactor> {
        self.factors.iter().filter_map(|f| match f {
            Factor::MaxMixture(m) => Some(m),
            _ => None,
        })
    }

    pub fn has_prior(&self) -> bool {
        self.factors.iter().any(|f| matches!(f, Factor::Prior(_)))
    }

    pub fn check_keys(&self, values: &GraphValues) -> Result<()> {
        for f in &self.factors {
            for k in f.keys() {
                values.get(&k)?;
            }
        }
        Ok(())
    }

    /// Total `sum(0.5 |r|^2 + offset)` with every mixture at its best component.
    pub fn total_error(&self, values: &GraphValues) -> Result<f64> {
        let mut sum = 0.0;
        for f in &self.factors {
            sum += f.error(values)?;
        }
        Ok(sum)
    }

    /// Active component of every max-mixture factor, in graph order.
    pub fn active_components(&self, values: &GraphValues) -> Result<Vec<usize>> {
        self.max_mixture_factors()
            .map(|f| f.select_component(values))
            .collect()
    }

    /// Same graph with every max-mixture factor replaced by one of its
    /// components as an ordinary Gaussian factor.
    pub fn collapse_mixtures(&self, mut pick: impl FnMut(&MaxMixtureFactor) -> usize) -> FactorGraph {
        let factors = self
            .factors
            .iter()
            .map(|f| match f {
                Factor::MaxMixture(m) => Factor::Landmark(LandmarkFactor {
                    robot: m.robot,
                    landmark: m.landmark,
                    measurement: m.measurements[pick(m)],
                    information: m.information,
                }),
                other => other.clone(),
            })
            .collect();
        FactorGraph { factors }
    }
}

/// Object pose predicted for a camera/landmark pair, `h(X) = camera^-1 * object`.
pub fn predicted_measurement(values: &GraphValues, robot: &VariableKey, landmark: &VariableKey) -> Result<Pose3> {
    Ok(relative_object_pose(values.get(robot)?, values.get(landmark)?))
}
