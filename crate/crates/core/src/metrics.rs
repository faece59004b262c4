//! Point-set pose metrics (ADD, ADD-S), winner-takes-all hypothesis scoring
//! and the thresholded area-under-curve summary.
//!
//! All distances are in meters.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::pose::Pose3;

/// Default AUC threshold: 10 cm.
pub const DEFAULT_AUC_THRESHOLD: f64 = 0.10;

/// Default cap on the number of model points used by the O(n^2) ADD-S search.
pub const DEFAULT_ADDS_POINT_CAP: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    pub id: u32,
    pub name: String,
    points: Vec<Vector3<f64>>,
}

impl ObjectModel {
    pub fn new(id: u32, name: impl Into<String>, points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("object model has no points"));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("object model has non-finite coordinates"));
        }
        Ok(Self {
            id,
            name: name.into(),
            points,
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when the model spans 3D (at least 4 non-coplanar points), the
    /// condition under which ADD separates all distinct poses.
    pub fn is_discriminative(&self) -> bool {
        if self.points.len() < 4 {
            return false;
        }
        let centroid = self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64;
        let mut scatter = nalgebra::Matrix3::zeros();
        for p in &self.points {
            let d = p - centroid;
            scatter += d * d.transpose();
        }
        let eig = scatter.symmetric_eigenvalues();
        let max = eig.max();
        max > 0.0 && eig.min() > 1e-12 * max
    }

    /// Parses whitespace-separated `x y z` lines; `#` starts a comment.
    pub fn from_xyz_str(id: u32, name: impl Into<String>, text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: format!("bad coordinate: {e}"),
                })?;
            if vals.len() != 3 {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected 3 coordinates, found {}", vals.len()),
                });
            }
            points.push(Vector3::new(vals[0], vals[1], vals[2]));
        }
        Self::new(id, name, points)
    }

    pub fn read_xyz(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_xyz_str(0, name, &text)
    }
}

/// N candidate object poses (object in camera frame) for one detection.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub object_id: u32,
    hypotheses: Vec<Pose3>,
    weights: Vec<f64>,
}

impl HypothesisSet {
    pub fn uniform(object_id: u32, hypotheses: Vec<Pose3>) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(Error::invalid("hypothesis set is empty"));
        }
        let w = 1.0 / hypotheses.len() as f64;
        let weights = vec![w; hypotheses.len()];
        Ok(Self {
            object_id,
            hypotheses,
            weights,
        })
    }

    /// Weights are normalized to sum to one.
    pub fn with_weights(object_id: u32, hypotheses: Vec<Pose3>, weights: Vec<f64>) -> Result<Self> {
        let weights = normalize_weights(&weights, hypotheses.len())?;
        Ok(Self {
            object_id,
            hypotheses,
            weights,
        })
    }

    pub fn hypotheses(&self) -> &[Pose3] {
        &self.hypotheses
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

pub(crate) fn normalize_weights(weights: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("at least one component is required"));
    }
    if weights.len() != n {
        return Err(Error::invalid(format!(
            "{} weights given for {n} components",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::invalid("weights sum to zero"));
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Add,
    AddS,
}

impl Metric {
    pub fn evaluate(self, est: &Pose3, gt: &Pose3, model: &ObjectModel) -> Result<f64> {
        match self {
            Metric::Add => add_error(est, gt, model),
            Metric::AddS => adds_error(est, gt, model),
        }
    }
}

pub fn add_error(est: &Pose3, gt: &Pose3, model: &ObjectModel) -> Result<f64> {
    let pts = model.points();
    if pts.is_empty() {
        return Err(Error::invalid("empty object model"));
    }
    let sum: f64 = pts
        .iter()
        .map(|x| (est.transform_point(x) - gt.transform_point(x)).norm())
        .sum();
    Ok(sum / pts.len() as f64)
}

pub fn adds_error(est: &Pose3, gt: &Pose3, model: &ObjectModel) -> Result<f64> {
    adds_error_capped(est, gt, model, DEFAULT_ADDS_POINT_CAP)
}

/// ADD-S with the model uniformly subsampled (fixed stride) to at most `cap`
/// points. Exact when the model is no larger than `cap`.
pub fn adds_error_capped(est: &Pose3, gt: &Pose3, model: &ObjectModel, cap: usize) -> Result<f64> {
    let pts = model.points();
    if pts.is_empty() {
        return Err(Error::invalid("empty object model"));
    }
    if cap == 0 {
        return Err(Error::invalid("ADD-S point cap must be positive"));
    }
    let stride = pts.len().div_ceil(cap);
    let sample: Vec<&Vector3<f64>> = pts.iter().step_by(stride).collect();
    let est_pts: Vec<Vector3<f64>> = sample.iter().map(|x| est.transform_point(x)).collect();
    let gt_pts: Vec<Vector3<f64>> = sample.iter().map(|x| gt.transform_point(x)).collect();
    let sum: f64 = est_pts
        .iter()
        .map(|a| {
            gt_pts
                .iter()
                .map(|b| (a - b).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Ok(sum / est_pts.len() as f64)
}

/// Winner-takes-all: index and value of the hypothesis with the lowest metric.
/// Ties go to the lowest index.
pub fn best_hypothesis(
    hyps: &HypothesisSet,
    gt: &Pose3,
    model: &ObjectModel,
    metric: Metric,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, h) in hyps.hypotheses().iter().enumerate() {
        let e = metric.evaluate(h, gt, model)?;
        if best.map_or(true, |(_, b)| e < b) {
            best = Some((j, e));
        }
    }
    best.ok_or_else(|| Error::invalid("hypothesis set is empty"))
}

/// Normalized area under the accuracy-vs-threshold curve on `[0, threshold]`,
/// in closed form: `mean(1 - min(e, threshold) / threshold)`.
pub fn auc(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("AUC needs at least one error sample"));
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::invalid(format!("AUC threshold {threshold} must be positive")));
    }
    if errors.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::invalid("AUC errors must be finite and nonnegative"));
    }
    let sum: f64 = errors.iter().map(|e| 1.0 - e.min(threshold) / threshold).sum();
    Ok(sum / errors.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::UnitQuaternion;

    fn tetra() -> ObjectModel {
        ObjectModel::new(
            1,
            "tetra",
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.1, 0.0, 0.0),
                Vector3::new(0.0, 0.1, 0.0),
                Vector3::new(0.0, 0.0, 0.1),
            ],
        )
        .unwrap()
    }

    #[test]
    fn add_of_translation_offset_is_offset_norm() {
        let gt = Pose3::new(
            UnitQuaternion::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.4),
            Vector3::new(0.2, 0.0, 1.0),
        );
        let d = Vector3::new(0.03, -0.04, 0.0);
        let est = Pose3::new(gt.rotation, gt.translation + d);
        let e = add_error(&est, &gt, &tetra()).unwrap();
        assert!((e - 0.05).abs() < 1e-15);
        assert_eq!(add_error(&gt, &gt, &tetra()).unwrap(), 0.0);
        assert_eq!(adds_error(&gt, &gt, &tetra()).unwrap(), 0.0);
    }

    #[test]
    fn empty_model_rejected() {
        assert!(ObjectModel::new(0, "empty", vec![]).is_err());
        assert!(auc(&[], 0.1).is_err());
    }

    #[test]
    fn square_quarter_turn_has_zero_adds() {
        let h = 0.05;
        let square = ObjectModel::new(
            2,
            "square",
            vec![
                Vector3::new(h, h, 0.0),
                Vector3::new(-h, h, 0.0),
                Vector3::new(-h, -h, 0.0),
                Vector3::new(h, -h, 0.0),
            ],
        )
        .unwrap();
        assert!(!square.is_discriminative());
        let gt = Pose3::from_translation(Vector3::new(0.0, 0.0, 0.8));
        let turn = Pose3::from_rotation(UnitQuaternion::from_axis_angle(
            &Vector3::z(),
            std::f64::consts::FRAC_PI_2,
        ));
        let est = gt.compose(&turn);
        assert!(adds_error(&est, &gt, &square).unwrap() < 1e-15);
        assert!(add_error(&est, &gt, &square).unwrap() > 0.05);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.0, 0.0], 0.1).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.3], 0.1).unwrap(), 0.0);
        assert_eq!(auc(&[0.05], DEFAULT_AUC_THRESHOLD).unwrap(), 0.5);
        assert!(auc(&[-0.01], 0.1).is_err());
    }

    #[test]
    fn best_hypothesis_finds_exact_member() {
        let gt = Pose3::from_translation(Vector3::new(0.0, 0.1, 0.5));
        let hyps = HypothesisSet::uniform(
            1,
            vec![
                Pose3::from_translation(Vector3::new(0.1, 0.1, 0.5)),
                Pose3::from_translation(Vector3::new(0.0, 0.2, 0.5)),
                gt,
                Pose3::identity(),
            ],
        )
        .unwrap();
        assert_eq!(best_hypothesis(&hyps, &gt, &tetra(), Metric::Add).unwrap(), (2, 0.0));

        let single = HypothesisSet::uniform(1, vec![Pose3::identity()]).unwrap();
        let (j, e) = best_hypothesis(&single, &gt, &tetra(), Metric::AddS).unwrap();
        assert_eq!(j, 0);
        assert_eq!(e, adds_error(&Pose3::identity(), &gt, &tetra()).unwrap());
    }

    #[test]
    fn xyz_parsing() {
        let m = ObjectModel::from_xyz_str(3, "m", "# header\n0 0 0\n1 0 0 # tail\n\n0 1 0\n0 0 1\n")
            .unwrap();
        assert_eq!(m.len(), 4);
        assert!(m.is_discriminative());
        match ObjectModel::from_xyz_str(3, "m", "0 0\n") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weights_are_normalized() {
        let h = HypothesisSet::with_weights(0, vec![Pose3::identity(); 2], vec![2.0, 6.0]).unwrap();
        assert_eq!(h.weights(), &[0.25, 0.75]);
        assert!(HypothesisSet::with_weights(0, vec![Pose3::identity()], vec![-1.0]).is_err());
        assert!(HypothesisSet::uniform(0, vec![]).is_err());
    }
}
