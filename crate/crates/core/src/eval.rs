//! Baseline strategies for multi-hypothesis measurements and the error
//! reports used to compare them against max-mixture inference.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{Matrix4, SymmetricEigen, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{
    Factor, GraphValues, Information, MaxMixtureFactor, PriorFactor, VariableKey, VariableKind,
};
use crate::metrics::HypothesisSet;
use crate::pose::{chordal_distance, rotation_angular_distance, Pose3, UnitQuaternion};
use crate::sim::{run_simulation, SimConfig, SimOutput};
use crate::solver::{incremental_solve_with, SolverConfig, TimeStep};

/// Sigma (rad and m) of the prior that anchors the first robot pose.
pub const ANCHOR_SIGMA: f64 = 1e-3;
/// Mixed into the run seed for the random-selection stream.
const RANDOM_SELECT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    MaxMixture,
    Average,
    RandomSelect,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::MaxMixture,
        StrategyKind::Average,
        StrategyKind::RandomSelect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::MaxMixture => "maxmix",
            StrategyKind::Average => "average",
            StrategyKind::RandomSelect => "random",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy '{s}'")))
    }
}

/// Weighted chordal-L2 mean of unit quaternions: the unit `q` maximizing
/// `sum w_j <q, q_j>^2`, i.e. the top eigenvector of `sum w_j q_j q_j^T`.
///
/// When the top eigenvalue is repeated, the sum of the hemisphere-normalized
/// members is projected onto its eigenspace, which keeps the result
/// independent of member order and sign.
pub fn chordal_l2_mean(quats: &[UnitQuaternion], weights: &[f64]) -> Result<UnitQuaternion> {
    if quats.is_empty() || quats.len() != weights.len() {
        return Err(Error::invalid("rotation mean needs matching, nonempty inputs"));
    }
    let vecs: Vec<Vector4<f64>> = quats.iter().map(|q| Vector4::from(q.wxyz())).collect();
    let mut m = Matrix4::zeros();
    for (v, w) in vecs.iter().zip(weights) {
        m += *w * v * v.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.max();
    let tol = 1e-12 * top.abs().max(1.0);
    let mut projector = Matrix4::zeros();
    let mut best = (f64::NEG_INFINITY, Vector4::zeros());
    for i in 0..4 {
        let v = eig.eigenvectors.column(i).into_owned();
        if top - eig.eigenvalues[i] <= tol {
            projector += v * v.transpose();
        }
        if eig.eigenvalues[i] > best.0 {
            best = (eig.eigenvalues[i], v);
        }
    }
    let sum: Vector4<f64> = vecs.iter().zip(weights).map(|(v, w)| *w * v).sum();
    let projected = projector * sum;
    let q = if projected.norm() > 1e-9 * sum.norm().max(1e-300) {
        projected
    } else {
        best.1
    };
    UnitQuaternion::from_wxyz(q[0], q[1], q[2], q[3])
}

/// Weighted mean translation and chordal-L2 mean rotation of the set.
pub fn baseline_average(h: &HypothesisSet) -> Result<Pose3> {
    let poses = h.hypotheses();
    let weights = h.weights();
    let rotations: Vec<UnitQuaternion> = poses.iter().map(|p| p.rotation).collect();
    let rotation = chordal_l2_mean(&rotations, weights)?;
    let total: f64 = weights.iter().sum();
    let translation: Vector3<f64> = poses
        .iter()
        .zip(weights)
        .map(|(p, w)| *w * p.translation)
        .sum::<Vector3<f64>>()
        / total;
    Ok(Pose3::new(rotation, translation))
}

/// Uniformly chosen member; draws one integer from `rng`.
pub fn baseline_random(h: &HypothesisSet, rng: &mut impl Rng) -> Pose3 {
    h.hypotheses()[rng.gen_range(0..h.len())]
}

/// Landmark key of simulated object `id`.
pub fn landmark_key(id: u32) -> VariableKey {
    VariableKey::landmark(id as u64)
}

/// Generator behind the random-selection baseline for run `seed`.
pub fn strategy_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ RANDOM_SELECT_SALT)
}

/// Applies `strategy` to one multi-hypothesis factor. Baselines reduce it to
/// a single component; only random selection draws from `rng`.
pub fn collapse_mixture(
    factor: &MaxMixtureFactor,
    strategy: StrategyKind,
    rng: &mut impl Rng,
) -> Result<MaxMixtureFactor> {
    let set = || {
        HypothesisSet::with_weights(
            factor.landmark.index as u32,
            factor.measurements().to_vec(),
            factor.weights().to_vec(),
        )
    };
    let z = match strategy {
        StrategyKind::MaxMixture => return Ok(factor.clone()),
        StrategyKind::Average => baseline_average(&set()?)?,
        StrategyKind::RandomSelect => baseline_random(&set()?, rng),
    };
    MaxMixtureFactor::new(factor.robot, factor.landmark, vec![z], factor.information)
}

/// Factor stream for one strategy. Step `k` holds the odometry into frame
/// `k` (a prior anchoring the ground-truth first pose at step 0) followed by
/// one factor per observation. Baselines collapse each set to a
/// single-component factor before it enters the graph.
pub fn build_stream(sim: &SimOutput, strategy: StrategyKind, seed: u64) -> Result<Vec<TimeStep>> {
    let anchor = Information::from_sigmas(ANCHOR_SIGMA, ANCHOR_SIGMA)?;
    let mut rng = strategy_rng(seed);
    let mut stream = Vec::with_capacity(sim.trajectory.len());
    for (k, frame) in sim.observations.iter().enumerate() {
        let mut factors: Vec<Factor> = Vec::with_capacity(frame.len() + 1);
        if k == 0 {
            factors.push(PriorFactor::new(VariableKey::robot(0), sim.trajectory[0], anchor).into());
        } else {
            factors.push(sim.odometry[k - 1].clone().into());
        }
        for obs in frame {
            let full = MaxMixtureFactor::with_weights(
                VariableKey::robot(k as u64),
                landmark_key(obs.landmark),
                obs.hypotheses.hypotheses().to_vec(),
                obs.hypotheses.weights().to_vec(),
                sim.measurement_information,
            )?;
            factors.push(collapse_mixture(&full, strategy, &mut rng)?.into());
        }
        stream.push(TimeStep { factors });
    }
    Ok(stream)
}

/// Ground-truth robot trajectory and landmark poses.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub trajectory: Vec<Pose3>,
    pub landmarks: BTreeMap<u32, Pose3>,
}

impl From<&SimOutput> for GroundTruth {
    fn from(sim: &SimOutput) -> Self {
        Self {
            trajectory: sim.trajectory.clone(),
            landmarks: sim.objects.iter().map(|o| (o.id, o.pose_in_world)).collect(),
        }
    }
}

/// Online estimate after one step: the newest robot pose and every landmark
/// initialized so far.
#[derive(Clone, Debug, PartialEq)]
pub struct StepEstimate {
    pub robot: Pose3,
    pub landmarks: BTreeMap<u32, Pose3>,
}

impl StepEstimate {
    pub fn from_values(step: usize, values: &GraphValues) -> Result<Self> {
        let robot = *values.get(&VariableKey::robot(step as u64))?;
        let landmarks = values
            .iter()
            .filter(|(k, _)| k.kind == VariableKind::Landmark)
            .map(|(k, p)| (k.index as u32, *p))
            .collect();
        Ok(Self { robot, landmarks })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunEstimate {
    pub steps: Vec<StepEstimate>,
    pub final_values: GraphValues,
}

/// Runs the incremental backend on one factor stream.
pub fn solve_stream(stream: &[TimeStep], config: &SolverConfig) -> Result<RunEstimate> {
    let mut steps = Vec::with_capacity(stream.len());
    let mut failure = None;
    let (_, final_values) = incremental_solve_with(stream, config, |t, v, _| {
        match StepEstimate::from_values(t, v) {
            Ok(s) => steps.push(s),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunEstimate {
        steps,
        final_values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    /// Rotation error (deg) of the newest robot pose at each step.
    pub frame_rot_err_deg: Vec<f64>,
    /// Translation error (m) of the newest robot pose at each step.
    pub frame_trans_err_m: Vec<f64>,
    pub rot_err_deg_running: Vec<f64>,
    pub trans_err_m_running: Vec<f64>,
    /// Mean chordal error over landmarks initialized so far; `None` before
    /// the first landmark.
    pub landmark_chordal_by_step: Vec<Option<f64>>,
    pub final_landmark_chordal: BTreeMap<u32, f64>,
    pub trajectory_rmse: f64,
}

impl ErrorReport {
    pub fn final_mean_landmark_chordal(&self) -> f64 {
        if self.final_landmark_chordal.is_empty() {
            return 0.0;
        }
        self.final_landmark_chordal.values().sum::<f64>() / self.final_landmark_chordal.len() as f64
    }
}

/// Prefix means: `out[k] = mean(xs[0..=k])`.
pub fn running_mean(xs: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    xs.iter()
        .enumerate()
        .map(|(k, x)| {
            sum += x;
            sum / (k + 1) as f64
        })
        .collect()
}

fn landmark_gt(gt: &GroundTruth, id: u32) -> Result<&Pose3> {
    gt.landmarks
        .get(&id)
        .ok_or_else(|| Error::invalid(format!("estimated landmark {id} has no ground truth")))
}

/// Errors of a run against ground truth, in the shared world frame (no
/// alignment; the anchor prior fixes the gauge).
pub fn evaluate_run(est: &RunEstimate, gt: &GroundTruth) -> Result<ErrorReport> {
    if est.steps.len() != gt.trajectory.len() {
        return Err(Error::invalid(format!(
            "{} estimated steps for {} ground-truth frames",
            est.steps.len(),
            gt.trajectory.len()
        )));
    }
    let mut rot = Vec::with_capacity(est.steps.len());
    let mut trans = Vec::with_capacity(est.steps.len());
    let mut by_step = Vec::with_capacity(est.steps.len());
    for (step, truth) in est.steps.iter().zip(&gt.trajectory) {
        rot.push(rotation_angular_distance(&step.robot, truth).to_degrees());
        trans.push((step.robot.translation - truth.translation).norm());
        if step.landmarks.is_empty() {
            by_step.push(None);
            continue;
        }
        let mut sum = 0.0;
        for (id, p) in &step.landmarks {
            sum += chordal_distance(p, landmark_gt(gt, *id)?);
        }
        by_step.push(Some(sum / step.landmarks.len() as f64));
    }

    let mut final_landmark_chordal = BTreeMap::new();
    let mut sq_sum = 0.0;
    let mut robots = 0usize;
    for (key, p) in est.final_values.iter() {
        match key.kind {
            VariableKind::Landmark => {
                let id = key.index as u32;
                final_landmark_chordal.insert(id, chordal_distance(p, landmark_gt(gt, id)?));
            }
            VariableKind::Robot => {
                let truth = gt.trajectory.get(key.index as usize).ok_or_else(|| {
                    Error::invalid(format!("estimated robot {} has no ground truth", key.index))
                })?;
                sq_sum += (p.translation - truth.translation).norm_squared();
                robots += 1;
            }
        }
    }
    if robots != gt.trajectory.len() {
        return Err(Error::invalid(format!(
            "final estimate has {robots} robot poses, ground truth has {}",
            gt.trajectory.len()
        )));
    }

    Ok(ErrorReport {
        rot_err_deg_running: running_mean(&rot),
        trans_err_m_running: running_mean(&trans),
        frame_rot_err_deg: rot,
        frame_trans_err_m: trans,
        landmark_chordal_by_step: by_step,
        final_landmark_chordal,
        trajectory_rmse: (sq_sum / robots as f64).sqrt(),
    })
}

/// Hash of every measurement bit fed to the backend for one simulation.
pub fn measurement_checksum(sim: &SimOutput) -> u64 {
    let mut h = DefaultHasher::new();
    let pose = |h: &mut DefaultHasher, p: &Pose3| {
        for v in p.rotation.wxyz().iter().chain(p.translation.iter()) {
            h.write_u64(v.to_bits());
        }
    };
    for o in &sim.odometry {
        pose(&mut h, &o.measurement);
    }
    for (k, frame) in sim.observations.iter().enumerate() {
        for obs in frame {
            h.write_usize(k);
            h.write_u32(obs.landmark);
            for (p, w) in obs.hypotheses.hypotheses().iter().zip(obs.hypotheses.weights()) {
                pose(&mut h, p);
                h.write_u64(w.to_bits());
            }
        }
    }
    h.finish()
}

/// Quartiles over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linearly interpolated quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(xs: &[f64]) -> Result<Quartiles> {
    if xs.is_empty() || xs.iter().any(|x| x.is_nan()) {
        return Err(Error::invalid("quartiles need nonempty, non-NaN data"));
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(Quartiles {
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub checksum: u64,
    pub report: ErrorReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategySummary {
    pub strategy: StrategyKind,
    pub final_landmark_chordal: Quartiles,
    pub trajectory_rmse: Quartiles,
    pub final_rot_err_deg_running: Quartiles,
    pub final_trans_err_m_running: Quartiles,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    /// Seed-major, strategies in [`StrategyKind::ALL`] order.
    pub runs: Vec<RunResult>,
    pub summaries: Vec<StrategySummary>,
}

impl Comparison {
    pub fn summary(&self, strategy: StrategyKind) -> &StrategySummary {
        self.summaries
            .iter()
            .find(|s| s.strategy == strategy)
            .expect("every strategy is summarized")
    }

    pub fn run(&self, strategy: StrategyKind, seed: u64) -> Option<&RunResult> {
        self.runs
            .iter()
            .find(|r| r.strategy == strategy && r.seed == seed)
    }
}

fn run_one(sim: &SimOutput, strategy: StrategyKind, seed: u64, solver: &SolverConfig) -> Result<RunResult> {
    let stream = build_stream(sim, strategy, seed)?;
    let est = solve_stream(&stream, solver)?;
    Ok(RunResult {
        strategy,
        seed,
        checksum: measurement_checksum(sim),
        report: evaluate_run(&est, &GroundTruth::from(sim))?,
    })
}

/// Simulates every seed once and runs all strategies on that one output.
/// (strategy, seed) runs are spread over the available cores; results are
/// ordered independently of scheduling.
pub fn compare_strategies(
    config: &SimConfig,
    seeds: &[u64],
    solver: &SolverConfig,
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::invalid("comparison needs at least one seed"));
    }
    let sims: Vec<SimOutput> = seeds
        .iter()
        .map(|&seed| run_simulation(&SimConfig { seed, ..config.clone() }))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, StrategyKind)> = (0..seeds.len())
        .flat_map(|i| StrategyKind::ALL.into_iter().map(move |s| (i, s)))
        .collect();
    let results: Vec<Mutex<Option<Result<RunResult>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(i, strategy)) = jobs.get(j) else { break };
                let r = run_one(&sims[i], strategy, seeds[i], solver);
                *results[j].lock().expect("no worker panics while holding the lock") = Some(r);
            });
        }
    });
    let runs: Vec<RunResult> = results
        .into_iter()
        .map(|m| m.into_inner().expect("lock not poisoned").expect("every job ran"))
        .collect::<Result<_>>()?;

    for chunk in runs.chunks(StrategyKind::ALL.len()) {
        if chunk.iter().any(|r| r.checksum != chunk[0].checksum) {
            return Err(Error::Validation("strategies saw different measurements".into()));
        }
    }

    let summaries = StrategyKind::ALL
        .into_iter()
        .map(|strategy| {
            let pick = |f: &dyn Fn(&ErrorReport) -> f64| -> Result<Quartiles> {
                let xs: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.strategy == strategy)
                    .map(|r| f(&r.report))
                    .collect();
                quartiles(&xs)
            };
            Ok(StrategySummary {
                strategy,
                final_landmark_chordal: pick(&|r| r.final_mean_landmark_chordal())?,
                trajectory_rmse: pick(&|r| r.trajectory_rmse)?,
                final_rot_err_deg_running: pick(&|r| *r.rot_err_deg_running.last().unwrap_or(&0.0))?,
                final_trans_err_m_running: pick(&|r| *r.trans_err_m_running.last().unwrap_or(&0.0))?,
            })
        })
        .collect::<Result<_>>()?;

    Ok(Comparison {
        seeds: seeds.to_vec(),
        runs,
        summaries,
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn frames_csv(report: &ErrorReport) -> String {
    let mut out = String::from("frame,rot_err_deg_running,trans_err_m_running\n");
    for (k, (r, t)) in report
        .rot_err_deg_running
        .iter()
        .zip(&report.trans_err_m_running)
        .enumerate()
    {
        out.push_str(&format!("{k},{r},{t}\n"));
    }
    out
}

/// Steps before the first landmark are omitted.
pub fn landmarks_csv(report: &ErrorReport) -> String {
    let mut out = String::from("timestep,mean_landmark_chordal\n");
    for (k, e) in report.landmark_chordal_by_step.iter().enumerate() {
        if let Some(e) = e {
            out.push_str(&format!("{k},{e}\n"));
        }
    }
    out
}

pub fn summary_csv(cmp: &Comparison) -> String {
    let mut out = String::from("strategy,metric,median,q1,q3\n");
    for s in &cmp.summaries {
        for (name, q) in [
            ("final_landmark_chordal", s.final_landmark_chordal),
            ("trajectory_rmse", s.trajectory_rmse),
            ("final_rot_err_deg_running", s.final_rot_err_deg_running),
            ("final_trans_err_m_running", s.final_trans_err_m_running),
        ] {
            out.push_str(&format!("{},{name},{},{},{}\n", s.strategy, q.median, q.q1, q.q3));
        }
    }
    out
}

/// Writes `<prefix>_frames.csv` and `<prefix>_landmarks.csv`.
pub fn write_report_csvs(report: &ErrorReport, prefix: &Path) -> Result<Vec<PathBuf>> {
    let frames = with_suffix(prefix, "_frames.csv");
    let landmarks = with_suffix(prefix, "_landmarks.csv");
    write_file(&frames, &frames_csv(report))?;
    write_file(&landmarks, &landmarks_csv(report))?;
    Ok(vec![frames, landmarks])
}

/// Per-run CSVs as `<prefix>_<strategy>_seed<S>_*.csv` plus `<prefix>_summary.csv`.
pub fn write_comparison(cmp: &Comparison, prefix: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for r in &cmp.runs {
        let run_prefix = with_suffix(prefix, &format!("_{}_seed{}", r.strategy, r.seed));
        written.extend(write_report_csvs(&r.report, &run_prefix)?);
    }
    let summary = with_suffix(prefix, "_summary.csv");
    write_file(&summary, &summary_csv(cmp))?;
    written.push(summary);
    Ok(written)
}
