//! Command-line driver: simulate, solve, eval, compare and metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{parse_estimate, read_dataset, serialize_dataset, serialize_estimate, write_text, Dataset, Record};
use crate::error::{Error, Result};
use crate::eval::{
    collapse_mixture, compare_strategies, evaluate_run, solve_stream, strategy_rng, summary_csv,
    write_comparison, write_report_csvs, GroundTruth, StrategyKind, ANCHOR_SIGMA,
};
use crate::graph::{Factor, Information, PriorFactor, VariableKey, VariableKind};
use crate::metrics::{auc, Metric, ObjectModel, DEFAULT_AUC_THRESHOLD};
use crate::pose::{Pose3, UnitQuaternion};
use crate::sim::{run_simulation, SimConfig, SimOutput};
use crate::solver::{SolverConfig, TimeStep};

#[derive(Debug, Parser)]
#[command(name = "mmslam", version, about = "Pose-graph SLAM with max-mixture object-pose factors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a run; write the dataset and its ground truth.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gt_out: PathBuf,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Incrementally solve a dataset; write per-step and final estimates.
    Solve {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "maxmix")]
        strategy: StrategyKind,
        #[arg(long)]
        out: PathBuf,
        /// Seeds the random-selection baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score an estimate file against ground truth; write CSV reports.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Simulate every seed, solve with every strategy, write CSVs.
    Compare {
        /// A count K (seeds 1..=K) or a comma-separated seed list.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out_prefix: PathBuf,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// ADD or ADD-S per pose pair, then AUC.
    Metrics {
        /// Whitespace-separated `x y z` point per line.
        #[arg(long)]
        model: PathBuf,
        /// One pair per line: estimate then ground truth, each `tx ty tz qx qy qz qw`.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long, default_value_t = DEFAULT_AUC_THRESHOLD)]
        auc_threshold: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MetricArg {
    Add,
    Adds,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Add => Metric::Add,
            MetricArg::Adds => Metric::AddS,
        }
    }
}

/// Simulation overrides; unset flags keep the defaults.
#[derive(Clone, Debug, Default, Args)]
pub struct SimFlags {
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub n_hyp: Option<usize>,
    #[arg(long)]
    pub p_cov: Option<f64>,
    #[arg(long)]
    pub p_spur: Option<f64>,
    #[arg(long)]
    pub meas_sigma_rot: Option<f64>,
    #[arg(long)]
    pub meas_sigma_trans: Option<f64>,
    #[arg(long)]
    pub odom_sigma_rot: Option<f64>,
    #[arg(long)]
    pub odom_sigma_trans: Option<f64>,
}

impl SimFlags {
    pub fn config(&self, seed: u64) -> SimConfig {
        let d = SimConfig::default();
        SimConfig {
            seed,
            frame_count: self.frames.unwrap_or(d.frame_count),
            n_hypotheses: self.n_hyp.unwrap_or(d.n_hypotheses),
            p_cov: self.p_cov.unwrap_or(d.p_cov),
            p_spur: self.p_spur.unwrap_or(d.p_spur),
            meas_sigma_rot: self.meas_sigma_rot.unwrap_or(d.meas_sigma_rot),
            meas_sigma_trans: self.meas_sigma_trans.unwrap_or(d.meas_sigma_trans),
            odom_sigma_rot: self.odom_sigma_rot.unwrap_or(d.odom_sigma_rot),
            odom_sigma_trans: self.odom_sigma_trans.unwrap_or(d.odom_sigma_trans),
            ..d
        }
    }
}

pub fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    let bad = || Error::invalid(format!("bad seed list '{list}'"));
    let seeds = if list.contains(',') {
        list.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<Vec<u64>>>()?
    } else {
        let k: u64 = list.trim().parse().map_err(|_| bad())?;
        (1..=k).collect()
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

/// Dataset of a simulated run. Robot vertices hold dead-reckoned poses from
/// the true first pose; landmarks are implicit.
pub fn simulation_dataset(sim: &SimOutput) -> Result<Dataset> {
    let mut ds = Dataset::new();
    let mut pose = sim.trajectory[0];
    for (k, frame) in sim.observations.iter().enumerate() {
        if k > 0 {
            let odo = &sim.odometry[k - 1];
            pose = pose.compose(&odo.measurement);
            ds.push_vertex(VariableKey::robot(k as u64), pose)?;
            ds.push_factor(odo.clone().into())?;
        } else {
            ds.push_vertex(VariableKey::robot(0), pose)?;
        }
        for obs in frame {
            let f = crate::graph::MaxMixtureFactor::with_weights(
                VariableKey::robot(k as u64),
                crate::eval::landmark_key(obs.landmark),
                obs.hypotheses.hypotheses().to_vec(),
                obs.hypotheses.weights().to_vec(),
                sim.measurement_information,
            )?;
            ds.push_factor(f.into())?;
        }
    }
    Ok(ds)
}

pub fn ground_truth_dataset(sim: &SimOutput) -> Result<Dataset> {
    let mut ds = Dataset::new();
    for (k, p) in sim.trajectory.iter().enumerate() {
        ds.push_vertex(VariableKey::robot(k as u64), *p)?;
    }
    for o in &sim.objects {
        ds.push_vertex(crate::eval::landmark_key(o.id), o.pose_in_world)?;
    }
    Ok(ds)
}

pub fn ground_truth_from_dataset(ds: &Dataset) -> Result<GroundTruth> {
    let mut robots = BTreeMap::new();
    let mut landmarks = BTreeMap::new();
    for r in ds.records() {
        match r {
            Record::Vertex(k, p) if k.kind == VariableKind::Robot => {
                robots.insert(k.index, *p);
            }
            Record::Vertex(k, p) => {
                let id = u32::try_from(k.index)
                    .map_err(|_| Error::invalid(format!("landmark {} out of range", k.index)))?;
                landmarks.insert(id, *p);
            }
            Record::Factor(_) => {}
        }
    }
    if robots.keys().enumerate().any(|(i, k)| i as u64 != *k) {
        return Err(Error::invalid("ground-truth robot ids must be 0..M-1"));
    }
    Ok(GroundTruth {
        trajectory: robots.into_values().collect(),
        landmarks,
    })
}

/// Step `t` collects, in file order, every factor whose highest robot index
/// is `t`. Step 0 starts with a prior anchoring robot 0 at its vertex value
/// (identity when absent).
pub fn stream_from_dataset(ds: &Dataset, strategy: StrategyKind, seed: u64) -> Result<Vec<TimeStep>> {
    let values = ds.values();
    let anchor_pose = values.try_get(&VariableKey::robot(0)).copied().unwrap_or_else(Pose3::identity);
    let anchor = Information::from_sigmas(ANCHOR_SIGMA, ANCHOR_SIGMA)?;
    let mut steps: Vec<Vec<Factor>> = vec![vec![PriorFactor::new(VariableKey::robot(0), anchor_pose, anchor).into()]];
    let mut rng = strategy_rng(seed);
    for r in ds.records() {
        let Record::Factor(f) = r else { continue };
        let t = f
            .keys()
            .iter()
            .filter(|k| k.is_robot())
            .map(|k| k.index as usize)
            .max()
            .ok_or_else(|| Error::invalid("factor without a robot pose"))?;
        if steps.len() <= t {
            steps.resize_with(t + 1, Vec::new);
        }
        let f = match f {
            Factor::MaxMixture(m) => collapse_mixture(m, strategy, &mut rng)?.into(),
            other => other.clone(),
        };
        steps[t].push(f);
    }
    for (t, factors) in steps.iter().enumerate().skip(1) {
        let touches = factors
            .iter()
            .any(|f| f.keys().contains(&VariableKey::robot(t as u64)));
        if !touches {
            return Err(Error::invalid(format!("robot {t} has no factor linking it to the graph")));
        }
    }
    Ok(steps.into_iter().map(|factors| TimeStep { factors }).collect())
}

/// Pose pairs, `est gt` per line, each `tx ty tz qx qy qz qw`.
pub fn parse_pairs(text: &str) -> Result<Vec<(Pose3, Pose3)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let v = body
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("'{t}' is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != 14 {
            return Err(err(format!("expected 14 fields, found {}", v.len())));
        }
        let pose = |s: &[f64]| -> Result<Pose3> {
            let q = UnitQuaternion::from_wxyz(s[6], s[3], s[4], s[5]).map_err(|e| err(e.to_string()))?;
            Ok(Pose3::new(q, nalgebra::Vector3::new(s[0], s[1], s[2])))
        };
        pairs.push((pose(&v[..7])?, pose(&v[7..])?));
    }
    Ok(pairs)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn say(out: &mut impl Write, line: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Simulate { seed, out: path, gt_out, sim } => {
            let output = run_simulation(&sim.config(seed))?;
            write_text(&path, &serialize_dataset(&simulation_dataset(&output)?))?;
            write_text(&gt_out, &serialize_dataset(&ground_truth_dataset(&output)?))?;
            say(out, format_args!("wrote {} and {}", path.display(), gt_out.display()))
        }
        Command::Solve { input, strategy, out: path, seed } => {
            let ds = read_dataset(&input)?;
            let stream = stream_from_dataset(&ds, strategy, seed)?;
            let est = solve_stream(&stream, &SolverConfig::default())?;
            write_text(&path, &serialize_estimate(&est)?)?;
            say(out, format_args!("{strategy}: {} steps, wrote {}", est.steps.len(), path.display()))
        }
        Command::Eval { est, gt, out_prefix } => {
            let est = parse_estimate(&read_text(&est)?)?;
            let gt = ground_truth_from_dataset(&read_dataset(&gt)?)?;
            let report = evaluate_run(&est, &gt)?;
            write_report_csvs(&report, &out_prefix)?;
            say(
                out,
                format_args!(
                    "trajectory_rmse {:.6} final_mean_landmark_chordal {:.6}",
                    report.trajectory_rmse,
                    report.final_mean_landmark_chordal()
                ),
            )
        }
        Command::Compare { seeds, out_prefix, sim } => {
            let seeds = parse_seeds(&seeds)?;
            let cmp = compare_strategies(&sim.config(0), &seeds, &SolverConfig::default())?;
            write_comparison(&cmp, &out_prefix)?;
            out.write_all(summary_csv(&cmp).as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
        Command::Metrics { model, pairs, metric, auc_threshold } => {
            let model = ObjectModel::read_xyz(&model)?;
            let pairs = parse_pairs(&read_text(&pairs)?)?;
            let metric = Metric::from(metric);
            let errors = pairs
                .iter()
                .map(|(e, g)| metric.evaluate(e, g, &model))
                .collect::<Result<Vec<_>>>()?;
            for (i, e) in errors.iter().enumerate() {
                say(out, format_args!("pair {i} {e:.9}"))?;
            }
            say(out, format_args!("AUC {}", auc(&errors, auc_threshold)?))
        }
    }
}
