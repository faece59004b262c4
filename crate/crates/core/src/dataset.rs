//! Text formats: pose-graph datasets, ground truth and per-step estimates.
//!
//! One record per line, whitespace separated, `#` starts a comment:
//!
//! ```text
//! VERTEX_SE3:QUAT    id tx ty tz qx qy qz qw
//! EDGE_SE3:QUAT      id_i id_j tx ty tz qx qy qz qw I11 I12 .. I16 I22 .. I66
//! MM_EDGE_SE3:QUAT   robot landmark N (tx ty tz qx qy qz qw) x N I11 .. I66
//! STEP_VERTEX        step id tx ty tz qx qy qz qw
//! ```
//!
//! Information entries are the upper triangle, row-major, in the
//! `[rotation | translation]` twist ordering. Ids below [`LANDMARK_ID_OFFSET`]
//! are robot poses; landmark `j` is written as `LANDMARK_ID_OFFSET + j`.
//! Quaternions are stored `qx qy qz qw` on disk. Floats use 17 significant
//! digits so that text round-trips are exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix6, Vector3};

use crate::error::{Error, Result};
use crate::eval::{RunEstimate, StepEstimate};
use crate::graph::{
    Factor, FactorGraph, GraphValues, Information, LandmarkFactor, MaxMixtureFactor,
    OdometryFactor, VariableKey, VariableKind,
};
use crate::pose::{Pose3, UnitQuaternion};

pub const LANDMARK_ID_OFFSET: u64 = 100_000;

pub const TAG_VERTEX: &str = "VERTEX_SE3:QUAT";
pub const TAG_EDGE: &str = "EDGE_SE3:QUAT";
pub const TAG_MM_EDGE: &str = "MM_EDGE_SE3:QUAT";
pub const TAG_STEP_VERTEX: &str = "STEP_VERTEX";

pub fn file_id(key: &VariableKey) -> Result<u64> {
    match key.kind {
        VariableKind::Robot if key.index < LANDMARK_ID_OFFSET => Ok(key.index),
        VariableKind::Landmark => key
            .index
            .checked_add(LANDMARK_ID_OFFSET)
            .ok_or_else(|| Error::invalid(format!("landmark index {} too large", key.index))),
        VariableKind::Robot => Err(Error::invalid(format!(
            "robot index {} collides with the landmark id range",
            key.index
        ))),
    }
}

pub fn key_from_file_id(id: u64) -> VariableKey {
    if id >= LANDMARK_ID_OFFSET {
        VariableKey::landmark(id - LANDMARK_ID_OFFSET)
    } else {
        VariableKey::robot(id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Vertex(VariableKey, Pose3),
    /// Odometry, landmark or max-mixture factor.
    Factor(Factor),
}

/// Ordered dataset records; the order fixes the solver's summation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push_vertex(&mut self, key: VariableKey, pose: Pose3) -> Result<()> {
        file_id(&key)?;
        self.records.push(Record::Vertex(key, pose));
        Ok(())
    }

    /// Priors and weighted mixtures have no record form and are rejected.
    pub fn push_factor(&mut self, factor: Factor) -> Result<()> {
        match &factor {
            Factor::Prior(_) => {
                return Err(Error::invalid("prior factors have no dataset record"));
            }
            Factor::MaxMixture(m) => {
                let w0 = m.weights()[0];
                if m.weights().iter().any(|w| *w != w0) {
                    return Err(Error::invalid(
                        "dataset mixtures carry uniform weights only",
                    ));
                }
            }
            _ => {}
        }
        for k in factor.keys() {
            file_id(&k)?;
        }
        self.records.push(Record::Factor(factor));
        Ok(())
    }

    /// Vertices in `values` order, then factors in graph order.
    pub fn from_graph(graph: &FactorGraph, values: &GraphValues) -> Result<Self> {
        let mut ds = Self::new();
        for (k, p) in values.iter() {
            ds.push_vertex(*k, *p)?;
        }
        for f in graph.factors() {
            ds.push_factor(f.clone())?;
        }
        Ok(ds)
    }

    pub fn graph(&self) -> FactorGraph {
        let mut g = FactorGraph::new();
        for r in &self.records {
            if let Record::Factor(f) = r {
                g.add(f.clone());
            }
        }
        g
    }

    /// Vertex values; a repeated id keeps its last value.
    pub fn values(&self) -> GraphValues {
        let mut v = GraphValues::new();
        for r in &self.records {
            if let Record::Vertex(k, p) = r {
                v.insert(*k, *p);
            }
        }
        v
    }
}

fn push_f64(out: &mut String, v: f64) {
    write!(out, " {v:.16e}").expect("writing to a String cannot fail");
}

fn push_pose(out: &mut String, p: &Pose3) {
    for v in p.translation.iter() {
        push_f64(out, *v);
    }
    let [w, x, y, z] = p.rotation.wxyz();
    for v in [x, y, z, w] {
        push_f64(out, v);
    }
}

fn push_information(out: &mut String, info: &Information) {
    let m = info.matrix();
    for i in 0..6 {
        for j in i..6 {
            push_f64(out, m[(i, j)]);
        }
    }
}

fn record_line(r: &Record) -> Result<String> {
    let mut out = String::new();
    match r {
        Record::Vertex(k, p) => {
            write!(out, "{TAG_VERTEX} {}", file_id(k)?).expect("String write");
            push_pose(&mut out, p);
        }
        Record::Factor(Factor::Odometry(o)) => {
            write!(out, "{TAG_EDGE} {} {}", file_id(&o.from)?, file_id(&o.to)?).expect("String write");
            push_pose(&mut out, &o.measurement);
            push_information(&mut out, &o.information);
        }
        Record::Factor(Factor::Landmark(l)) => {
            write!(out, "{TAG_EDGE} {} {}", file_id(&l.robot)?, file_id(&l.landmark)?)
                .expect("String write");
            push_pose(&mut out, &l.measurement);
            push_information(&mut out, &l.information);
        }
        Record::Factor(Factor::MaxMixture(m)) => {
            write!(
                out,
                "{TAG_MM_EDGE} {} {} {}",
                file_id(&m.robot)?,
                file_id(&m.landmark)?,
                m.len()
            )
            .expect("String write");
            for z in m.measurements() {
                push_pose(&mut out, z);
            }
            push_information(&mut out, &m.information);
        }
        Record::Factor(Factor::Prior(_)) => {
            return Err(Error::invalid("prior factors have no dataset record"));
        }
    }
    Ok(out)
}

/// Canonical text, one line per record in insertion order.
pub fn serialize_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    for r in &ds.records {
        // push_* validated every record
        out.push_str(&record_line(r).expect("records are validated on insertion"));
        out.push('\n');
    }
    out
}

/// Token cursor over one line with line-numbered errors.
struct Fields<'a> {
    line: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.tokens
            .next()
            .ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let t = self.next(what)?;
        let v: f64 = t
            .parse()
            .map_err(|_| self.err(format!("{what}: '{t}' is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(format!("{what}: '{t}' is not finite")));
        }
        Ok(v)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let t = self.next(what)?;
        t.parse()
            .map_err(|_| self.err(format!("{what}: '{t}' is not a nonnegative integer")))
    }

    fn pose(&mut self) -> Result<Pose3> {
        let t = Vector3::new(self.f64("tx")?, self.f64("ty")?, self.f64("tz")?);
        let (x, y, z, w) = (self.f64("qx")?, self.f64("qy")?, self.f64("qz")?, self.f64("qw")?);
        let q = UnitQuaternion::from_wxyz(w, x, y, z).map_err(|e| self.err(e.to_string()))?;
        Ok(Pose3::new(q, t))
    }

    fn information(&mut self) -> Result<Information> {
        let mut m = Matrix6::zeros();
        for i in 0..6 {
            for j in i..6 {
                let v = self.f64("information entry")?;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Information::new(m).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {}: {msg}", self.line)),
            other => other,
        })
    }

    fn finish(mut self) -> Result<()> {
        match self.tokens.next() {
            Some(t) => Err(self.err(format!("unexpected trailing field '{t}'"))),
            None => Ok(()),
        }
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let body = raw.split('#').next().unwrap_or("").trim();
        (!body.is_empty()).then_some((i + 1, body))
    })
}

fn relative_factor(from: VariableKey, to: VariableKey, z: Pose3, info: Information, line: usize) -> Result<Factor> {
    let wrap = |e: Error| match e {
        Error::InvalidInput(message) => Error::Parse { line, message },
        other => other,
    };
    if from.is_robot() && to.is_robot() {
        Ok(OdometryFactor::new(from, to, z, info).map_err(wrap)?.into())
    } else {
        Ok(LandmarkFactor::new(from, to, z, info).map_err(wrap)?.into())
    }
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut ds = Dataset::new();
    for (line, body) in content_lines(text) {
        let mut f = Fields {
            line,
            tokens: body.split_whitespace(),
        };
        let tag = f.next("record tag")?;
        let record = match tag {
            TAG_VERTEX => {
                let key = key_from_file_id(f.u64("vertex id")?);
                let pose = f.pose()?;
                Record::Vertex(key, pose)
            }
            TAG_EDGE => {
                let from = key_from_file_id(f.u64("edge source id")?);
                let to = key_from_file_id(f.u64("edge target id")?);
                let z = f.pose()?;
                let info = f.information()?;
                Record::Factor(relative_factor(from, to, z, info, line)?)
            }
            TAG_MM_EDGE => {
                let robot = key_from_file_id(f.u64("robot id")?);
                let landmark = key_from_file_id(f.u64("landmark id")?);
                let n = f.u64("hypothesis count")? as usize;
                if n == 0 {
                    return Err(f.err("hypothesis count must be at least 1"));
                }
                let zs = (0..n).map(|_| f.pose()).collect::<Result<Vec<_>>>()?;
                let info = f.information()?;
                let factor = MaxMixtureFactor::new(robot, landmark, zs, info).map_err(|e| match e {
                    Error::InvalidInput(message) => Error::Parse { line, message },
                    other => other,
                })?;
                Record::Factor(factor.into())
            }
            other => return Err(f.err(format!("unknown record tag '{other}'"))),
        };
        f.finish()?;
        match record {
            Record::Vertex(k, p) => ds.push_vertex(k, p),
            Record::Factor(fac) => ds.push_factor(fac),
        }
        .map_err(|e| match e {
            Error::InvalidInput(message) => Error::Parse { line, message },
            other => other,
        })?;
    }
    Ok(ds)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Step `t` lists robot `t` and every landmark estimated after that step;
/// the final estimate follows as vertex records.
pub fn serialize_estimate(est: &RunEstimate) -> Result<String> {
    let mut out = String::new();
    for (t, step) in est.steps.iter().enumerate() {
        let mut line = format!("{TAG_STEP_VERTEX} {t} {t}");
        push_pose(&mut line, &step.robot);
        out.push_str(&line);
        out.push('\n');
        for (id, p) in &step.landmarks {
            let mut line = format!(
                "{TAG_STEP_VERTEX} {t} {}",
                file_id(&VariableKey::landmark(*id as u64))?
            );
            push_pose(&mut line, p);
            out.push_str(&line);
            out.push('\n');
        }
    }
    for (k, p) in est.final_values.iter() {
        out.push_str(&record_line(&Record::Vertex(*k, *p))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_estimate(text: &str) -> Result<RunEstimate> {
    let mut steps: Vec<(Option<Pose3>, BTreeMap<u32, Pose3>)> = Vec::new();
    let mut final_values = GraphValues::new();
    for (line, body) in content_lines(text) {
        let mut f = Fields {
            line,
            tokens: body.split_whitespace(),
        };
        match f.next("record tag")? {
            TAG_STEP_VERTEX => {
                let t = f.u64("step")? as usize;
                let key = key_from_file_id(f.u64("vertex id")?);
                let pose = f.pose()?;
                f.finish()?;
                if t + 1 == steps.len() + 1 {
                    steps.push((None, BTreeMap::new()));
                } else if t + 1 != steps.len() {
                    return Err(Error::Parse {
                        line,
                        message: format!("step {t} out of order"),
                    });
                }
                let entry = steps.last_mut().expect("step just ensured");
                match key.kind {
                    VariableKind::Robot if key.index == t as u64 => entry.0 = Some(pose),
                    VariableKind::Robot => {
                        return Err(Error::Parse {
                            line,
                            message: format!("step {t} lists robot {}", key.index),
                        })
                    }
                    VariableKind::Landmark => {
                        entry.1.insert(key.index as u32, pose);
                    }
                }
            }
            TAG_VERTEX => {
                let key = key_from_file_id(f.u64("vertex id")?);
                let pose = f.pose()?;
                f.finish()?;
                final_values.insert(key, pose);
            }
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown record tag '{other}'"),
                })
            }
        }
    }
    let steps = steps
        .into_iter()
        .enumerate()
        .map(|(t, (robot, landmarks))| {
            robot
                .map(|robot| StepEstimate { robot, landmarks })
                .ok_or_else(|| Error::invalid(format!("step {t} has no robot pose")))
        })
        .collect::<Result<_>>()?;
    Ok(RunEstimate {
        steps,
        final_values,
    })
}
