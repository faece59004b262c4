//! Levenberg-Marquardt on the pose manifold with per-iteration max-mixture
//! component reselection, plus a warm-started incremental driver.
//!
//! Each outer iteration reselects the active component of every max-mixture
//! factor at the current estimate, linearizes, solves the damped sparse
//! normal equations and retracts with `x <- exp(d) * x`. A step is accepted
//! only if the total error (mixtures evaluated at their best component)
//! decreases.

use std::collections::HashMap;

use indexmap::IndexMap;

use nalgebra::{DVector, Matrix6, Vector6};
use faer::dyn_stack::{GlobalPodBuffer, PodStack};
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, LltRegularization, SymbolicCholesky,
    SymmetricOrdering,
};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::{Col, Conj, Parallelism, Side};

use crate::error::{Error, Result};
use crate::graph::{Factor, FactorGraph, GraphValues, Linearized, VariableKey};
use crate::pose::{Pose3, Twist};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum JacobianMode {
    #[default]
    Analytic,
    /// Central finite differences.
    Numeric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Stop when an accepted step lowers the error by less than this.
    pub convergence_tol_abs: f64,
    /// Stop when an accepted step lowers the error by less than this fraction.
    pub convergence_tol_rel: f64,
    /// Rejected steps tolerated within one iteration before giving up.
    pub max_inner_retries: usize,
    pub jacobians: JacobianMode,
    /// Observation frames buffered before a new landmark is initialized by
    /// consensus over all of them; 1 initializes at the first observation.
    pub landmark_init_frames: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.5,
            convergence_tol_abs: 1e-8,
            convergence_tol_rel: 1e-10,
            max_inner_retries: 10,
            jacobians: JacobianMode::Analytic,
            landmark_init_frames: 3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_iterations > 0
            && self.initial_damping > 0.0
            && self.damping_up > 1.0
            && self.damping_down > 0.0
            && self.damping_down < 1.0
            && self.convergence_tol_abs > 0.0
            && self.convergence_tol_abs < 1.0
            && self.convergence_tol_rel > 0.0
            && self.convergence_tol_rel < 1.0
            && self.max_inner_retries > 0
            && self.landmark_init_frames > 0;
        if positive {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid solver configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveStats {
    /// Outer iterations performed.
    pub iterations: usize,
    pub final_error: f64,
    /// Initial error followed by the error after every accepted step.
    pub error_history: Vec<f64>,
    /// Active component of every max-mixture factor (graph order), one entry
    /// per outer iteration.
    pub active_history: Vec<Vec<usize>>,
    /// Active components re-evaluated at the returned estimate.
    pub final_assignment: Vec<usize>,
    pub converged: bool,
}

/// Fixed sparsity structure of the normal equations for one graph.
struct NormalStructure {
    order: Vec<VariableKey>,
    index: HashMap<VariableKey, usize>,
    /// Per factor, slot of each (row >= col) block pair touched by it.
    factor_slots: Vec<Vec<(usize, usize, usize)>>,
    n_slots: usize,
    /// Per block column: (block row, slot, transposed) sorted by row.
    columns: Vec<Vec<(usize, usize, bool)>>,
    /// CSC value index of every scalar diagonal entry.
    diag_positions: Vec<usize>,
    pattern: SymbolicSparseColMat<usize>,
    symbolic: SymbolicCholesky<usize>,
}

impl NormalStructure {
    fn build(graph: &FactorGraph, values: &GraphValues) -> Result<Self> {
        // robots first, landmarks last: the landmark blocks then only fill
        // the trailing rows of the factor
        let mut referenced: HashMap<VariableKey, ()> = HashMap::new();
        for f in graph.factors() {
            for k in f.keys() {
                values.get(&k)?;
                referenced.insert(k, ());
            }
        }
        let mut order: Vec<VariableKey> = values
            .keys()
            .filter(|k| k.is_robot() && referenced.contains_key(k))
            .copied()
            .collect();
        order.extend(
            values
                .keys()
                .filter(|k| !k.is_robot() && referenced.contains_key(k))
                .copied(),
        );
        let index: HashMap<VariableKey, usize> =
            order.iter().enumerate().map(|(i, k)| (*k, i)).collect();

        let mut slot_of: HashMap<(usize, usize), usize> = HashMap::new();
        let mut factor_slots = Vec::with_capacity(graph.len());
        for i in 0..order.len() {
            slot_of.insert((i, i), i);
        }
        for f in graph.factors() {
            let idx: Vec<usize> = f.keys().iter().map(|k| index[k]).collect();
            let mut slots = Vec::new();
            // factor keys are distinct, so ia == ib only on the diagonal
            for (a, &ia) in idx.iter().enumerate() {
                for (b, &ib) in idx.iter().enumerate() {
                    if ia >= ib {
                        let next = slot_of.len();
                        let s = *slot_of.entry((ia, ib)).or_insert(next);
                        slots.push((a, b, s));
                    }
                }
            }
            factor_slots.push(slots);
        }

        let n = order.len();
        let mut columns: Vec<Vec<(usize, usize, bool)>> = vec![Vec::new(); n];
        for (&(r, c), &s) in &slot_of {
            columns[c].push((r, s, false));
            if r != c {
                columns[r].push((c, s, true));
            }
        }
        for col in &mut columns {
            col.sort_unstable_by_key(|e| e.0);
        }

        let dim = 6 * n;
        let mut offsets = Vec::with_capacity(dim + 1);
        let mut indices = Vec::new();
        let mut diag_positions = vec![0; dim];
        offsets.push(0);
        for (c, col) in columns.iter().enumerate() {
            for kc in 0..6 {
                for &(r, _, _) in col {
                    for ir in 0..6 {
                        if r == c && ir == kc {
                            diag_positions[6 * c + kc] = indices.len();
                        }
                        indices.push(6 * r + ir);
                    }
                }
                offsets.push(indices.len());
            }
        }
        let pattern = SymbolicSparseColMat::new_checked(dim, dim, offsets, None, indices);
        let symbolic = factorize_symbolic_cholesky(
            pattern.as_ref(),
            Side::Lower,
            SymmetricOrdering::Amd,
            CholeskySymbolicParams::default(),
        )
            .map_err(|e| Error::invalid(format!("normal-equation pattern: {e:?}")))?;
        Ok(Self {
            order,
            index,
            factor_slots,
            n_slots: slot_of.len(),
            columns,
            diag_positions,
            pattern,
            symbolic,
        })
    }

    fn dim(&self) -> usize {
        6 * self.order.len()
    }

    /// Accumulates `J^T J` blocks and `J^T r` in factor order.
    fn assemble(&self, lins: &[Linearized]) -> (Vec<f64>, DVector<f64>) {
        let mut blocks = vec![Matrix6::<f64>::zeros(); self.n_slots];
        let mut grad = DVector::zeros(self.dim());
        for (lin, slots) in lins.iter().zip(&self.factor_slots) {
            for &(a, b, s) in slots {
                // slot holds block (row a, col b) = J_a^T J_b
                blocks[s] += lin.blocks[a].1.transpose() * lin.blocks[b].1;
            }
            for (key, jac) in &lin.blocks {
                let i = self.index[key];
                let g: Vector6<f64> = jac.transpose() * lin.residual;
                let mut seg = grad.fixed_rows_mut::<6>(6 * i);
                seg += g;
            }
        }
        let mut values = Vec::with_capacity(self.symbolic_nnz());
        for col in self.columns.iter() {
            for kc in 0..6 {
                for &(_, s, transposed) in col {
                    let m = &blocks[s];
                    for ir in 0..6 {
                        values.push(if transposed { m[(kc, ir)] } else { m[(ir, kc)] });
                    }
                }
            }
        }
        (values, grad)
    }

    fn symbolic_nnz(&self) -> usize {
        self.columns.iter().map(|c| c.len() * 36).sum()
    }
}

fn linearize_all(graph: &FactorGraph, values: &GraphValues, mode: JacobianMode) -> Result<Vec<Linearized>> {
    graph
        .factors()
        .iter()
        .map(|f| match mode {
            JacobianMode::Analytic => f.linearize(values),
            JacobianMode::Numeric => f.linearize_numeric(values),
        })
        .collect()
}

fn retract_all(values: &GraphValues, order: &[VariableKey], step: &DVector<f64>) -> GraphValues {
    let mut out = values.clone();
    for (i, key) in order.iter().enumerate() {
        let d = Twist(step.fixed_rows::<6>(6 * i).into_owned());
        let x = out.get_mut(key).expect("ordered key present");
        *x = x.retract(&d);
    }
    out
}

/// Minimizes the total negative log-likelihood of `graph` starting from
/// `initial`. Variables not referenced by any factor are returned unchanged.
pub fn optimize(
    graph: &FactorGraph,
    initial: &GraphValues,
    config: &SolverConfig,
) -> Result<(GraphValues, SolveStats)> {
    config.validate()?;
    graph.check_keys(initial)?;
    let mut values = initial.clone();
    let mut stats = SolveStats::default();
    if graph.is_empty() {
        stats.converged = true;
        return Ok((values, stats));
    }
    if !graph.has_prior() {
        return Err(Error::Gauge("graph has no prior factor to fix the gauge".into()));
    }

    let structure = NormalStructure::build(graph, &values)?;
    let mut error = graph.total_error(&values)?;
    stats.error_history.push(error);
    let mut lambda = config.initial_damping;
    let mut l_values = vec![0.0; structure.symbolic.len_values()];

    let req = structure
        .symbolic
        .factorize_numeric_llt_req::<f64>(Parallelism::None)
        .and_then(|a| Ok(a.try_or(structure.symbolic.solve_in_place_req::<f64>(1)?)?))
        .map_err(|_| Error::invalid("normal equations too large"))?;
    let mut workspace = GlobalPodBuffer::new(req);

    while stats.iterations < config.max_iterations {
        if error == 0.0 {
            stats.converged = true;
            break;
        }
        stats.iterations += 1;
        stats.active_history.push(graph.active_components(&values)?);
        let lins = linearize_all(graph, &values, config.jacobians)?;
        let (base, grad) = structure.assemble(&lins);

        let mut accepted = None;
        let mut factored_once = false;
        for _ in 0..=config.max_inner_retries {
            let mut damped = base.clone();
            for &p in &structure.diag_positions {
                damped[p] += lambda * base[p];
            }
            let matrix = SparseColMatRef::<usize, f64>::new(structure.pattern.as_ref(), &damped);
            let llt = match structure.symbolic.factorize_numeric_llt::<f64>(
                &mut l_values,
                matrix,
                Side::Lower,
                LltRegularization::default(),
                Parallelism::None,
                PodStack::new(&mut workspace),
            ) {
                Ok(c) => c,
                Err(_) => {
                    lambda *= config.damping_up;
                    continue;
                }
            };
            factored_once = true;
            let mut rhs = Col::<f64>::from_fn(grad.len(), |i| -grad[i]);
            llt.solve_in_place_with_conj(
                Conj::No,
                rhs.as_mut().as_2d_mut(),
                Parallelism::None,
                PodStack::new(&mut workspace),
            );
            let step = DVector::from_fn(grad.len(), |i, _| rhs[i]);
            if !step.iter().all(|v| v.is_finite()) {
                lambda *= config.damping_up;
                continue;
            }
            let candidate = retract_all(&values, &structure.order, &step);
            let candidate_error = graph.total_error(&candidate)?;
            if candidate_error < error {
                lambda = (lambda * config.damping_down).max(1e-15);
                accepted = Some((candidate, candidate_error));
                break;
            }
            lambda *= config.damping_up;
        }

        match accepted {
            Some((candidate, new_error)) => {
                let decrease = error - new_error;
                let previous = error;
                values = candidate;
                error = new_error;
                stats.error_history.push(error);
                if decrease < config.convergence_tol_abs
                    || decrease < config.convergence_tol_rel * previous
                {
                    stats.converged = true;
                    break;
                }
            }
            None if !factored_once => {
                return Err(Error::Gauge(
                    "normal equations stay singular under damping; the graph is under-constrained"
                        .into(),
                ));
            }
            None => {
                // no descent direction left at any tried damping
                stats.converged = true;
                break;
            }
        }
    }

    stats.final_error = error;
    stats.final_assignment = graph.active_components(&values)?;
    Ok((values, stats))
}

/// New factors arriving at one timestep; new variables are initialized from
/// them (priors, odometry composition, first landmark observation).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimeStep {
    pub factors: Vec<Factor>,
}

/// Truncation of the per-frame score in landmark consensus: the 99% quantile
/// of a 6-dof chi-square, halved to match the factor error scale.
pub const CONSENSUS_SCORE_CAP: f64 = 0.5 * 16.81;

fn observed_landmark(f: &Factor) -> Option<VariableKey> {
    match f {
        Factor::Landmark(l) => Some(l.landmark),
        Factor::MaxMixture(m) => Some(m.landmark),
        _ => None,
    }
}

/// Camera key, hypotheses, offsets and information of an observation factor.
fn observation_parts(f: &Factor) -> Option<(VariableKey, Vec<Pose3>, Vec<f64>, crate::graph::Information)> {
    match f {
        Factor::Landmark(l) => Some((l.robot, vec![l.measurement], vec![0.0], l.information)),
        Factor::MaxMixture(m) => Some((
            m.robot,
            m.measurements().to_vec(),
            (0..m.len()).map(|j| m.offset(j)).collect(),
            m.information,
        )),
        _ => None,
    }
}

/// Initial landmark pose from its observation factors. Every hypothesis of
/// every factor, composed with its camera estimate, is a candidate; the
/// winner minimizes the sum over factors of the best-component error,
/// truncated at [`CONSENSUS_SCORE_CAP`]. Ties keep the earliest candidate, so
/// a single factor yields its first hypothesis. Factors whose camera has no
/// estimate are skipped.
fn consensus_landmark(factors: &[Factor], values: &GraphValues) -> Option<Pose3> {
    let parts: Vec<_> = factors
        .iter()
        .filter_map(observation_parts)
        .filter_map(|(r, z, o, info)| values.try_get(&r).map(|x| (*x, z, o, info)))
        .collect();
    let mut best: Option<(f64, Pose3)> = None;
    for (camera, zs, _, _) in &parts {
        for z in zs {
            let candidate = camera.compose(z);
            let inv = candidate.inverse();
            let score: f64 = parts
                .iter()
                .map(|(x, zs, offsets, info)| {
                    let d = inv.compose(x);
                    zs.iter()
                        .zip(offsets)
                        .map(|(z, o)| 0.5 * (info.sqrt() * z.compose(&d).log().0).norm_squared() + o)
                        .fold(f64::INFINITY, f64::min)
                        .min(CONSENSUS_SCORE_CAP)
                })
                .sum();
            if best.map_or(true, |(b, _)| score < b) {
                best = Some((score, candidate));
            }
        }
    }
    best.map(|(_, p)| p)
}

fn initialize_new_variables(factors: &[Factor], values: &mut GraphValues) -> Result<()> {
    // repeat until no progress so that factor order inside a step does not matter
    loop {
        let mut progressed = false;
        for f in factors {
            match f {
                Factor::Prior(p) => {
                    if !values.contains(&p.key) {
                        values.insert(p.key, p.prior);
                        progressed = true;
                    }
                }
                Factor::Odometry(o) => match (values.try_get(&o.from), values.try_get(&o.to)) {
                    (Some(a), None) => {
                        let b = a.compose(&o.measurement);
                        values.insert(o.to, b);
                        progressed = true;
                    }
                    (None, Some(b)) => {
                        let a = b.compose(&o.measurement.inverse());
                        values.insert(o.from, a);
                        progressed = true;
                    }
                    _ => {}
                },
                Factor::Landmark(_) | Factor::MaxMixture(_) => {
                    let l = observed_landmark(f).expect("observation factor");
                    if !values.contains(&l) {
                        if let Some(p) = consensus_landmark(std::slice::from_ref(f), values) {
                            values.insert(l, p);
                            progressed = true;
                        }
                    }
                }
            }
        }
        if !progressed {
            break;
        }
    }
    for f in factors {
        for k in f.keys() {
            if !values.contains(&k) {
                return Err(Error::invalid(format!(
                    "variable {k} cannot be initialized from the factors seen so far"
                )));
            }
        }
    }
    Ok(())
}

/// Batch re-solve after every timestep, warm-started from the previous
/// solution. `on_step` sees the step index, the estimate and the solver stats.
///
/// Observations of a landmark without an estimate are held back until
/// `landmark_init_frames` of them have arrived (or the stream ends); the
/// landmark is then initialized by consensus and the held factors join the
/// graph together.
pub fn incremental_solve_with<F>(
    stream: &[TimeStep],
    config: &SolverConfig,
    mut on_step: F,
) -> Result<(FactorGraph, GraphValues)>
where
    F: FnMut(usize, &GraphValues, &SolveStats),
{
    config.validate()?;
    let mut graph = FactorGraph::new();
    let mut values = GraphValues::new();
    let mut pending: IndexMap<VariableKey, Vec<Factor>> = IndexMap::new();
    for (t, step) in stream.iter().enumerate() {
        let last = t + 1 == stream.len();
        let mut ready = Vec::with_capacity(step.factors.len());
        for f in &step.factors {
            match observed_landmark(f) {
                Some(l) if config.landmark_init_frames > 1 && !values.contains(&l) => {
                    pending.entry(l).or_default().push(f.clone());
                }
                _ => ready.push(f.clone()),
            }
        }
        initialize_new_variables(&ready, &mut values)?;
        let due: Vec<VariableKey> = pending
            .iter()
            .filter(|(_, fs)| last || fs.len() >= config.landmark_init_frames)
            .map(|(k, _)| *k)
            .collect();
        for l in due {
            let held = pending.shift_remove(&l).expect("key listed as pending");
            let init = consensus_landmark(&held, &values).ok_or_else(|| {
                Error::invalid(format!("landmark {l} observed only from unknown poses"))
            })?;
            values.insert(l, init);
            ready.extend(held);
        }
        for f in ready {
            graph.add(f);
        }
        let (solved, stats) = optimize(&graph, &values, config)?;
        values = solved;
        on_step(t, &values, &stats);
    }
    Ok((graph, values))
}

/// Per-step estimates of [`incremental_solve_with`].
pub fn incremental_solve(stream: &[TimeStep], config: &SolverConfig) -> Result<Vec<GraphValues>> {
    let mut out = Vec::with_capacity(stream.len());
    incremental_solve_with(stream, config, |_, v, _| out.push(v.clone()))?;
    Ok(out)
}
