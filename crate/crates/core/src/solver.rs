//! Dirichlet constraints, L-BFGS minimisation on the free DOFs, continuation
//! and finite-difference gradient checks.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{total_energy, BodyForce, EnergyParams, EnergyTerms, Evaluator};
use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::precond::{Identity, Preconditioner, StiffnessPreconditioner};
use crate::state::DeformationState;

/// Which nodes a Dirichlet condition acts on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeSelector {
    /// Nodes strictly inside an axis-aligned segment, optionally restricted
    /// to one body.
    Segment {
        from: Point,
        to: Point,
        #[serde(default)]
        body: Option<u32>,
    },
}

impl NodeSelector {
    /// Unit axis index of the segment direction (0 for x1, 1 for x2).
    fn axis(&self) -> Result<usize> {
        let NodeSelector::Segment { from, to, .. } = self;
        let (dx, dy) = ((to[0] - from[0]).abs(), (to[1] - from[1]).abs());
        match (dx > 0.0, dy > 0.0) {
            (true, false) => Ok(0),
            (false, true) => Ok(1),
            _ => Err(Error::Specification(format!(
                "segment {from:?} -> {to:?} must be a nonempty axis-aligned segment"
            ))),
        }
    }

    pub fn select(&self, state: &DeformationState) -> Result<Vec<usize>> {
        let axis = self.axis()?;
        let NodeSelector::Segment { from, to, body } = self;
        let mesh = state.mesh();
        let tol = 1e-9 * mesh.element_diameter();
        let bodies = mesh.node_body_ids();
        let (lo, hi) = (from[axis].min(to[axis]), from[axis].max(to[axis]));
        let other = 1 - axis;
        let nodes: Vec<usize> = mesh
            .nodes()
            .iter()
            .enumerate()
            .filter(|&(n, x)| {
                (x[other] - from[other]).abs() < tol
                    && x[axis] > lo + tol
                    && x[axis] < hi - tol
                    && body.is_none_or(|b| bodies[n] == b)
            })
            .map(|(n, _)| n)
            .collect();
        if nodes.is_empty() {
            return Err(Error::Specification(format!("selector {self:?} matches no node")));
        }
        Ok(nodes)
    }
}

/// Affine Dirichlet data `y = A x + b` on the selected nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletSpec {
    pub selector: NodeSelector,
    #[serde(default = "identity_matrix")]
    pub a: [[f64; 2]; 2],
    #[serde(default)]
    pub b: [f64; 2],
}

fn identity_matrix() -> [[f64; 2]; 2] {
    [[1.0, 0.0], [0.0, 1.0]]
}

impl DirichletSpec {
    /// Translation by `b` on an axis-aligned segment.
    pub fn shifted_segment(from: Point, to: Point, body: Option<u32>, b: [f64; 2]) -> Self {
        Self {
            selector: NodeSelector::Segment { from, to, body },
            a: identity_matrix(),
            b,
        }
    }
}

/// Constrained DOF mask and target values on the flat DOF vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraints {
    pub mask: Vec<bool>,
    pub values: Vec<f64>,
}

impl Constraints {
    pub fn none(num_dofs: usize) -> Self {
        Self { mask: vec![false; num_dofs], values: vec![0.0; num_dofs] }
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    pub fn constrained_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    /// Overwrite constrained entries with their targets.
    pub fn project(&self, flat: &mut [f64]) {
        for (i, v) in flat.iter_mut().enumerate() {
            if self.mask[i] {
                *v = self.values[i];
            }
        }
    }

    fn merge(&mut self, other: &Constraints) -> Result<()> {
        for i in 0..self.mask.len() {
            if other.mask[i] {
                if self.mask[i] && self.values[i] != other.values[i] {
                    return Err(Error::Specification(format!(
                        "conflicting Dirichlet data on DOF {i}: {} vs {}",
                        self.values[i], other.values[i]
                    )));
                }
                self.mask[i] = true;
                self.values[i] = other.values[i];
            }
        }
        Ok(())
    }
}

/// Constrain the value DOF and the tangential first-derivative DOF of both
/// components on every selected node.
pub fn apply_dirichlet(state: &DeformationState, spec: &DirichletSpec) -> Result<Constraints> {
    let axis = spec.selector.axis()?;
    let nodes = spec.selector.select(state)?;
    let mut out = Constraints::none(state.num_dofs());
    let mesh = state.mesh();
    for &n in &nodes {
        let x = mesh.nodes()[n];
        for c in 0..2 {
            let value = spec.a[c][0] * x[0] + spec.a[c][1] * x[1] + spec.b[c];
            let i = state.dof_index(c, n, 0);
            out.mask[i] = true;
            out.values[i] = value;
            let t = state.dof_index(c, n, 1 + axis);
            out.mask[t] = true;
            out.values[t] = spec.a[c][axis];
        }
    }
    Ok(out)
}

/// Union of several Dirichlet conditions.
pub fn apply_all(state: &DeformationState, specs: &[DirichletSpec]) -> Result<Constraints> {
    let mut out = Constraints::none(state.num_dofs());
    for spec in specs {
        out.merge(&apply_dirichlet(state, spec)?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinimizeConfig {
    pub max_iterations: usize,
    /// Absolute tolerance on the free-gradient max norm; `None` selects
    /// `1e-6 (1 + |E(initial)|)`.
    pub gradient_tolerance: Option<f64>,
    pub memory: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Largest change of a constrained value DOF per Dirichlet ramp substep,
    /// in units of the element diameter.
    pub ramp_limit: f64,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            gradient_tolerance: None,
            memory: 10,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
            ramp_limit: 0.3,
        }
    }
}

impl MinimizeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.gradient_tolerance.is_none_or(|t| t > 0.0)
            && self.memory > 0
            && self.armijo > 0.0
            && self.armijo < 1.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.max_backtracks > 0
            && self.ramp_limit > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Configuration(format!("invalid minimiser settings {self:?}")))
        }
    }
}

/// One objective evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub terms: Option<EnergyTerms>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub total: f64,
    pub terms: Option<EnergyTerms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_norm: f64,
    pub tolerance: f64,
    pub converged: bool,
    /// Dirichlet ramp substeps used (1 when no ramp was needed).
    pub substeps: usize,
    pub terms: Option<EnergyTerms>,
    pub trace: Vec<TraceRow>,
    /// Excluded from serialised output so that reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl SolveReport {
    pub const TRACE_HEADER: &'static str = "iteration,total,E_el,mu_E_cn,E_reg,E_body";

    pub fn trace_csv(&self) -> String {
        let mut out = String::from(Self::TRACE_HEADER);
        out.push('\n');
        for row in &self.trace {
            let t = row.terms.unwrap_or(EnergyTerms { total: row.total, ..EnergyTerms::default() });
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.iteration, row.total, t.elastic, t.penalty_scaled, t.regularizer, t.body
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn max_abs_on(g: &[f64], idx: &[usize]) -> f64 {
    idx.iter().fold(0.0f64, |m, &i| m.max(g[i].abs()))
}

/// Minimise `f` over the entries `free` of `x0`; the other entries are never
/// modified. Limited-memory BFGS with Armijo backtracking.
pub fn minimize(
    f: impl FnMut(&[f64]) -> Result<Evaluation>,
    x0: Vec<f64>,
    free: &[usize],
    config: &MinimizeConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    minimize_preconditioned(f, x0, free, &Identity, config)
}

/// [`minimize`] with the initial inverse Hessian `precond` (acting on
/// vectors indexed like `free`).
pub fn minimize_preconditioned(
    mut f: impl FnMut(&[f64]) -> Result<Evaluation>,
    x0: Vec<f64>,
    free: &[usize],
    precond: &dyn Preconditioner,
    config: &MinimizeConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    config.validate()?;
    let h0 = |v: &[f64]| {
        let mut out = v.to_vec();
        precond.apply(&mut out);
        out
    };
    let start = Instant::now();
    let mut x = x0;
    let mut cur = f(&x)?;
    let mut evaluations = 1;
    if !cur.value.is_finite() {
        return Err(Error::Evaluation(format!("non-finite initial energy {}", cur.value)));
    }
    let tol = config.gradient_tolerance.unwrap_or(1e-6 * (1.0 + cur.value.abs()));
    let mut trace = vec![TraceRow { iteration: 0, total: cur.value, terms: cur.terms }];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut gnorm = max_abs_on(&cur.gradient, free);
    let mut iterations = 0;
    let mut restarted = false;

    while gnorm > tol && iterations < config.max_iterations {
        // two-loop recursion on the free subspace
        let mut d: Vec<f64> = free.iter().map(|&i| -cur.gradient[i]).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * s.iter().zip(&d).map(|(u, v)| u * v).sum::<f64>();
            for (dk, yk) in d.iter_mut().zip(y) {
                *dk -= a * yk;
            }
            alphas.push(a);
        }
        let gamma = match pairs.back() {
            Some((s, y, _)) => {
                let sy: f64 = s.iter().zip(y).map(|(u, v)| u * v).sum();
                let ydy: f64 = y.iter().zip(&h0(y)).map(|(u, v)| u * v).sum();
                sy / ydy
            }
            None => {
                let g: Vec<f64> = free.iter().map(|&i| cur.gradient[i]).collect();
                let dg = h0(&g).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                1.0 / dg.max(1.0)
            }
        };
        precond.apply(&mut d);
        d.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.iter().zip(&d).map(|(u, v)| u * v).sum::<f64>();
            for (dk, sk) in d.iter_mut().zip(s) {
                *dk += (a - b) * sk;
            }
        }
        let mut slope: f64 = free.iter().zip(&d).map(|(&i, v)| cur.gradient[i] * v).sum();
        if !(slope < 0.0) {
            pairs.clear();
            let g: Vec<f64> = free.iter().map(|&i| -cur.gradient[i] / gnorm.max(1.0)).collect();
            d = h0(&g);
            slope = free.iter().zip(&d).map(|(&i, v)| cur.gradient[i] * v).sum();
        }

        // backtracking line search
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..config.max_backtracks {
            let mut trial = x.clone();
            for (&i, v) in free.iter().zip(&d) {
                trial[i] += step * v;
            }
            evaluations += 1;
            match f(&trial) {
                Ok(ev) if ev.value.is_finite() && ev.value <= cur.value + config.armijo * step * slope => {
                    accepted = Some((trial, ev));
                    break;
                }
                Ok(_) | Err(Error::Evaluation(_)) => step *= config.backtrack,
                Err(e) => return Err(e),
            }
        }
        let Some((trial, ev)) = accepted else {
            if !restarted && !pairs.is_empty() {
                // retry once along steepest descent
                pairs.clear();
                restarted = true;
                continue;
            }
            return Err(Error::Stagnation { iterations, gradient_norm: gnorm, best: x });
        };
        restarted = false;
        iterations += 1;
        let s: Vec<f64> = free.iter().map(|&i| trial[i] - x[i]).collect();
        let y: Vec<f64> = free.iter().map(|&i| ev.gradient[i] - cur.gradient[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(u, v)| u * v).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        if sy > 1e-12 * ss {
            if pairs.len() == config.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = trial;
        cur = ev;
        gnorm = max_abs_on(&cur.gradient, free);
        trace.push(TraceRow { iteration: iterations, total: cur.value, terms: cur.terms });
    }
    let report = SolveReport {
        iterations,
        evaluations,
        gradient_norm: gnorm,
        tolerance: tol,
        converged: gnorm <= tol,
        substeps: 1,
        terms: cur.terms,
        trace,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((x, report))
}

/// A boundary-value problem for the total energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub params: EnergyParams,
    pub force: BodyForce,
    pub dirichlet: Vec<DirichletSpec>,
    pub evaluator: Evaluator,
}

impl Problem {
    pub fn objective<'a>(&'a self, disc_state: &'a DeformationState) -> impl FnMut(&[f64]) -> Result<Evaluation> + 'a {
        let mut work = disc_state.clone();
        move |flat: &[f64]| {
            work.set_flat(flat)?;
            let (terms, gradient) = total_energy(&work, &self.params, &self.force, self.evaluator)?;
            Ok(Evaluation { value: terms.total, gradient, terms: Some(terms) })
        }
    }
}

/// Minimise the total energy from `initial`. If the Dirichlet data move a
/// constrained value DOF by more than `ramp_limit` element diameters, the
/// data are applied in equal substeps, each solved from the previous one.
pub fn solve(problem: &Problem, initial: &DeformationState, config: &MinimizeConfig) -> Result<(DeformationState, SolveReport)> {
    problem.params.validate()?;
    let constraints = apply_all(initial, &problem.dirichlet)?;
    let free = constraints.free_indices();
    let start = initial.to_flat();
    let jump = constraints
        .constrained_indices()
        .into_iter()
        .filter(|&i| i % 4 == 0)
        .fold(0.0f64, |m, i| m.max((constraints.values[i] - start[i]).abs()));
    let limit = config.ramp_limit * initial.mesh().element_diameter();
    let substeps = ((jump / limit).ceil() as usize).max(1);

    let precond = StiffnessPreconditioner::new(initial, &problem.params, &free)?;

    let mut x = start.clone();
    let mut total_report: Option<SolveReport> = None;
    let began = Instant::now();
    for k in 1..=substeps {
        let t = k as f64 / substeps as f64;
        for i in constraints.constrained_indices() {
            x[i] = if k == substeps {
                constraints.values[i]
            } else {
                start[i] + t * (constraints.values[i] - start[i])
            };
        }
        let (next, report) = minimize_preconditioned(problem.objective(initial), x, &free, &precond, config)?;
        x = next;
        total_report = Some(match total_report {
            None => report,
            Some(mut acc) => {
                let offset = acc.iterations;
                acc.trace.extend(report.trace.into_iter().map(|r| TraceRow { iteration: r.iteration + offset, ..r }));
                acc.iterations += report.iterations;
                acc.evaluations += report.evaluations;
                acc.gradient_norm = report.gradient_norm;
                acc.tolerance = report.tolerance;
                acc.converged = report.converged;
                acc.terms = report.terms;
                acc
            }
        });
    }
    let mut report = total_report.expect("at least one substep");
    report.substeps = substeps;
    report.wall_time_s = began.elapsed().as_secs_f64();
    let state = DeformationState::from_flat(initial.discretization().clone(), &x)?;
    Ok((state, report))
}

/// Finite-difference check of `f` (five-point stencil) on a seeded random
/// subset of the `free` entries. Returns the largest relative discrepancy
/// `|fd - g| / max(|g|, |fd|, 1e-6 |g|_inf, 1e-12)`.
pub fn fd_gradient_check(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x: &[f64],
    free: &[usize],
    rel_step: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-8..=1e-3).contains(&rel_step) {
        return Err(Error::Configuration(format!("relative step {rel_step} outside [1e-8, 1e-3]")));
    }
    if free.is_empty() {
        return Err(Error::Configuration("no free DOFs to check".into()));
    }
    let (_, g) = f(x)?;
    let gmax = max_abs_on(&g, free);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if samples >= free.len() {
        free.to_vec()
    } else {
        let mut idx = sample(&mut rng, free.len(), samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| free[k]).collect()
    };
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in picks {
        let h = rel_step * (1.0 + x[i].abs());
        let mut at = |t: f64| {
            xp[i] = x[i] + t;
            f(&xp).map(|(v, _)| v)
        };
        // fourth-order stencil: truncation stays small at steps large
        // enough to keep roundoff out
        let fd = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
        xp[i] = x[i];
        let denom = g[i].abs().max(fd.abs()).max(1e-6 * gmax).max(1e-12);
        worst = worst.max((fd - g[i]).abs() / denom);
    }
    Ok(worst)
}

/// Whether each continuation member starts from the previous solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    #[default]
    Warm,
    /// Every member starts from the given initial state.
    Cold,
}

#[derive(Debug, Clone)]
pub struct ContinuationMember {
    pub value: f64,
    pub state: DeformationState,
    pub report: SolveReport,
}

#[derive(Debug)]
pub struct ContinuationResult {
    pub members: Vec<ContinuationMember>,
    /// Sweep position and error of the first failing member, if any.
    pub failure: Option<(usize, f64, Error)>,
}

/// Solve the problems `make(v)` for the values in order. A failing member ends
/// the run; the solved prefix is returned with a failure marker.
pub fn continuation_run(
    values: &[f64],
    make: impl Fn(f64) -> Result<Problem>,
    initial: &DeformationState,
    policy: WarmStart,
    config: &MinimizeConfig,
) -> Result<ContinuationResult> {
    if values.is_empty() {
        return Err(Error::Configuration("continuation needs at least one parameter value".into()));
    }
    let mut members: Vec<ContinuationMember> = Vec::with_capacity(values.len());
    for (k, &v) in values.iter().enumerate() {
        let start = match (policy, members.last()) {
            (WarmStart::Warm, Some(prev)) => &prev.state,
            _ => initial,
        };
        let outcome = make(v).and_then(|problem| solve(&problem, start, config));
        match outcome {
            Ok((state, report)) => members.push(ContinuationMember { value: v, state, report }),
            Err(e) => {
                return Ok(ContinuationResult { members, failure: Some((k, v, e)) });
            }
        }
    }
    Ok(ContinuationResult { members, failure: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{energy_elastic, energy_regularizer};
    use crate::mesh::{build_box_mesh, DomainSpec, PincersSpec};
    use crate::penalty::PenaltyParams;
    use crate::state::{rotation, Discretization};
    use nalgebra::Matrix2;
    use rand::Rng;
    use std::sync::Arc;

    fn state_on(spec: DomainSpec) -> DeformationState {
        DeformationState::identity(Discretization::new(Arc::new(spec.build().unwrap())).unwrap())
    }

    fn model_one() -> DeformationState {
        state_on(DomainSpec::model_one(8, 4, 8))
    }

    #[test]
    fn model_one_top_edge_data() {
        let s = model_one();
        let spec = DirichletSpec::shifted_segment([0.0, 1.5], [2.0, 1.5], Some(0), [0.2, -0.5]);
        let c = apply_dirichlet(&s, &spec).unwrap();
        let nodes = spec.selector.select(&s).unwrap();
        assert_eq!(nodes.len(), 7);
        for &n in &nodes {
            let x = s.mesh().nodes()[n];
            assert_eq!(c.values[s.dof_index(1, n, 0)], 1.0);
            assert!((c.values[s.dof_index(0, n, 0)] - (x[0] + 0.2)).abs() < 1e-15);
            // tangential derivative constrained, normal and mixed left free
            assert!(c.mask[s.dof_index(0, n, 1)] && c.values[s.dof_index(0, n, 1)] == 1.0);
            assert!(c.mask[s.dof_index(1, n, 1)] && c.values[s.dof_index(1, n, 1)] == 0.0);
            assert!(!c.mask[s.dof_index(0, n, 2)] && !c.mask[s.dof_index(1, n, 3)]);
        }
        assert_eq!(c.constrained_indices().len(), 7 * 4);
    }

    #[test]
    fn identity_targets_match_interpolant() {
        let s = model_one();
        let spec = DirichletSpec::shifted_segment([0.0, -1.5], [2.0, -1.5], Some(1), [0.0, 0.0]);
        let c = apply_dirichlet(&s, &spec).unwrap();
        let flat = s.to_flat();
        for i in c.constrained_indices() {
            assert_eq!(c.values[i], flat[i]);
        }
    }

    #[test]
    fn pincers_selector_and_errors() {
        let s = state_on(DomainSpec::Pincers(PincersSpec { nx: 25, ny: 15, ..PincersSpec::default() }));
        let sel = NodeSelector::Segment { from: [0.0, -0.5], to: [0.0, 0.5], body: None };
        let nodes = sel.select(&s).unwrap();
        assert!(!nodes.is_empty());
        assert!(nodes.iter().all(|&n| s.mesh().nodes()[n][0].abs() < 1e-12));
        let empty = NodeSelector::Segment { from: [10.0, 0.0], to: [11.0, 0.0], body: None };
        assert!(matches!(empty.select(&s), Err(Error::Specification(_))));
        let diagonal = NodeSelector::Segment { from: [0.0, 0.0], to: [1.0, 1.0], body: None };
        assert!(diagonal.select(&s).is_err());
    }

    #[test]
    fn conflicting_data_rejected() {
        let s = model_one();
        let a = DirichletSpec::shifted_segment([0.0, 1.5], [2.0, 1.5], None, [0.0, 0.0]);
        let b = DirichletSpec::shifted_segment([0.0, 1.5], [2.0, 1.5], None, [0.1, 0.0]);
        assert!(apply_all(&s, &[a.clone(), a.clone()]).is_ok());
        assert!(matches!(apply_all(&s, &[a, b]), Err(Error::Specification(_))));
    }

    #[test]
    fn quadratic_converges() {
        let target: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let weights: Vec<f64> = (0..40).map(|i| 1.0 + i as f64 / 4.0).collect();
        let f = |x: &[f64]| {
            let value = x.iter().zip(&target).zip(&weights).map(|((a, b), w)| w * (a - b) * (a - b)).sum();
            let gradient = x.iter().zip(&target).zip(&weights).map(|((a, b), w)| 2.0 * w * (a - b)).collect();
            Ok(Evaluation { value, gradient, terms: None })
        };
        let free: Vec<usize> = (0..40).collect();
        let cfg = MinimizeConfig { gradient_tolerance: Some(1e-10), ..MinimizeConfig::default() };
        let (x, report) = minimize(f, vec![0.0; 40], &free, &cfg).unwrap();
        assert!(report.converged && report.gradient_norm < 1e-10);
        assert!(report.iterations <= 50, "{}", report.iterations);
        assert!(x.iter().zip(&target).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(report.trace.windows(2).all(|w| w[1].total <= w[0].total));
    }

    #[test]
    fn fixed_entries_untouched() {
        let f = |x: &[f64]| {
            Ok(Evaluation {
                value: x.iter().map(|v| (v - 3.0).powi(2)).sum(),
                gradient: x.iter().map(|v| 2.0 * (v - 3.0)).collect(),
                terms: None,
            })
        };
        let x0 = vec![0.125, 0.0, 0.7, 0.0];
        let (x, _) = minimize(f, x0.clone(), &[1, 3], &MinimizeConfig::default()).unwrap();
        assert_eq!(x[0].to_bits(), x0[0].to_bits());
        assert_eq!(x[2].to_bits(), x0[2].to_bits());
        assert!((x[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn stagnation_reports_best_state() {
        // inconsistent gradient: no descent along -g
        let f = |x: &[f64]| Ok(Evaluation { value: x[0] * x[0], gradient: vec![-1.0], terms: None });
        let cfg = MinimizeConfig { max_backtracks: 5, ..MinimizeConfig::default() };
        match minimize(f, vec![1.0], &[0], &cfg) {
            Err(Error::Stagnation { best, .. }) => assert_eq!(best, vec![1.0]),
            other => panic!("expected stagnation, got {other:?}"),
        }
    }

    #[test]
    fn rigid_dirichlet_data_reach_zero_energy() {
        let mesh = Arc::new(build_box_mesh([0.0, 0.0], [1.0, 1.0], 3, 3).unwrap());
        let disc = Discretization::new(mesh).unwrap();
        let identity = DeformationState::identity(disc.clone());
        let q = rotation(0.3);
        let b = [0.2, -0.1];
        let a = [[q[(0, 0)], q[(0, 1)]], [q[(1, 0)], q[(1, 1)]]];
        let spec = DirichletSpec { selector: NodeSelector::Segment { from: [0.0, 0.0], to: [1.0, 0.0], body: None }, a, b };
        let left = DirichletSpec { selector: NodeSelector::Segment { from: [0.0, 0.0], to: [0.0, 1.0], body: None }, a, b };
        let problem = Problem {
            params: EnergyParams { mu: 0.0, ..EnergyParams::default() },
            force: BodyForce::None,
            dirichlet: vec![spec, left],
            evaluator: Evaluator::Full,
        };
        let cfg = MinimizeConfig { gradient_tolerance: Some(1e-9), ..MinimizeConfig::default() };
        let (state, report) = solve(&problem, &identity, &cfg).unwrap();
        assert!(report.substeps > 1);
        let el = energy_elastic(&state, &problem.params).unwrap().0;
        let reg = energy_regularizer(&state, &problem.params).unwrap().0;
        assert!(el + reg <= 1e-8, "{el} {reg} {:?}", (report.iterations, report.converged, report.gradient_norm, report.substeps));
        let rigid = DeformationState::affine(disc, q, b);
        let c = apply_all(&rigid, &problem.dirichlet).unwrap();
        let flat = state.to_flat();
        for i in c.constrained_indices() {
            assert_eq!(flat[i].to_bits(), c.values[i].to_bits());
        }
    }

    #[test]
    fn local_gradients_match_differences() {
        let s = state_on(DomainSpec::model_one(4, 2, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = s.to_flat();
        for v in x.iter_mut() {
            *v += rng.gen_range(-0.03..0.03);
        }
        let free: Vec<usize> = (0..x.len()).collect();
        let params = EnergyParams::default();
        let mut work = s.clone();
        let err = fd_gradient_check(
            |y| {
                work.set_flat(y)?;
                let (a, mut g) = energy_elastic(&work, &params)?;
                let (b, g2) = energy_regularizer(&work, &params)?;
                g.iter_mut().zip(g2).for_each(|(u, v)| *u += v);
                Ok((a + b, g))
            },
            &x,
            &free,
            1e-6,
            200,
            1,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
        assert!(fd_gradient_check(|y| Ok((y[0], vec![1.0; y.len()])), &x, &free, 1e-2, 10, 0).is_err());
    }

    #[test]
    fn continuation_single_member_equals_solve() {
        let s = state_on(DomainSpec::model_one(4, 2, 4));
        let make = |m2: f64| {
            Ok(Problem {
                params: EnergyParams { penalty: PenaltyParams { eps2: 0.5, ..PenaltyParams::default() }, ..EnergyParams::default() },
                force: BodyForce::None,
                dirichlet: vec![
                    DirichletSpec::shifted_segment([0.0, 1.5], [2.0, 1.5], Some(0), [0.2, -m2]),
                    DirichletSpec::shifted_segment([0.0, -1.5], [2.0, -1.5], Some(1), [0.0, m2]),
                ],
                evaluator: Evaluator::Full,
            })
        };
        let cfg = MinimizeConfig::default();
        let run = continuation_run(&[0.1], make, &s, WarmStart::Warm, &cfg).unwrap();
        assert!(run.failure.is_none());
        let (state, report) = solve(&make(0.1).unwrap(), &s, &cfg).unwrap();
        assert_eq!(run.members[0].state.to_flat(), state.to_flat());
        assert_eq!(run.members[0].report.iterations, report.iterations);
        assert!(continuation_run(&[], make, &s, WarmStart::Warm, &cfg).is_err());
        // failures keep the solved prefix
        let failing = |m2: f64| if m2 > 0.15 { Err(Error::Configuration("boom".into())) } else { make(m2) };
        let run = continuation_run(&[0.1, 0.2], failing, &s, WarmStart::Warm, &cfg).unwrap();
        assert_eq!(run.members.len(), 1);
        assert!(matches!(run.failure, Some((1, _, Error::Configuration(_)))));
    }

    #[test]
    fn solves_are_deterministic() {
        let s = state_on(DomainSpec::model_one(4, 2, 4));
        let problem = Problem {
            params: EnergyParams::default(),
            force: BodyForce::None,
            dirichlet: vec![DirichletSpec::shifted_segment([0.0, 1.5], [2.0, 1.5], Some(0), [0.1, -0.1])],
            evaluator: Evaluator::Accelerated,
        };
        let affine = DeformationState::affine(s.discretization().clone(), Matrix2::identity(), [0.0, 0.0]);
        let cfg = MinimizeConfig { max_iterations: 200, ..MinimizeConfig::default() };
        let a = solve(&problem, &affine, &cfg).unwrap();
        let b = solve(&problem, &affine, &cfg).unwrap();
        assert_eq!(a.0.to_flat(), b.0.to_flat());
        assert_eq!(a.1.to_json().unwrap(), b.1.to_json().unwrap());
    }
}
