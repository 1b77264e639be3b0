//! Configuration-driven runs of the pincers illustration and the two
//! boundary-value models, with their CSV/JSON outputs.
//!
//! Output files of a run directory:
//!
//! | file | content |
//! |------|---------|
//! | `mesh.json` | reference mesh |
//! | `<tag>_state.json` | nodal DOF tables of `y1`, `y2` plus the mesh connectivity |
//! | `<tag>_density.csv` | `element_id,midpoint_x1,midpoint_x2,density` |
//! | `<tag>_diagnostics.json` | [`DiagnosticsReport`] |
//! | `<tag>_solve.json`, `<tag>_trace.csv` | solver report and, with tracing, the energy trace |
//! | `energy_eps2_<e>.csv` | `sweep_value,E_el,mu_E_cn,E_reg,E_body,total` |
//! | `penalty_energy.csv` | pincers illustration only: `eps2,E_cn` |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{DiagnosticsConfig, DiagnosticsReport};
use crate::energy::{energy_cn, BodyForce, EnergyParams, EnergyTerms, Evaluator, ForceConvention};
use crate::error::{Error, Result};
use crate::mesh::{DomainSpec, MeshGrid, PincersSpec, Point};
use crate::penalty::{density_csv, Gauge, PenaltyParams};
use crate::solver::{continuation_run, DirichletSpec, MinimizeConfig, NodeSelector, Problem, SolveReport, WarmStart};
use crate::state::{pincers_map, Discretization, DeformationState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PincersIllustration,
    Model1,
    Model2,
}

/// Parameter varied along a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Vertical Dirichlet shift of the two-box model.
    M2,
    Mu,
    Nu,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    #[serde(default)]
    pub warm_start: WarmStart,
}

/// Dirichlet loading of the two-box model: the top edge of the upper box
/// moves by `(m1, -m2)`, the bottom edge of the lower box by `(0, m2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoBoxLoading {
    pub m1: f64,
    pub m2: f64,
}

impl Default for TwoBoxLoading {
    fn default() -> Self {
        Self { m1: 0.2, m2: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub domain: DomainSpec,
    pub energy: EnergyParams,
    /// Penalty widths run one after another; each gets its own sweep.
    pub eps2_values: Vec<f64>,
    pub body_force: BodyForce,
    /// Extra Dirichlet conditions (the two-box loading is added on top).
    pub dirichlet: Vec<DirichletSpec>,
    pub loading: Option<TwoBoxLoading>,
    /// Angle factor of the prescribed pincers map.
    pub pincers_a: f64,
    pub minimize: MinimizeConfig,
    pub sweep: Option<Sweep>,
    pub diagnostics: DiagnosticsConfig,
    pub evaluator: Evaluator,
    pub output_dir: PathBuf,
    pub trace: bool,
    /// Smallest admissible `eps2 / element diameter`.
    pub min_eps2_ratio: f64,
}

fn log_values() -> Vec<f64> {
    (0..=6).map(|k| 10f64.powi(k - 6)).collect()
}

impl ExperimentConfig {
    /// Defaults of each experiment kind.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            domain: DomainSpec::Pincers(PincersSpec::default()),
            energy: EnergyParams::default(),
            eps2_values: vec![0.25],
            body_force: BodyForce::None,
            dirichlet: vec![],
            loading: None,
            pincers_a: 1.1,
            minimize: MinimizeConfig::default(),
            sweep: None,
            diagnostics: DiagnosticsConfig::default(),
            evaluator: Evaluator::Accelerated,
            output_dir: PathBuf::from("out"),
            trace: false,
            min_eps2_ratio: 1.4,
        };
        match kind {
            ExperimentKind::PincersIllustration => Self {
                energy: EnergyParams {
                    penalty: PenaltyParams { beta: 0.5, gauge: Gauge::Linear, ..PenaltyParams::default() },
                    ..EnergyParams::default()
                },
                eps2_values: vec![0.5, 0.25],
                output_dir: PathBuf::from("out/pincers"),
                ..base
            },
            ExperimentKind::Model1 => Self {
                domain: DomainSpec::model_one(16, 8, 16),
                eps2_values: vec![0.25],
                loading: Some(TwoBoxLoading::default()),
                sweep: Some(Sweep {
                    parameter: SweepParameter::M2,
                    values: vec![0.4, 0.5, 0.6, 0.7],
                    warm_start: WarmStart::Warm,
                }),
                output_dir: PathBuf::from("out/model1"),
                ..base
            },
            // A parallel slot narrow enough for the arms to meet under the
            // force, and rows fine enough to resolve small overlaps.
            ExperimentKind::Model2 => Self {
                domain: DomainSpec::Pincers(PincersSpec { nx: 50, ny: 39, w0: 0.2, slope: 0.0, ..PincersSpec::default() }),
                energy: EnergyParams {
                    penalty: PenaltyParams { beta: 2.2, ..PenaltyParams::default() },
                    ..EnergyParams::default()
                },
                eps2_values: vec![0.5],
                diagnostics: DiagnosticsConfig { raster_cells_per_edge: 2048, ..DiagnosticsConfig::default() },
                body_force: BodyForce::Pincers { nu: 0.2, convention: ForceConvention::Work },
                dirichlet: vec![DirichletSpec::shifted_segment([0.0, -0.5], [0.0, 0.5], None, [0.0, 0.0])],
                sweep: Some(Sweep { parameter: SweepParameter::Mu, values: log_values(), warm_start: WarmStart::Cold }),
                output_dir: PathBuf::from("out/model2"),
                ..base
            },
        }
    }

    /// Parse a TOML document. Keys that are absent keep the preset value of
    /// the document's `kind`; tables merge recursively, arrays are replaced.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let kind = doc
            .get("kind")
            .ok_or_else(|| Error::Parse("missing key 'kind'".into()))?
            .clone()
            .try_into::<ExperimentKind>()
            .map_err(|e| Error::Parse(format!("kind: {e}")))?;
        let preset = toml::Table::try_from(Self::preset(kind)).map_err(|e| Error::Parse(e.to_string()))?;
        let mut merged = preset;
        merge_tables(&mut merged, doc);
        let config: Self = toml::Value::Table(merged).try_into().map_err(|e| Error::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        self.minimize.validate()?;
        if self.eps2_values.is_empty() {
            return Err(Error::Configuration("eps2_values must not be empty".into()));
        }
        let mesh = self.domain.build()?;
        for &eps2 in &self.eps2_values {
            PenaltyParams { eps2, ..self.energy.penalty }.validate()?;
            if eps2 < self.min_eps2_ratio * mesh.element_diameter() {
                return Err(Error::Configuration(format!(
                    "eps2 = {eps2} is below {} x element diameter {:.4}; refine the mesh",
                    self.min_eps2_ratio,
                    mesh.element_diameter()
                )));
            }
        }
        match (self.kind, &self.domain) {
            (ExperimentKind::Model1, DomainSpec::TwoBox { .. }) => {}
            (ExperimentKind::PincersIllustration | ExperimentKind::Model2, DomainSpec::Pincers(_)) => {}
            (kind, _) => {
                return Err(Error::Configuration(format!("{kind:?} needs a matching domain kind")));
            }
        }
        if self.kind == ExperimentKind::PincersIllustration && !(self.pincers_a > 1.0) {
            return Err(Error::Configuration(format!("pincers_a = {} must exceed 1", self.pincers_a)));
        }
        if self.kind != ExperimentKind::PincersIllustration {
            let sweep = self
                .sweep
                .as_ref()
                .ok_or_else(|| Error::Configuration("a sweep is required".into()))?;
            if sweep.values.is_empty() {
                return Err(Error::Configuration("sweep values must not be empty".into()));
            }
            match sweep.parameter {
                SweepParameter::M2 if self.loading.is_none() => {
                    return Err(Error::Configuration("sweep over m2 needs a [loading] section".into()));
                }
                SweepParameter::Nu if self.body_force.is_zero() => {
                    return Err(Error::Configuration("sweep over nu needs a body force".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn problem(&self, eps2: f64, parameter: Option<(SweepParameter, f64)>) -> Result<Problem> {
        let mut params = self.energy;
        params.penalty.eps2 = eps2;
        let mut force = self.body_force;
        let mut loading = self.loading;
        match parameter {
            Some((SweepParameter::Mu, v)) => params.mu = v,
            Some((SweepParameter::Beta, v)) => params.penalty.beta = v,
            Some((SweepParameter::M2, v)) => {
                if let Some(l) = loading.as_mut() {
                    l.m2 = v;
                }
            }
            Some((SweepParameter::Nu, v)) => {
                if let BodyForce::Pincers { nu, .. } = &mut force {
                    *nu = v;
                } else if let BodyForce::Uniform { g, .. } = &mut force {
                    let norm = g[0].hypot(g[1]);
                    if norm > 0.0 {
                        *g = [g[0] * v / norm, g[1] * v / norm];
                    }
                }
            }
            None => {}
        }
        params.validate()?;
        let mut dirichlet = self.dirichlet.clone();
        if let (Some(l), DomainSpec::TwoBox { upper, lower }) = (loading, &self.domain) {
            let top = upper.origin[1] + upper.size[1];
            let bottom = lower.origin[1];
            let (x0, x1) = (upper.origin[0], upper.origin[0] + upper.size[0]);
            dirichlet.push(DirichletSpec::shifted_segment([x0, top], [x1, top], Some(0), [l.m1, -l.m2]));
            let (x0, x1) = (lower.origin[0], lower.origin[0] + lower.size[0]);
            dirichlet.push(DirichletSpec::shifted_segment([x0, bottom], [x1, bottom], Some(1), [0.0, l.m2]));
        }
        Ok(Problem { params, force, dirichlet, evaluator: self.evaluator })
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                // a tagged enum switching variant replaces the whole table
                if b.get("kind").is_some() && o.get("kind").is_some() && b.get("kind") != o.get("kind") {
                    *b = o;
                } else {
                    merge_tables(b, o);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Deformation snapshot for plotting: mesh connectivity plus nodal DOFs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub nodes: Vec<Point>,
    pub elements: Vec<[usize; 4]>,
    pub element_size: [f64; 2],
    pub body_ids: Vec<u32>,
    pub dirichlet_nodes: Vec<usize>,
    /// Rows `(value, d/dx1, d/dx2, d2/dx1dx2)` per node.
    pub y1: Vec<[f64; 4]>,
    pub y2: Vec<[f64; 4]>,
    pub parameters: BTreeMap<String, f64>,
}

impl StateSnapshot {
    pub fn new(state: &DeformationState, dirichlet_nodes: Vec<usize>, parameters: BTreeMap<String, f64>) -> Self {
        let mesh = state.mesh();
        Self {
            nodes: mesh.nodes().to_vec(),
            elements: mesh.elements().to_vec(),
            element_size: mesh.element_size(),
            body_ids: mesh.body_ids().to_vec(),
            dirichlet_nodes,
            y1: state.component(0).dofs().to_vec(),
            y2: state.component(1).dofs().to_vec(),
            parameters,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Rebuild the state on `disc`, whose mesh must match the snapshot.
    pub fn to_state(&self, disc: Arc<Discretization>) -> Result<DeformationState> {
        if disc.mesh().nodes() != self.nodes.as_slice() {
            return Err(Error::Configuration("snapshot does not match the mesh".into()));
        }
        let mut flat: Vec<f64> = self.y1.iter().flatten().copied().collect();
        flat.extend(self.y2.iter().flatten());
        DeformationState::from_flat(disc, &flat)
    }
}

fn write(dir: &Path, name: &str, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(())
}

fn tag(x: f64) -> String {
    // shortest round-trip form, file-name safe
    format!("{x:e}").replace('-', "m").replace('.', "p")
}

pub const ENERGY_CSV_HEADER: &str = "sweep_value,E_el,mu_E_cn,E_reg,E_body,total";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PincersCase {
    pub eps2: f64,
    pub energy: f64,
    pub density: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PincersOutcome {
    pub state: DeformationState,
    pub cases: Vec<PincersCase>,
    pub diagnostics: DiagnosticsReport,
    pub files: Vec<PathBuf>,
}

/// Interpolate the prescribed pincers map and evaluate the penalty and the
/// diagnostics for every `eps2`.
pub fn run_pincers_illustration(config: &ExperimentConfig) -> Result<PincersOutcome> {
    config.validate()?;
    if config.kind != ExperimentKind::PincersIllustration {
        return Err(Error::Configuration("expected kind = pincers_illustration".into()));
    }
    let mesh = Arc::new(config.domain.build()?);
    let disc = Discretization::new(mesh.clone())?;
    let state = DeformationState::from_map(disc, pincers_map(config.pincers_a))?;
    let dir = prepare_dir(&config.output_dir)?;
    let mut files = Vec::new();
    write(&dir, "mesh.json", &mesh.to_json()?, &mut files)?;
    let params = BTreeMap::from([("a".to_string(), config.pincers_a)]);
    write(&dir, "pincers_state.json", &StateSnapshot::new(&state, vec![], params).to_json()?, &mut files)?;

    let mut cases = Vec::new();
    let mut energy_csv = String::from("eps2,E_cn\n");
    for &eps2 in &config.eps2_values {
        let penalty = PenaltyParams { eps2, ..config.energy.penalty };
        let (energy, _, eval) = energy_cn(&state, &penalty, config.evaluator)?;
        write(&dir, &format!("eps2_{}_density.csv", tag(eps2)), &density_csv(mesh.element_midpoints().as_slice(), &eval.density), &mut files)?;
        energy_csv.push_str(&format!("{eps2},{energy}\n"));
        cases.push(PincersCase { eps2, energy, density: eval.density });
    }
    write(&dir, "penalty_energy.csv", &energy_csv, &mut files)?;
    let diagnostics = DiagnosticsReport::compute(&state, &config.diagnostics)?;
    write(&dir, "pincers_diagnostics.json", &diagnostics.to_json()?, &mut files)?;
    Ok(PincersOutcome { state, cases, diagnostics, files })
}

/// One solved sweep member.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub eps2: f64,
    pub value: f64,
    pub terms: EnergyTerms,
    pub report: SolveReport,
    pub diagnostics: DiagnosticsReport,
    pub state: DeformationState,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// `(eps2, sweep value, message)` of the first failing member.
    pub failure: Option<(f64, f64, String)>,
    pub files: Vec<PathBuf>,
}

impl SweepOutcome {
    pub fn rows_for(&self, eps2: f64) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.eps2 == eps2).collect()
    }
}

/// Two-box model: sweep of the Dirichlet shift `m2`.
pub fn run_model_1(config: &ExperimentConfig) -> Result<SweepOutcome> {
    if config.kind != ExperimentKind::Model1 {
        return Err(Error::Configuration("expected kind = model1".into()));
    }
    run_sweep(config)
}

/// Pincers under a body force: sweep of the penalty weight `mu`.
pub fn run_model_2(config: &ExperimentConfig) -> Result<SweepOutcome> {
    if config.kind != ExperimentKind::Model2 {
        return Err(Error::Configuration("expected kind = model2".into()));
    }
    run_sweep(config)
}

fn prepare_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    config.validate()?;
    let sweep = config.sweep.as_ref().expect("validated");
    let mesh: Arc<MeshGrid> = Arc::new(config.domain.build()?);
    let disc = Discretization::new(mesh.clone())?;
    let identity = DeformationState::identity(disc.clone());
    let dir = prepare_dir(&config.output_dir)?;
    let mut files = Vec::new();
    write(&dir, "mesh.json", &mesh.to_json()?, &mut files)?;
    let mut rows = Vec::new();
    let mut failure = None;

    for &eps2 in &config.eps2_values {
        let make = |v: f64| config.problem(eps2, Some((sweep.parameter, v)));
        let run = continuation_run(&sweep.values, make, &identity, sweep.warm_start, &config.minimize)?;
        let mut energy_csv = format!("{ENERGY_CSV_HEADER}\n");
        for member in run.members {
            let problem = config.problem(eps2, Some((sweep.parameter, member.value)))?;
            let terms = member.report.terms.ok_or_else(|| Error::Evaluation("missing energy terms".into()))?;
            let (_, _, eval) = energy_cn(&member.state, &problem.params.penalty, config.evaluator)?;
            let diagnostics = DiagnosticsReport::compute(&member.state, &config.diagnostics)?;
            let dirichlet_nodes = dirichlet_nodes(&member.state, &problem.dirichlet)?;
            let name = format!("eps2_{}_{}_{}", tag(eps2), parameter_name(sweep.parameter), tag(member.value));
            let params = BTreeMap::from([
                ("eps2".to_string(), eps2),
                (parameter_name(sweep.parameter).to_string(), member.value),
                ("mu".to_string(), problem.params.mu),
            ]);
            write(&dir, &format!("{name}_state.json"), &StateSnapshot::new(&member.state, dirichlet_nodes, params).to_json()?, &mut files)?;
            // the density is reported for the scaled penalty mu E_cn
            let scaled: Vec<f64> = eval.density.iter().map(|d| problem.params.mu * d).collect();
            write(&dir, &format!("{name}_density.csv"), &density_csv(mesh.element_midpoints().as_slice(), &scaled), &mut files)?;
            write(&dir, &format!("{name}_diagnostics.json"), &diagnostics.to_json()?, &mut files)?;
            write(&dir, &format!("{name}_solve.json"), &member.report.to_json()?, &mut files)?;
            if config.trace {
                write(&dir, &format!("{name}_trace.csv"), &member.report.trace_csv(), &mut files)?;
            }
            energy_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                member.value, terms.elastic, terms.penalty_scaled, terms.regularizer, terms.body, terms.total
            ));
            log::info!(
                "eps2 = {eps2}, {} = {}: total {:.6e}, mu E_cn {:.6e}, gap {:.4e} (tol {:.4e}), {} iterations, converged {}",
                parameter_name(sweep.parameter),
                member.value,
                terms.total,
                terms.penalty_scaled,
                diagnostics.cn_gap,
                diagnostics.raster_tolerance,
                member.report.iterations,
                member.report.converged
            );
            rows.push(SweepRow { eps2, value: member.value, terms, report: member.report, diagnostics, state: member.state });
        }
        write(&dir, &format!("energy_eps2_{}.csv", tag(eps2)), &energy_csv, &mut files)?;
        if let Some((k, v, e)) = run.failure {
            log::error!("sweep member {k} ({} = {v}) at eps2 = {eps2} failed: {e}", parameter_name(sweep.parameter));
            failure = Some((eps2, v, e.to_string()));
            break;
        }
    }
    Ok(SweepOutcome { rows, failure, files })
}

fn parameter_name(p: SweepParameter) -> &'static str {
    match p {
        SweepParameter::M2 => "m2",
        SweepParameter::Mu => "mu",
        SweepParameter::Nu => "nu",
        SweepParameter::Beta => "beta",
    }
}

fn dirichlet_nodes(state: &DeformationState, specs: &[DirichletSpec]) -> Result<Vec<usize>> {
    let mut nodes = Vec::new();
    for spec in specs {
        let NodeSelector::Segment { .. } = &spec.selector;
        nodes.extend(spec.selector.select(state)?);
    }
    nodes.sort_unstable();
    nodes.dedup();
    Ok(nodes)
}
