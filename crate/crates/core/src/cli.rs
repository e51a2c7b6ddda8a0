//! JSON configuration, end-to-end pipeline and report.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{topology_constants, DirectedGraph, PinnedTopology, TopologyConstants};
use crate::linalg::{from_rows, to_rows};
use crate::lmi::{SolveStatus, SolverOptions};
use crate::pendulum;
use crate::simulation::{
    evaluate_cost, integrate, lyapunov_dissipation_check, lyapunov_series, tail_energy_ratio, write_csv, DissipationReport, Scenario,
    SimulationOptions,
};
use crate::synthesis::{check_riccati, synthesize, AgentModel, CostWeights, CouplingBoundSet, Formulation, SynthesisProblem, SynthesisResult};
use crate::uncertainty::{default_check_times, iqc_bound_matrix, pendulum_coupling, verify_iqc, CouplingOperator, GainFactor, Placement};
use crate::{Error, Result};

#[derive(Debug, Clone, Parser)]
#[command(name = "iqc-consensus", version, about = "Guaranteed-cost leader-follower consensus synthesis and verification")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for report.json, trajectory.csv and gain.json.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Stop after synthesis and the Riccati checks.
    #[arg(long, conflicts_with = "simulate_only")]
    pub synthesize_only: bool,
    /// Skip synthesis and simulate with the gain from `--gain`.
    #[arg(long, requires = "gain")]
    pub simulate_only: bool,
    /// Gain file (`{"k": [[...]]}`) for `--simulate-only`.
    #[arg(long)]
    pub gain: Option<PathBuf>,
    /// Seed for sampled-uncertainty sweeps; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also run the sampled-uncertainty sweep.
    #[arg(long, conflicts_with = "synthesize_only")]
    pub sweep: bool,
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Pendulum { mass: f64, length: f64, gravity: f64 },
    Matrices { a: Rows, b1: Rows, b2: Rows },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorConfig {
    /// Spring-damper coupling `(p(t)^2 / l^2) [spring, damper]`.
    Pendulum {
        spring: f64,
        damper: f64,
        /// Name of an entry in `placements`.
        placement: String,
        /// Defaults to the pendulum model's length.
        #[serde(default)]
        length: Option<f64>,
    },
    /// Constant gain `factor * matrix`.
    Gain {
        matrix: Rows,
        #[serde(default = "one")]
        factor: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingEdgeConfig {
    /// `[i, j]`, 1-based: node `i` is driven by `x_j - x_i`.
    pub edge: [usize; 2],
    pub operator: OperatorConfig,
    /// IQC bound matrix; derived from the operator when omitted.
    #[serde(default)]
    pub bound: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingGraphConfig {
    pub nodes: usize,
    pub edges: Vec<CouplingEdgeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlGraphConfig {
    /// `[i, j]`, 1-based: node `i` receives `x_j`.
    pub edges: Vec<[usize; 2]>,
    pub pinning: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub q: Rows,
    pub r: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStateConfig {
    pub leader: Vec<f64>,
    pub followers: Vec<Vec<f64>>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub scenarios: usize,
    pub seed: u64,
    /// Radius of the sampled leader initial state.
    pub leader_amplitude: f64,
    /// Half-width of the box the follower initial states are drawn from.
    pub follower_amplitude: f64,
    /// Sampled placement amplitudes lie in `[min_placement_fraction l, l]`.
    pub min_placement_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scenarios: 24,
            seed: 2024,
            leader_amplitude: 0.3,
            follower_amplitude: 0.1,
            min_placement_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeValue {
    pub edge: [usize; 2],
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default)]
    pub gain: Option<Rows>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub cost: Option<f64>,
    #[serde(default)]
    pub nu: Vec<EdgeValue>,
    #[serde(default)]
    pub mu: Vec<EdgeValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub placements: BTreeMap<String, Placement>,
    pub coupling_graph: CouplingGraphConfig,
    pub control_graph: ControlGraphConfig,
    pub weights: WeightsConfig,
    #[serde(default)]
    pub initial_state: Option<InitialStateConfig>,
    #[serde(default)]
    pub formulation: Formulation,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub simulation: SimulationOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub reference: Option<ReferenceConfig>,
}

/// Reads and parses a configuration; parse errors carry the JSON path.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path.is_empty() { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })
}

fn matrix(field: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let m = from_rows(rows).ok_or_else(|| Error::config(field, "expected a nonempty rectangular matrix"))?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::config(field, "entries must be finite"));
    }
    Ok(m)
}

fn node(field: &str, label: usize, nodes: usize) -> Result<usize> {
    if label == 0 || label > nodes {
        return Err(Error::config(field, format!("node {label} is outside 1..={nodes}")));
    }
    Ok(label - 1)
}

fn in_field<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(field, other.to_string()),
    })
}

/// Validated module-level objects built from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: AgentModel,
    pub operators: Vec<CouplingOperator>,
    pub bounds: CouplingBoundSet,
    pub control: PinnedTopology,
    pub weights: CostWeights,
    pub x0_leader: DVector<f64>,
    pub x0_followers: Vec<DVector<f64>>,
    /// Placement name used by each operator, if any.
    pub operator_placements: Vec<Option<String>>,
}

impl Setup {
    pub fn initial_error(&self) -> DVector<f64> {
        pendulum::stacked_errors(&self.x0_leader, &self.x0_followers)
    }

    pub fn scenario(&self, gain: DMatrix<f64>, options: SimulationOptions) -> Result<Scenario> {
        Scenario::new(
            self.model.clone(),
            self.operators.clone(),
            self.control.clone(),
            gain,
            self.x0_leader.clone(),
            self.x0_followers.clone(),
            options,
        )
    }

    pub fn problem(&self, formulation: Formulation) -> Result<SynthesisProblem> {
        let constants = in_field("control_graph", topology_constants(&self.control, formulation.sigma_rule()))?;
        SynthesisProblem::new(self.model.clone(), self.bounds.clone(), constants, self.weights.clone(), formulation)
    }
}

fn build_operators(
    cfg: &RunConfig,
    placements: &BTreeMap<String, Placement>,
    default_length: Option<f64>,
) -> Result<(Vec<CouplingOperator>, Vec<Option<String>>)> {
    let nodes = cfg.coupling_graph.nodes;
    let mut ops = Vec::new();
    let mut names = Vec::new();
    for (k, e) in cfg.coupling_graph.edges.iter().enumerate() {
        let field = format!("coupling_graph.edges[{k}]");
        let edge = (node(&format!("{field}.edge"), e.edge[0], nodes)?, node(&format!("{field}.edge"), e.edge[1], nodes)?);
        let (op, name) = match &e.operator {
            OperatorConfig::Pendulum {
                spring,
                damper,
                placement,
                length,
            } => {
                let p = placements
                    .get(placement)
                    .ok_or_else(|| Error::config(format!("{field}.operator.placement"), format!("unknown placement `{placement}`")))?;
                let l = length
                    .or(default_length)
                    .ok_or_else(|| Error::config(format!("{field}.operator.length"), "required unless the model is a pendulum"))?;
                let op = in_field(&format!("{field}.operator"), pendulum_coupling(edge, *spring, *damper, *p, l))?;
                (op, Some(placement.clone()))
            }
            OperatorConfig::Gain { matrix: m, factor } => {
                let base = matrix(&format!("{field}.operator.matrix"), m)?;
                if !factor.is_finite() {
                    return Err(Error::config(format!("{field}.operator.factor"), "must be finite"));
                }
                (CouplingOperator::memoryless(edge, base, GainFactor::Constant(*factor)), None)
            }
        };
        ops.push(op);
        names.push(name);
    }
    Ok((ops, names))
}

fn build_bounds(cfg: &RunConfig, ops: &[CouplingOperator], n: usize) -> Result<CouplingBoundSet> {
    let graph = in_field("coupling_graph.edges", DirectedGraph::new(cfg.coupling_graph.nodes, ops.iter().map(|o| o.edge)))?;
    let mut bounds = BTreeMap::new();
    for (k, (e, op)) in cfg.coupling_graph.edges.iter().zip(ops).enumerate() {
        let field = format!("coupling_graph.edges[{k}].bound");
        let c = match &e.bound {
            Some(rows) => matrix(&field, rows)?,
            None => in_field(&field, iqc_bound_matrix(op))?,
        };
        if c.ncols() != n {
            return Err(Error::config(field, format!("needs {n} columns, got {}", c.ncols())));
        }
        bounds.insert(op.edge, c);
    }
    in_field("coupling_graph", CouplingBoundSet::new(graph, bounds, n))
}

/// Builds and validates everything except the topology constants.
pub fn build_setup(cfg: &RunConfig) -> Result<Setup> {
    let (model, default_length) = match &cfg.model {
        ModelConfig::Pendulum { mass, length, gravity } => (in_field("model.pendulum", pendulum::model(*mass, *length, *gravity))?, Some(*length)),
        ModelConfig::Matrices { a, b1, b2 } => {
            let m = AgentModel::new(matrix("model.matrices.a", a)?, matrix("model.matrices.b1", b1)?, matrix("model.matrices.b2", b2)?);
            (in_field("model.matrices", m)?, None)
        }
    };
    let n = model.state_dim();
    let nodes = cfg.coupling_graph.nodes;
    if nodes == 0 {
        return Err(Error::config("coupling_graph.nodes", "must be at least 1"));
    }
    let (operators, operator_placements) = build_operators(cfg, &cfg.placements, default_length)?;
    for (k, op) in operators.iter().enumerate() {
        if op.output_dim() != Some(model.coupling_dim()) {
            return Err(Error::config(
                format!("coupling_graph.edges[{k}].operator"),
                format!("output dimension must equal the columns of B2 ({})", model.coupling_dim()),
            ));
        }
    }
    let bounds = build_bounds(cfg, &operators, n)?;

    let ctrl = &cfg.control_graph;
    if ctrl.pinning.len() != nodes {
        return Err(Error::config("control_graph.pinning", format!("expected {nodes} entries, got {}", ctrl.pinning.len())));
    }
    let mut edges = Vec::with_capacity(ctrl.edges.len());
    for (k, e) in ctrl.edges.iter().enumerate() {
        let field = format!("control_graph.edges[{k}]");
        edges.push((node(&field, e[0], nodes)?, node(&field, e[1], nodes)?));
    }
    let graph = in_field("control_graph.edges", DirectedGraph::new(nodes, edges))?;
    let control = in_field("control_graph.pinning", PinnedTopology::new(graph, ctrl.pinning.clone()))?;
    let unreachable = control.unreachable_nodes();
    if !unreachable.is_empty() {
        let labels: Vec<usize> = unreachable.iter().map(|i| i + 1).collect();
        return Err(Error::config(
            "control_graph",
            format!("no spanning tree rooted at a pinned node; nodes {labels:?} cannot be reached from the leader"),
        ));
    }

    let q = matrix("weights.q", &cfg.weights.q)?;
    let r = matrix("weights.r", &cfg.weights.r)?;
    if q.shape() != (n, n) {
        return Err(Error::config("weights.q", format!("expected {n}x{n}")));
    }
    if r.shape() != (model.input_dim(), model.input_dim()) {
        return Err(Error::config("weights.r", format!("expected {0}x{0}", model.input_dim())));
    }
    crate::linalg::require_spd("Q", &q).map_err(|_| Error::config("weights.q", "Q must be symmetric positive definite"))?;
    crate::linalg::require_spd("R", &r).map_err(|_| Error::config("weights.r", "R must be symmetric positive definite"))?;
    let weights = CostWeights::new(q, r)?;

    let (x0_leader, x0_followers) = match &cfg.initial_state {
        Some(s) => {
            if s.leader.len() != n {
                return Err(Error::config("initial_state.leader", format!("expected {n} entries")));
            }
            if s.followers.len() != nodes {
                return Err(Error::config("initial_state.followers", format!("expected {nodes} states")));
            }
            let mut xs = Vec::with_capacity(nodes);
            for (i, x) in s.followers.iter().enumerate() {
                if x.len() != n {
                    return Err(Error::config(format!("initial_state.followers[{i}]"), format!("expected {n} entries")));
                }
                xs.push(DVector::from_vec(x.clone()));
            }
            (DVector::from_vec(s.leader.clone()), xs)
        }
        None => (DVector::zeros(n), vec![DVector::zeros(n); nodes]),
    };

    let setup = Setup {
        model,
        operators,
        bounds,
        control,
        weights,
        x0_leader,
        x0_followers,
        operator_placements,
    };
    in_field("simulation", setup.scenario(DMatrix::zeros(setup.model.input_dim(), n), cfg.simulation))?;
    in_field("solver", cfg.solver.validate())?;
    Ok(setup)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub theta: Vec<f64>,
    pub theta_residual: f64,
    pub h_eigenvalues: Vec<f64>,
    pub sigma_rule: crate::graph::SigmaRule,
    pub sigma: f64,
    pub m_eigenvalues: Vec<f64>,
    pub lambda_bar: f64,
}

impl From<&TopologyConstants> for TopologyReport {
    fn from(c: &TopologyConstants) -> Self {
        Self {
            theta: c.theta.iter().copied().collect(),
            theta_residual: c.theta_residual,
            h_eigenvalues: c.h_eigenvalues.iter().copied().collect(),
            sigma_rule: c.sigma_rule,
            sigma: c.sigma,
            m_eigenvalues: c.m_eigenvalues.iter().copied().collect(),
            lambda_bar: c.lambda_bar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective_value: f64,
    pub max_constraint_eigenvalue: f64,
    pub gap_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub k: Rows,
    pub gamma: Option<f64>,
    pub y: Rows,
    pub y_condition: f64,
    pub nu: Vec<EdgeValue>,
    pub mu: Vec<EdgeValue>,
    /// Largest eigenvalue of each node's Riccati expression.
    pub riccati_margins: Vec<f64>,
    pub bound_at_initial_error: f64,
    pub solver: SolverReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub gain_reference: Option<Rows>,
    /// `|K - K_ref| / |K_ref|` per entry.
    pub gain_relative_error: Option<Rows>,
    pub gain_within_25_percent: Option<bool>,
    pub gamma_reference: Option<f64>,
    pub gamma_relative_error: Option<f64>,
    pub gamma_within_50_percent: Option<bool>,
    pub cost_reference: Option<f64>,
    pub nu_reference: Vec<EdgeValue>,
    pub mu_reference: Vec<EdgeValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqcSummary {
    pub edge: [usize; 2],
    pub check_times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub error_estimate: Vec<f64>,
    pub satisfied: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub horizon: f64,
    pub step: f64,
    pub cost: f64,
    pub tail_estimate: Option<f64>,
    /// Guaranteed bound at the simulated initial error.
    pub bound: Option<f64>,
    /// `cost <= bound + tail + 1e-4`.
    pub bound_satisfied: Option<bool>,
    pub tail_energy_ratio: Option<f64>,
    pub iqc: Vec<IqcSummary>,
    pub dissipation: Option<DissipationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepScenarioReport {
    pub index: usize,
    pub initial_error: Vec<f64>,
    pub placements: BTreeMap<String, Placement>,
    pub cost: f64,
    pub tail_estimate: Option<f64>,
    pub bound: f64,
    pub bound_satisfied: bool,
    pub iqc_satisfied: bool,
    pub dissipation_satisfied: bool,
    pub worst_relative_dissipation_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub scenarios: Vec<SweepScenarioReport>,
    pub all_bounds_satisfied: bool,
    pub all_iqc_satisfied: bool,
    pub all_dissipation_satisfied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub synthesis_ms: f64,
    pub simulation_ms: f64,
    pub sweep_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub formulation: Formulation,
    pub topology: TopologyReport,
    pub initial_error: Vec<f64>,
    pub initial_state_note: Option<String>,
    pub synthesis: Option<SynthesisReport>,
    pub reference: Option<ReferenceComparison>,
    pub simulation: Option<SimulationReport>,
    pub sweep: Option<SweepReport>,
    pub timings: Timings,
}

/// Slack added to the bound when comparing simulated costs.
pub const BOUND_SLACK: f64 = 1e-4;

/// `J <= bound + tail + 1e-4`; a missing tail estimate counts as a failure.
pub fn bound_holds(cost: f64, tail: Option<f64>, bound: f64) -> bool {
    tail.is_some_and(|tail| cost <= bound + tail + BOUND_SLACK)
}

fn edge_values(m: &BTreeMap<(usize, usize), f64>) -> Vec<EdgeValue> {
    m.iter()
        .map(|(&(i, j), &value)| EdgeValue {
            edge: [i + 1, j + 1],
            value,
        })
        .collect()
}

fn relative(a: f64, reference: f64) -> f64 {
    (a - reference).abs() / reference.abs()
}

fn compare(reference: &ReferenceConfig, result: &SynthesisResult) -> Result<ReferenceComparison> {
    let gain_reference = reference.gain.as_ref().map(|g| matrix("reference.gain", g)).transpose()?;
    let gain_relative_error = match &gain_reference {
        Some(g) if g.shape() == result.k.shape() => Some(result.k.zip_map(g, relative)),
        Some(_) => return Err(Error::config("reference.gain", "shape differs from K")),
        None => None,
    };
    let gamma_relative_error = reference.gamma.zip(result.gamma).map(|(r, g)| relative(g, r));
    Ok(ReferenceComparison {
        gain_within_25_percent: gain_relative_error.as_ref().map(|e| e.iter().all(|&v| v <= 0.25)),
        gain_relative_error: gain_relative_error.as_ref().map(to_rows),
        gain_reference: reference.gain.clone(),
        gamma_reference: reference.gamma,
        gamma_within_50_percent: gamma_relative_error.map(|e| e <= 0.5),
        gamma_relative_error,
        cost_reference: reference.cost,
        nu_reference: reference.nu.clone(),
        mu_reference: reference.mu.clone(),
    })
}

pub fn synthesis_report(problem: &SynthesisProblem, result: &SynthesisResult, e0: &DVector<f64>) -> Result<SynthesisReport> {
    let riccati_margins = (0..problem.node_count()).map(|i| check_riccati(problem, result, i)).collect::<Result<_>>()?;
    Ok(SynthesisReport {
        k: to_rows(&result.k),
        gamma: result.gamma,
        y: to_rows(&result.y.to_dmatrix()),
        y_condition: result.y_condition,
        nu: edge_values(&result.nu),
        mu: edge_values(&result.mu),
        riccati_margins,
        bound_at_initial_error: result.bound_at(e0)?,
        solver: SolverReport {
            status: result.solver.status,
            iterations: result.solver.iterations,
            objective_value: result.solver.objective_value,
            max_constraint_eigenvalue: result.solver.max_constraint_eigenvalue,
            gap_bound: result.solver.gap_bound,
        },
    })
}

fn iqc_summaries(setup: &Setup, traj: &crate::simulation::Trajectory, check_times: &[f64]) -> Result<Vec<IqcSummary>> {
    setup
        .operators
        .iter()
        .map(|op| {
            let c = setup.bounds.bound(op.edge.0, op.edge.1).expect("bound per coupling edge");
            let r = verify_iqc(op, &traj.times, &traj.coupling_signal(op.edge), c, check_times)?;
            Ok(IqcSummary {
                edge: [r.edge.0 + 1, r.edge.1 + 1],
                check_times: r.check_times,
                lhs: r.lhs,
                rhs: r.rhs,
                error_estimate: r.error_estimate,
                satisfied: r.satisfied,
            })
        })
        .collect()
}

/// Simulation output plus the CSV columns that go with it.
pub struct SimulationRun {
    pub report: SimulationReport,
    pub trajectory: crate::simulation::Trajectory,
    pub running_cost: Vec<f64>,
    pub lyapunov: Option<Vec<f64>>,
}

pub fn simulate(setup: &Setup, gain: DMatrix<f64>, certificate: Option<&SynthesisResult>, options: SimulationOptions) -> Result<SimulationRun> {
    let scenario = setup.scenario(gain, options)?;
    let traj = integrate(&scenario)?;
    let cost = evaluate_cost(&traj, &setup.weights);
    let checks = default_check_times(options.horizon);
    let iqc = iqc_summaries(setup, &traj, &checks)?;
    let ratio = tail_energy_ratio(&traj);
    let (bound, dissipation, lyapunov) = match certificate {
        Some(r) => {
            let b = r.bound_at(&setup.initial_error())?;
            let d = lyapunov_dissipation_check(&traj, r, &setup.weights, &checks)?;
            (Some(b), Some(d), Some(lyapunov_series(&traj, r)))
        }
        None => (None, None, None),
    };
    Ok(SimulationRun {
        report: SimulationReport {
            horizon: options.horizon,
            step: options.step,
            cost: cost.cost,
            tail_estimate: cost.tail_estimate,
            bound_satisfied: bound.map(|b| bound_holds(cost.cost, cost.tail_estimate, b)),
            bound,
            tail_energy_ratio: ratio.is_finite().then_some(ratio),
            iqc,
            dissipation,
        },
        trajectory: traj,
        running_cost: cost.running_cost,
        lyapunov,
    })
}

fn sample_placement(rng: &mut ChaCha8Rng, length: f64, min_fraction: f64) -> Placement {
    let amplitude = length * rng.random_range(min_fraction..=1.0);
    let frequency = rng.random_range(0.05..1.0);
    let phase = rng.random_range(0.0..TAU);
    if rng.random_bool(0.5) {
        Placement::Sin { amplitude, frequency, phase }
    } else {
        Placement::Cos { amplitude, frequency, phase }
    }
}

/// One sampled sweep scenario: initial states and placement realisations.
#[derive(Debug, Clone)]
pub struct SweepSample {
    pub x0_leader: DVector<f64>,
    pub x0_followers: Vec<DVector<f64>>,
    pub placements: BTreeMap<String, Placement>,
}

/// Deterministic samples; scenario `k` draws from stream `k` of the seed.
pub fn sweep_samples(cfg: &RunConfig, setup: &Setup, seed: u64) -> Vec<SweepSample> {
    let n = setup.model.state_dim();
    let length = match cfg.model {
        ModelConfig::Pendulum { length, .. } => length,
        ModelConfig::Matrices { .. } => 1.0,
    };
    let s = &cfg.sweep;
    (0..s.scenarios)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            // Leader on a circle in its first two coordinates.
            let angle = rng.random_range(0.0..TAU);
            let mut x0 = DVector::zeros(n);
            x0[0] = s.leader_amplitude * angle.cos();
            if n > 1 {
                x0[1] = s.leader_amplitude * angle.sin();
            }
            let xs = (0..setup.x0_followers.len())
                .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-s.follower_amplitude..=s.follower_amplitude)))
                .collect();
            let placements = cfg
                .placements
                .keys()
                .map(|name| (name.clone(), sample_placement(&mut rng, length, s.min_placement_fraction)))
                .collect();
            SweepSample {
                x0_leader: x0,
                x0_followers: xs,
                placements,
            }
        })
        .collect()
}

/// Rebuilds the operators with the sampled placements.
pub fn resample_setup(cfg: &RunConfig, setup: &Setup, sample: &SweepSample) -> Result<Setup> {
    let mut placements = cfg.placements.clone();
    placements.extend(sample.placements.clone());
    let default_length = match cfg.model {
        ModelConfig::Pendulum { length, .. } => Some(length),
        ModelConfig::Matrices { .. } => None,
    };
    let (operators, _) = build_operators(cfg, &placements, default_length)?;
    Ok(Setup {
        operators,
        x0_leader: sample.x0_leader.clone(),
        x0_followers: sample.x0_followers.clone(),
        ..setup.clone()
    })
}

/// Simulates every sampled scenario concurrently with the synthesised gain.
pub fn run_sweep(cfg: &RunConfig, setup: &Setup, result: &SynthesisResult, seed: u64) -> Result<SweepReport> {
    let samples = sweep_samples(cfg, setup, seed);
    let scenarios = samples
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let s = resample_setup(cfg, setup, sample)?;
            let run = simulate(&s, result.k.clone(), Some(result), cfg.simulation)?;
            let dissipation = run.report.dissipation.as_ref().expect("certificate given");
            Ok(SweepScenarioReport {
                index,
                initial_error: s.initial_error().iter().copied().collect(),
                placements: sample.placements.clone(),
                cost: run.report.cost,
                tail_estimate: run.report.tail_estimate,
                bound: run.report.bound.expect("certificate given"),
                bound_satisfied: run.report.bound_satisfied == Some(true),
                iqc_satisfied: run.report.iqc.iter().all(|r| r.satisfied.iter().all(|&v| v)),
                dissipation_satisfied: dissipation.all_satisfied(),
                worst_relative_dissipation_residual: dissipation.worst_relative_residual(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        seed,
        all_bounds_satisfied: scenarios.iter().all(|s| s.bound_satisfied),
        all_iqc_satisfied: scenarios.iter().all(|s| s.iqc_satisfied),
        all_dissipation_satisfied: scenarios.iter().all(|s| s.dissipation_satisfied),
        scenarios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainFile {
    pub k: Rows,
}

pub fn read_gain(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::config("--gain", e.to_string()))?;
    let g: GainFile = serde_json::from_str(&text).map_err(|e| Error::config("--gain", e.to_string()))?;
    matrix("--gain.k", &g.k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Full,
    SynthesizeOnly,
    SimulateOnly,
}

/// Everything a run produces before it is written to disk.
pub struct RunOutput {
    pub report: RunReport,
    pub simulation: Option<SimulationRun>,
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Executes the pipeline for a parsed configuration.
pub fn execute(cfg: &RunConfig, mode: Mode, gain: Option<DMatrix<f64>>, sweep_seed: Option<u64>) -> Result<RunOutput> {
    let setup = build_setup(cfg)?;
    let problem = setup.problem(cfg.formulation)?;
    let e0 = setup.initial_error();
    let mut timings = Timings::default();

    let (result, synthesis, reference) = if mode == Mode::SimulateOnly {
        (None, None, None)
    } else {
        let t = Instant::now();
        let e0_opt = cfg.initial_state.as_ref().map(|_| &e0);
        let result = synthesize(&problem, e0_opt, &cfg.solver)?;
        timings.synthesis_ms = millis(t);
        let report = synthesis_report(&problem, &result, &e0)?;
        let reference = cfg.reference.as_ref().map(|r| compare(r, &result)).transpose()?;
        (Some(result), Some(report), reference)
    };

    let gain = match (&result, gain) {
        (Some(r), _) => Some(r.k.clone()),
        (None, Some(g)) => {
            let expected = (setup.model.input_dim(), setup.model.state_dim());
            if g.shape() != expected {
                return Err(Error::config("--gain.k", format!("expected a {}x{} matrix", expected.0, expected.1)));
            }
            Some(g)
        }
        (None, None) => return Err(Error::config("--gain", "required with --simulate-only")),
    };

    let mut simulation = None;
    let mut sweep = None;
    if mode != Mode::SynthesizeOnly {
        let t = Instant::now();
        simulation = Some(simulate(&setup, gain.expect("gain available"), result.as_ref(), cfg.simulation)?);
        timings.simulation_ms = millis(t);
        if let (Some(seed), Some(r)) = (sweep_seed, &result) {
            let t = Instant::now();
            sweep = Some(run_sweep(cfg, &setup, r, seed)?);
            timings.sweep_ms = millis(t);
        }
    }

    Ok(RunOutput {
        report: RunReport {
            formulation: cfg.formulation,
            topology: TopologyReport::from(&problem.constants),
            initial_error: e0.iter().copied().collect(),
            initial_state_note: cfg.initial_state.as_ref().and_then(|s| s.note.clone()),
            synthesis,
            reference,
            simulation: simulation.as_ref().map(|s| s.report.clone()),
            sweep,
            timings,
        },
        simulation,
    })
}

/// Writes `report.json`, `trajectory.csv` (when simulated) and `gain.json`
/// (when synthesised) into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)?)?;
    if let Some(s) = &out.report.synthesis {
        fs::write(dir.join("gain.json"), serde_json::to_string_pretty(&GainFile { k: s.k.clone() })?)?;
    }
    if let Some(sim) = &out.simulation {
        let file = fs::File::create(dir.join("trajectory.csv"))?;
        write_csv(std::io::BufWriter::new(file), &sim.trajectory, Some(&sim.running_cost), sim.lyapunov.as_deref())?;
    }
    Ok(())
}

/// Full command: load, execute, write.
pub fn run(cli: &Cli) -> Result<RunReport> {
    let cfg = load_config(&cli.config)?;
    let mode = if cli.synthesize_only {
        Mode::SynthesizeOnly
    } else if cli.simulate_only {
        Mode::SimulateOnly
    } else {
        Mode::Full
    };
    let gain = cli.gain.as_deref().map(read_gain).transpose()?;
    let seed = cli.sweep.then(|| cli.seed.unwrap_or(cfg.sweep.seed));
    let out = execute(&cfg, mode, gain, seed)?;
    write_outputs(&cli.out, &out)?;
    Ok(out.report)
}

/// 0 success, 2 infeasible synthesis, 3 configuration error, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible { .. } | Error::MaxIterations { .. } => 2,
        Error::Config { .. }
        | Error::NoPinnedNode
        | Error::SingularTopology
        | Error::IndefiniteTopology { .. }
        | Error::NoPinnedSpanningTree { .. }
        | Error::InvalidGraph(_)
        | Error::NotPositiveDefinite { .. }
        | Error::PlacementOutOfRange { .. }
        | Error::DimensionMismatch { .. }
        | Error::InvalidScenario(_)
        | Error::Json(_) => 3,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = include_str!("../fixtures/pendulum.json");

    #[test]
    fn fixture_parses_and_builds() {
        let cfg = parse_config(FIXTURE).unwrap();
        let setup = build_setup(&cfg).unwrap();
        assert_eq!(setup.operators.len(), 4);
        assert_eq!(setup.initial_error().len(), 6);
        assert_eq!(setup.operator_placements[0].as_deref(), Some("a"));
    }

    #[test]
    fn parse_errors_name_the_field() {
        let mut v: serde_json::Value = serde_json::from_str(FIXTURE).unwrap();
        v["weights"]["q"] = serde_json::json!("identity");
        match parse_config(&v.to_string()) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "weights.q"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let mut cfg = parse_config(FIXTURE).unwrap();
        cfg.control_graph.pinning = vec![0.0; 3];
        match build_setup(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "control_graph.pinning"),
            other => panic!("{other:?}"),
        }
        let mut cfg = parse_config(FIXTURE).unwrap();
        cfg.weights.q = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        let err = build_setup(&cfg).unwrap_err();
        assert!(matches!(&err, Error::Config { field, message } if field == "weights.q" && message.contains('Q')));
        assert_eq!(exit_code(&err), 3);
        let mut cfg = parse_config(FIXTURE).unwrap();
        cfg.coupling_graph.edges[0].operator = OperatorConfig::Pendulum {
            spring: 1.0,
            damper: 1.0,
            placement: "zz".into(),
            length: None,
        };
        assert!(matches!(build_setup(&cfg), Err(Error::Config { field, .. }) if field == "coupling_graph.edges[0].operator.placement"));
    }

    #[test]
    fn sweep_samples_are_deterministic_and_admissible() {
        let cfg = parse_config(FIXTURE).unwrap();
        let setup = build_setup(&cfg).unwrap();
        let a = sweep_samples(&cfg, &setup, 7);
        let b = sweep_samples(&cfg, &setup, 7);
        assert_eq!(a.len(), cfg.sweep.scenarios);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.x0_leader, y.x0_leader);
            assert_eq!(x.placements, y.placements);
            for p in x.placements.values() {
                assert!(p.sup_abs() <= 1.0 && p.sup_abs() > 0.0);
            }
        }
        assert_ne!(a[0].x0_leader, a[1].x0_leader);
    }

    #[test]
    fn bound_check_requires_tail() {
        assert!(bound_holds(1.0, Some(0.0), 1.0));
        assert!(!bound_holds(1.0, None, 5.0));
        assert!(!bound_holds(1.1, Some(0.0), 1.0));
    }
}
