//! Certificate LMIs, guaranteed-cost minimisation and gain extraction.
//!
//! Decision variables are `Y = Y' > 0` and, per coupling edge `(i, j)`, the
//! reciprocals `alpha_ij = 1/nu_ij` and `beta_ij = 1/mu_ij`, which make every
//! node block affine. Node `i` contributes
//!
//! ```text
//! [ Z_i         Y Q^{1/2}      Y Chat_i'   Y Cbar_i' ]
//! [ Q^{1/2} Y   -I / theta_i   0           0         ]  < 0
//! [ Chat_i Y    0              -Phi_i      0         ]
//! [ Cbar_i Y    0              0           -Omega_i  ]
//! ```
//!
//! with `Z_i = AY + YA' - sigma theta_i B1 Rhat^-1 B1' + theta_i sum_j (alpha_ij + beta_ij) B2 B2'`,
//! `Phi_i = diag(theta_i alpha_ij)` over `j` in `S_i` and `Omega_i` diagonal
//! over the edges `(r, i)` entering the coupling graph at `i`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::graph::{topology_constants, DirectedGraph, PinnedTopology, SigmaRule, TopologyConstants};
use crate::linalg::{max_eigenvalue, require_spd, spd_condition, spd_inverse, vstack};
use crate::lmi::{self, AffineLmiConstraint, BlockLmiBuilder, LmiPoint, LmiProgram, Sense, SolveStatus, SolverOptions, SymMatrix};
use crate::{Error, Result};

/// Shared agent dynamics `x' = A x + B1 u + B2 w`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

impl AgentModel {
    pub fn new(a: DMatrix<f64>, b1: DMatrix<f64>, b2: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::dims("A", "nonempty square matrix", format!("{}x{}", a.nrows(), a.ncols())));
        }
        if b1.nrows() != n || b1.ncols() == 0 {
            return Err(Error::dims("B1", format!("{n}xp, p >= 1"), format!("{}x{}", b1.nrows(), b1.ncols())));
        }
        if b2.nrows() != n || b2.ncols() == 0 {
            return Err(Error::dims("B2", format!("{n}xm, m >= 1"), format!("{}x{}", b2.nrows(), b2.ncols())));
        }
        Ok(Self { a, b1, b2 })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b1.ncols()
    }

    pub fn coupling_dim(&self) -> usize {
        self.b2.ncols()
    }
}

/// Coupling graph with one IQC bound matrix `C_ij` per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBoundSet {
    graph: DirectedGraph,
    bounds: BTreeMap<(usize, usize), DMatrix<f64>>,
}

impl CouplingBoundSet {
    pub fn new(graph: DirectedGraph, bounds: BTreeMap<(usize, usize), DMatrix<f64>>, state_dim: usize) -> Result<Self> {
        for e in graph.edges() {
            let c = bounds
                .get(&e)
                .ok_or_else(|| Error::InvalidScenario(format!("coupling edge ({}, {}) has no bound matrix", e.0 + 1, e.1 + 1)))?;
            if c.ncols() != state_dim || c.nrows() == 0 {
                return Err(Error::dims(format!("C_{}{}", e.0 + 1, e.1 + 1), format!("rx{state_dim}"), format!("{}x{}", c.nrows(), c.ncols())));
            }
        }
        if let Some(e) = bounds.keys().find(|e| !graph.contains(e.0, e.1)) {
            return Err(Error::InvalidScenario(format!("bound matrix given for non-edge ({}, {})", e.0 + 1, e.1 + 1)));
        }
        Ok(Self { graph, bounds })
    }

    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn bound(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.bounds.get(&(i, j))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bounds.keys().copied()
    }

    /// Stack of `C_ij` over `j` in `S_i`; `None` when `S_i` is empty.
    pub fn c_hat(&self, i: usize) -> Option<DMatrix<f64>> {
        let blocks: Vec<&DMatrix<f64>> = self.graph.in_neighbors(i).into_iter().map(|j| &self.bounds[&(i, j)]).collect();
        vstack(&blocks)
    }

    /// Stack of `C_ri` over the edges `(r, i)`; `None` when there are none.
    pub fn c_bar(&self, i: usize) -> Option<DMatrix<f64>> {
        let blocks: Vec<&DMatrix<f64>> = self.graph.out_neighbors(i).into_iter().map(|r| &self.bounds[&(r, i)]).collect();
        vstack(&blocks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        require_spd("Q", &q)?;
        require_spd("R", &r)?;
        Ok(Self { q, r })
    }

    /// `Rhat = (lambda_bar / sigma) R`.
    pub fn r_hat(&self, constants: &TopologyConstants) -> DMatrix<f64> {
        &self.r * (constants.lambda_bar / constants.sigma)
    }
}

/// How `sigma` and the `Omega_i` weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// `sigma = lambda_max(H)/2` and `Omega_i = diag(theta_i beta_ri)`.
    Standard,
    /// `sigma = lambda_min(H)/2` and `Omega_i = diag(theta_r^2 beta_ri / theta_i)`,
    /// under which the Lyapunov decrease argument goes through.
    #[default]
    Certified,
}

impl Formulation {
    pub fn sigma_rule(self) -> SigmaRule {
        match self {
            Formulation::Standard => SigmaRule::HalfMaxEigenvalue,
            Formulation::Certified => SigmaRule::HalfMinEigenvalue,
        }
    }

    /// Coefficient of `beta_ri` in the `Omega_i` entry for edge `(r, i)`.
    pub fn omega_weight(self, theta: &DVector<f64>, r: usize, i: usize) -> f64 {
        match self {
            Formulation::Standard => theta[i],
            Formulation::Certified => theta[r] * theta[r] / theta[i],
        }
    }
}

/// Everything the certificate depends on, checked for consistency.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisProblem {
    pub model: AgentModel,
    pub couplings: CouplingBoundSet,
    pub constants: TopologyConstants,
    pub weights: CostWeights,
    pub formulation: Formulation,
}

impl SynthesisProblem {
    pub fn new(
        model: AgentModel,
        couplings: CouplingBoundSet,
        constants: TopologyConstants,
        weights: CostWeights,
        formulation: Formulation,
    ) -> Result<Self> {
        let n = model.state_dim();
        if couplings.graph().node_count() != constants.node_count() {
            return Err(Error::dims("coupling graph nodes", constants.node_count(), couplings.graph().node_count()));
        }
        if weights.q.nrows() != n {
            return Err(Error::dims("Q", format!("{n}x{n}"), format!("{}x{}", weights.q.nrows(), weights.q.ncols())));
        }
        let p = model.input_dim();
        if weights.r.nrows() != p {
            return Err(Error::dims("R", format!("{p}x{p}"), format!("{}x{}", weights.r.nrows(), weights.r.ncols())));
        }
        if let Some(e) = couplings.edges().find(|&(i, j)| couplings.bound(i, j).unwrap().ncols() != n) {
            return Err(Error::dims(format!("C_{}{}", e.0 + 1, e.1 + 1), n, couplings.bound(e.0, e.1).unwrap().ncols()));
        }
        if constants.sigma_rule != formulation.sigma_rule() {
            return Err(Error::InvalidScenario(format!(
                "topology constants use {:?} but the {:?} formulation needs {:?}",
                constants.sigma_rule,
                formulation,
                formulation.sigma_rule()
            )));
        }
        Ok(Self {
            model,
            couplings,
            constants,
            weights,
            formulation,
        })
    }

    /// Computes the topology constants required by `formulation`.
    pub fn from_topology(
        model: AgentModel,
        couplings: CouplingBoundSet,
        topology: &PinnedTopology,
        weights: CostWeights,
        formulation: Formulation,
    ) -> Result<Self> {
        if topology.node_count() != couplings.graph().node_count() {
            return Err(Error::dims("control graph nodes", couplings.graph().node_count(), topology.node_count()));
        }
        let constants = topology_constants(topology, formulation.sigma_rule())?;
        Self::new(model, couplings, constants, weights, formulation)
    }

    pub fn node_count(&self) -> usize {
        self.constants.node_count()
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }
}

/// The assembled program with the indices of its scalar variables.
#[derive(Debug, Clone)]
pub struct CertificateLmis {
    pub program: LmiProgram,
    pub alpha: BTreeMap<(usize, usize), usize>,
    pub beta: BTreeMap<(usize, usize), usize>,
    /// Index of the node-`i` block constraint in `program.constraints`.
    pub node_constraints: Vec<usize>,
}

fn edge_label(prefix: &str, (i, j): (usize, usize)) -> String {
    format!("{prefix}_{}_{}", i + 1, j + 1)
}

fn node_block(p: &SynthesisProblem, i: usize, alpha: &BTreeMap<(usize, usize), usize>, beta: &BTreeMap<(usize, usize), usize>) -> Result<AffineLmiConstraint> {
    let n = p.state_dim();
    let theta = &p.constants.theta;
    let ti = theta[i];
    let model = &p.model;
    let r_hat_inv = spd_inverse(&p.weights.r_hat(&p.constants)).ok_or(Error::NotPositiveDefinite { name: "R".into() })?;
    let q_half = lmi::symmetric_sqrt(&SymMatrix::from_dmatrix(&p.weights.q), 1e-12)?.to_dmatrix();
    let b2b2 = &model.b2 * model.b2.transpose();

    let s_i = p.couplings.graph().in_neighbors(i);
    let r_i = p.couplings.graph().out_neighbors(i);
    let c_hat = p.couplings.c_hat(i);
    let c_bar = p.couplings.c_bar(i);
    let mut sizes = vec![n, n];
    if let Some(c) = &c_hat {
        sizes.push(c.nrows());
    }
    if let Some(c) = &c_bar {
        sizes.push(c.nrows());
    }
    let mut b = BlockLmiBuilder::new(&sizes, n);
    let eye = DMatrix::identity(n, n);

    b.product(0, &model.a, 0, &eye);
    b.constant(0, 0, &(&model.b1 * &r_hat_inv * model.b1.transpose() * (-p.constants.sigma * ti)));
    for &j in &s_i {
        b.scalar(alpha[&(i, j)], 0, 0, &(&b2b2 * ti));
        b.scalar(beta[&(i, j)], 0, 0, &(&b2b2 * ti));
    }
    b.product(1, &q_half, 0, &eye);
    b.constant(1, 1, &(DMatrix::identity(n, n) * (-1.0 / ti)));

    let mut next = 2;
    if let Some(c) = &c_hat {
        b.product(next, c, 0, &eye);
        let mut row = 0;
        for &j in &s_i {
            let rows = p.couplings.bound(i, j).unwrap().nrows();
            let mut e = DMatrix::zeros(c.nrows(), c.nrows());
            e.view_mut((row, row), (rows, rows)).fill_with_identity();
            b.scalar(alpha[&(i, j)], next, next, &(e * -ti));
            row += rows;
        }
        next += 1;
    }
    if let Some(c) = &c_bar {
        b.product(next, c, 0, &eye);
        let mut row = 0;
        for &r in &r_i {
            let rows = p.couplings.bound(r, i).unwrap().nrows();
            let mut e = DMatrix::zeros(c.nrows(), c.nrows());
            e.view_mut((row, row), (rows, rows)).fill_with_identity();
            let w = p.formulation.omega_weight(theta, r, i);
            b.scalar(beta[&(r, i)], next, next, &(e * -w));
            row += rows;
        }
    }
    Ok(b.build(format!("node {}", i + 1), Sense::NegativeDefinite))
}

/// Node certificate blocks, `Y > 0`, and `alpha, beta > 0`.
pub fn assemble_certificate_lmis(p: &SynthesisProblem, strictness_margin: f64) -> Result<CertificateLmis> {
    let n = p.state_dim();
    let mut program = LmiProgram::new(n, strictness_margin);
    let edges: Vec<(usize, usize)> = p.couplings.edges().collect();
    let alpha: BTreeMap<_, _> = edges.iter().map(|&e| (e, program.add_scalar(edge_label("alpha", e)))).collect();
    let beta: BTreeMap<_, _> = edges.iter().map(|&e| (e, program.add_scalar(edge_label("beta", e)))).collect();

    let mut node_constraints = Vec::with_capacity(p.node_count());
    for i in 0..p.node_count() {
        node_constraints.push(program.constraints.len());
        program.push(node_block(p, i, &alpha, &beta)?);
    }
    program.push(
        AffineLmiConstraint::new("Y > 0", SymMatrix::zeros(n), Sense::PositiveDefinite)
            .with_matrix_term(DMatrix::identity(n, n) * 0.5, DMatrix::identity(n, n)),
    );
    for (&e, &k) in alpha.iter().chain(beta.iter()) {
        let name = if alpha.get(&e) == Some(&k) { edge_label("alpha", e) } else { edge_label("beta", e) };
        program.push(AffineLmiConstraint::new(format!("{name} > 0"), SymMatrix::zeros(1), Sense::PositiveDefinite).with_scalar(k, SymMatrix::identity(1)));
    }
    Ok(CertificateLmis {
        program,
        alpha,
        beta,
        node_constraints,
    })
}

/// `[[gamma, e0'], [e0, diag(theta_i Y)]] >= 0`.
fn gamma_constraint(p: &SynthesisProblem, gamma: usize, e0: &DVector<f64>) -> AffineLmiConstraint {
    let n = p.state_dim();
    let nodes = p.node_count();
    let mut sizes = vec![1];
    sizes.extend(std::iter::repeat_n(n, nodes));
    let mut b = BlockLmiBuilder::new(&sizes, n);
    b.scalar(gamma, 0, 0, &DMatrix::identity(1, 1));
    for i in 0..nodes {
        let ei = DMatrix::from_row_slice(1, n, e0.rows(i * n, n).as_slice());
        b.constant(0, i + 1, &ei);
        let half = DMatrix::identity(n, n) * (p.constants.theta[i] / 2.0);
        b.product(i + 1, &half, i + 1, &DMatrix::identity(n, n));
    }
    b.build("gamma epigraph", Sense::PositiveDefinite).non_strict()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSummary {
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective_value: f64,
    pub max_constraint_eigenvalue: f64,
    pub gap_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    pub y: SymMatrix,
    pub y_inverse: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub nu: BTreeMap<(usize, usize), f64>,
    pub mu: BTreeMap<(usize, usize), f64>,
    /// Optimal cost bound; `None` for feasibility-only synthesis.
    pub gamma: Option<f64>,
    pub constants: TopologyConstants,
    pub formulation: Formulation,
    pub y_condition: f64,
    pub solver: SolverSummary,
}

impl SynthesisResult {
    /// `sum_i e_i(0)' Y^-1 e_i(0) / theta_i`.
    pub fn bound_at(&self, e0: &DVector<f64>) -> Result<f64> {
        quadratic_bound(&self.y_inverse, &self.constants.theta, e0)
    }
}

fn quadratic_bound(y_inv: &DMatrix<f64>, theta: &DVector<f64>, e0: &DVector<f64>) -> Result<f64> {
    let n = y_inv.nrows();
    if e0.len() != n * theta.len() {
        return Err(Error::dims("stacked initial error", n * theta.len(), e0.len()));
    }
    Ok((0..theta.len())
        .map(|i| {
            let ei = e0.rows(i * n, n);
            (ei.transpose() * y_inv * ei)[(0, 0)] / theta[i]
        })
        .sum())
}

/// `sum_i e_i(0)' Y^-1 e_i(0) / theta_i`.
pub fn guaranteed_bound(result: &SynthesisResult, e0: &DVector<f64>) -> Result<f64> {
    result.bound_at(e0)
}

/// `K = -(sigma / lambda_bar) R^-1 B1' Y^-1`.
pub fn gain(p: &SynthesisProblem, y_inverse: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r_inv = spd_inverse(&p.weights.r).ok_or(Error::NotPositiveDefinite { name: "R".into() })?;
    Ok(r_inv * p.model.b1.transpose() * y_inverse * (-p.constants.sigma / p.constants.lambda_bar))
}

fn starting_point(lmis: &CertificateLmis, n: usize) -> LmiPoint {
    let mut scalars = vec![0.0; lmis.program.scalar_count()];
    for &k in lmis.alpha.values().chain(lmis.beta.values()) {
        scalars[k] = 1.0;
    }
    LmiPoint {
        y: SymMatrix::identity(n),
        scalars,
    }
}

/// Minimises the cost bound for `e0`, or finds a well-centred certificate
/// (maximising `lambda_min(Y)`) when `e0` is `None`.
pub fn synthesize(p: &SynthesisProblem, e0: Option<&DVector<f64>>, opts: &SolverOptions) -> Result<SynthesisResult> {
    let n = p.state_dim();
    let mut lmis = assemble_certificate_lmis(p, opts.strictness_margin)?;
    let mut start = starting_point(&lmis, n);
    let objective_var = match e0 {
        Some(e0) => {
            if e0.len() != n * p.node_count() {
                return Err(Error::dims("stacked initial error", n * p.node_count(), e0.len()));
            }
            let g = lmis.program.add_scalar("gamma");
            lmis.program.set_objective(g, 1.0);
            lmis.program.push(gamma_constraint(p, g, e0));
            start.scalars.push(0.0);
            g
        }
        None => {
            let tau = lmis.program.add_scalar("tau");
            lmis.program.set_objective(tau, -1.0);
            lmis.program.push(
                AffineLmiConstraint::new("Y >= tau I", SymMatrix::zeros(n), Sense::PositiveDefinite)
                    .with_matrix_term(DMatrix::identity(n, n) * 0.5, DMatrix::identity(n, n))
                    .with_scalar(tau, SymMatrix::scaled_identity(n, -1.0))
                    .non_strict(),
            );
            start.scalars.push(0.0);
            tau
        }
    };

    let sol = lmi::solve_from(&lmis.program, opts, &start)?;
    match sol.status {
        SolveStatus::Infeasible => {
            return Err(Error::Infeasible {
                max_eigenvalue: sol.max_constraint_eigenvalue,
            })
        }
        SolveStatus::MaxIterations => return Err(Error::MaxIterations { iterations: sol.iterations }),
        SolveStatus::Optimal | SolveStatus::Feasible => {}
    }

    let y_dense = sol.y.to_dmatrix();
    let y_inverse = spd_inverse(&y_dense).ok_or(Error::SingularY)?;
    let k = gain(p, &y_inverse)?;
    let recip = |vars: &BTreeMap<(usize, usize), usize>| vars.iter().map(|(&e, &v)| (e, 1.0 / sol.scalars[v])).collect();
    Ok(SynthesisResult {
        nu: recip(&lmis.alpha),
        mu: recip(&lmis.beta),
        gamma: e0.map(|_| sol.scalars[objective_var]),
        y_condition: spd_condition(&y_dense),
        y: sol.y.clone(),
        y_inverse,
        k,
        constants: p.constants.clone(),
        formulation: p.formulation,
        solver: SolverSummary {
            status: sol.status,
            iterations: sol.iterations,
            objective_value: sol.objective_value,
            max_constraint_eigenvalue: sol.max_constraint_eigenvalue,
            gap_bound: sol.gap_bound,
        },
    })
}

/// Riccati expression for node `i` at `(Y, nu, mu)`:
///
/// ```text
/// AY + YA' - sigma theta_i B1 Rhat^-1 B1' + theta_i sum_j (1/nu_ij + 1/mu_ij) B2 B2'
///   + Y (theta_i Q + sum_j (nu_ij / theta_i) C_ij'C_ij + sum_r (mu_ri / w_ri) C_ri'C_ri) Y
/// ```
///
/// where `w_ri` is the `Omega_i` weight of the formulation.
pub fn riccati_matrix(
    p: &SynthesisProblem,
    y: &DMatrix<f64>,
    nu: &BTreeMap<(usize, usize), f64>,
    mu: &BTreeMap<(usize, usize), f64>,
    i: usize,
) -> Result<DMatrix<f64>> {
    let theta = &p.constants.theta;
    let ti = theta[i];
    let m = &p.model;
    let r_hat_inv = spd_inverse(&p.weights.r_hat(&p.constants)).ok_or(Error::NotPositiveDefinite { name: "R".into() })?;
    let b2b2 = &m.b2 * m.b2.transpose();
    let mut out = &m.a * y + y * m.a.transpose() - &m.b1 * r_hat_inv * m.b1.transpose() * (p.constants.sigma * ti);
    let mut inner = &p.weights.q * ti;
    let missing = |what: &str, e: (usize, usize)| Error::InvalidScenario(format!("{what} missing for edge ({}, {})", e.0 + 1, e.1 + 1));
    for j in p.couplings.graph().in_neighbors(i) {
        let nu_ij = *nu.get(&(i, j)).ok_or_else(|| missing("nu", (i, j)))?;
        let mu_ij = *mu.get(&(i, j)).ok_or_else(|| missing("mu", (i, j)))?;
        out += &b2b2 * (ti * (1.0 / nu_ij + 1.0 / mu_ij));
        let c = p.couplings.bound(i, j).unwrap();
        inner += c.transpose() * c * (nu_ij / ti);
    }
    for r in p.couplings.graph().out_neighbors(i) {
        let mu_ri = *mu.get(&(r, i)).ok_or_else(|| missing("mu", (r, i)))?;
        let c = p.couplings.bound(r, i).unwrap();
        inner += c.transpose() * c * (mu_ri / p.formulation.omega_weight(theta, r, i));
    }
    out += y * inner * y;
    Ok(crate::linalg::symmetrize(&out))
}

/// Largest eigenvalue of the node-`i` Riccati expression; negative iff the
/// certificate holds at node `i`.
pub fn check_riccati(p: &SynthesisProblem, result: &SynthesisResult, i: usize) -> Result<f64> {
    if i >= p.node_count() {
        return Err(Error::dims("node index", format!("< {}", p.node_count()), i));
    }
    Ok(max_eigenvalue(&riccati_matrix(p, &result.y.to_dmatrix(), &result.nu, &result.mu, i)?))
}
