//! Three coupled pendulums tracking a leader pendulum.
//!
//! Pendulum `i` has state `(angle, angular rate)`. Springs and dampers whose
//! attachment points `a(t)`, `b(t)` move along the rods couple pendulums 1-2
//! and 2-3; only pendulum 1 observes the leader and control information flows
//! 1 -> 2 -> 3.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::graph::{DirectedGraph, PinnedTopology};
use crate::synthesis::{AgentModel, CostWeights, CouplingBoundSet};
use crate::uncertainty::{iqc_bound_matrix, pendulum_coupling, CouplingOperator, Placement};
use crate::Result;

/// `A = [[0, 1], [-g/l, 0]]`, `B1 = [0; -1/(m l^2)]`, `B2 = [0; 1/m]`.
pub fn model(mass: f64, length: f64, gravity: f64) -> Result<AgentModel> {
    if !(mass > 0.0 && length > 0.0 && gravity.is_finite() && mass.is_finite() && length.is_finite()) {
        return Err(crate::Error::InvalidScenario(format!(
            "pendulum needs positive finite mass and length (got m = {mass}, l = {length}, g = {gravity})"
        )));
    }
    AgentModel::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -gravity / length, 0.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, -1.0 / (mass * length * length)]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0 / mass]),
    )
}

/// Gain row used for the coupling of pendulum 3 to pendulum 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RightPairDamping {
    /// `[k21, k22]`, the same pair as the opposite direction.
    #[default]
    Symmetric,
    /// `[k21, k12]`.
    Crossed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParameters {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub k11: f64,
    pub k12: f64,
    pub k21: f64,
    pub k22: f64,
    pub a: Placement,
    pub b: Placement,
    pub right_pair_damping: RightPairDamping,
}

impl Default for PendulumParameters {
    fn default() -> Self {
        Self {
            mass: 0.25,
            length: 1.0,
            gravity: 10.0,
            k11: 2.0,
            k12: 1.0,
            k21: 4.0,
            k22: 2.0,
            a: Placement::Sin {
                amplitude: 0.5,
                frequency: 0.2,
                phase: 0.0,
            },
            b: Placement::Cos {
                amplitude: 0.8,
                frequency: 0.1,
                phase: 0.0,
            },
            right_pair_damping: RightPairDamping::Symmetric,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PendulumFixture {
    pub model: AgentModel,
    pub operators: Vec<CouplingOperator>,
    pub bounds: CouplingBoundSet,
    pub control: PinnedTopology,
    pub weights: CostWeights,
}

/// Coupling edges `(1,2), (2,1), (2,3), (3,2)` (zero-based below).
pub fn coupling_operators(p: &PendulumParameters) -> Result<Vec<CouplingOperator>> {
    let k32 = match p.right_pair_damping {
        RightPairDamping::Symmetric => p.k22,
        RightPairDamping::Crossed => p.k12,
    };
    Ok(vec![
        pendulum_coupling((0, 1), p.k11, p.k12, p.a, p.length)?,
        pendulum_coupling((1, 0), p.k11, p.k12, p.a, p.length)?,
        pendulum_coupling((1, 2), p.k21, p.k22, p.b, p.length)?,
        pendulum_coupling((2, 1), p.k21, k32, p.b, p.length)?,
    ])
}

/// Bound set built from the operators' own IQC matrices.
pub fn bounds_for(node_count: usize, state_dim: usize, operators: &[CouplingOperator]) -> Result<CouplingBoundSet> {
    let graph = DirectedGraph::new(node_count, operators.iter().map(|o| o.edge))?;
    let bounds: BTreeMap<_, _> = operators.iter().map(|o| Ok((o.edge, iqc_bound_matrix(o)?))).collect::<Result<_>>()?;
    CouplingBoundSet::new(graph, bounds, state_dim)
}

/// Control graph 1 -> 2 -> 3 with only pendulum 1 pinned.
pub fn control_topology() -> Result<PinnedTopology> {
    PinnedTopology::new(DirectedGraph::new(3, [(1, 0), (2, 1)])?, vec![1.0, 0.0, 0.0])
}

pub fn fixture(p: &PendulumParameters) -> Result<PendulumFixture> {
    let model = model(p.mass, p.length, p.gravity)?;
    let operators = coupling_operators(p)?;
    let bounds = bounds_for(3, 2, &operators)?;
    Ok(PendulumFixture {
        model,
        operators,
        bounds,
        control: control_topology()?,
        weights: CostWeights::new(DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 0.1))?,
    })
}

/// Leader displaced to 0.2 rad at rest, followers at rest in the downward
/// position. A demonstration choice.
pub fn default_initial_state() -> (DVector<f64>, Vec<DVector<f64>>) {
    (DVector::from_vec(vec![0.2, 0.0]), vec![DVector::zeros(2); 3])
}

/// Stacked `e_i = x_0 - x_i`.
pub fn stacked_errors(leader: &DVector<f64>, followers: &[DVector<f64>]) -> DVector<f64> {
    let n = leader.len();
    let mut e = DVector::zeros(n * followers.len());
    for (i, x) in followers.iter().enumerate() {
        e.rows_mut(i * n, n).copy_from(&(leader - x));
    }
    e
}
