//! Directed graphs, pinning, and the constants derived from the pinned
//! control Laplacian `L + G`.
//!
//! Nodes are indexed from zero. An edge `(i, j)` means that node `i`
//! receives information from node `j`; the in-neighbourhood of `i` is the
//! set of such `j`.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{sym_eigen, symmetrize};
use crate::{Error, Result};

/// Simple weighted digraph.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedGraph {
    node_count: usize,
    edges: BTreeMap<(usize, usize), f64>,
}

impl DirectedGraph {
    /// Unit-weight graph from an edge list.
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::with_weights(node_count, edges.into_iter().map(|(i, j)| (i, j, 1.0)))
    }

    pub fn with_weights(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::InvalidGraph("node set must be nonempty".into()));
        }
        let mut map = BTreeMap::new();
        for (i, j, w) in edges {
            if i >= node_count || j >= node_count {
                return Err(Error::InvalidGraph(format!(
                    "edge ({i}, {j}) references a node outside 0..{node_count}"
                )));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidGraph(format!("edge ({i}, {j}) has non-positive weight {w}")));
            }
            if map.insert((i, j), w).is_some() {
                return Err(Error::InvalidGraph(format!("repeated edge ({i}, {j})")));
            }
        }
        Ok(Self { node_count, edges: map })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.keys().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.edges.contains_key(&(i, j))
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.edges.get(&(i, j)).copied().unwrap_or(0.0)
    }

    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.node_count, self.node_count);
        for (&(i, j), &w) in &self.edges {
            a[(i, j)] = w;
        }
        a
    }

    /// Nodes `j` with `(i, j)` an edge, ascending.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        self.edges
            .range((i, 0)..(i + 1, 0))
            .map(|(&(_, j), _)| j)
            .collect()
    }

    /// Nodes `r` with `(r, i)` an edge, ascending.
    pub fn out_neighbors(&self, i: usize) -> Vec<usize> {
        self.edges.keys().filter(|&&(_, j)| j == i).map(|&(r, _)| r).collect()
    }

    pub fn in_degree(&self, i: usize) -> f64 {
        self.edges.range((i, 0)..(i + 1, 0)).map(|(_, w)| w).sum()
    }

    pub fn out_degree(&self, i: usize) -> f64 {
        self.edges.iter().filter(|(&(_, j), _)| j == i).map(|(_, w)| w).sum()
    }
}

/// `L = D - A` with `D` the diagonal of in-degrees.
pub fn laplacian(g: &DirectedGraph) -> DMatrix<f64> {
    let mut l = -g.adjacency();
    for i in 0..g.node_count() {
        l[(i, i)] = g.in_degree(i);
    }
    l
}

/// Control graph together with the pinning gains towards the leader.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnedTopology {
    graph: DirectedGraph,
    pinning: DVector<f64>,
}

impl PinnedTopology {
    pub fn new(graph: DirectedGraph, pinning: Vec<f64>) -> Result<Self> {
        if pinning.len() != graph.node_count() {
            return Err(Error::dims("pinning vector", graph.node_count(), pinning.len()));
        }
        if pinning.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::InvalidGraph("pinning gains must be finite and nonnegative".into()));
        }
        if pinning.iter().all(|&g| g == 0.0) {
            return Err(Error::NoPinnedNode);
        }
        Ok(Self {
            graph,
            pinning: DVector::from_vec(pinning),
        })
    }

    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn pinning(&self) -> &DVector<f64> {
        &self.pinning
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    /// `L + G`.
    pub fn pinned_laplacian(&self) -> DMatrix<f64> {
        laplacian(&self.graph) + DMatrix::from_diagonal(&self.pinning)
    }

    /// Nodes not reachable from the leader through pinned nodes and graph edges.
    pub fn unreachable_nodes(&self) -> Vec<usize> {
        let n = self.node_count();
        let mut children = vec![Vec::new(); n];
        for (i, j) in self.graph.edges() {
            children[j].push(i);
        }
        let mut seen = vec![false; n];
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| self.pinning[i] > 0.0).collect();
        for &i in &queue {
            seen[i] = true;
        }
        while let Some(j) = queue.pop_front() {
            for &i in &children[j] {
                if !seen[i] {
                    seen[i] = true;
                    queue.push_back(i);
                }
            }
        }
        (0..n).filter(|&i| !seen[i]).collect()
    }
}

/// True iff the control graph has a directed spanning tree whose root is pinned.
///
/// Equivalent to every node being reachable from a virtual leader node with
/// an edge into each pinned node.
pub fn has_spanning_tree_with_pinned_root(t: &PinnedTopology) -> bool {
    t.unreachable_nodes().is_empty()
}

/// Which eigenvalue of `H` sets the scalar `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// `sigma = lambda_max(H) / 2`.
    HalfMaxEigenvalue,
    /// `sigma = lambda_min(H) / 2`; the only choice for which
    /// `-x'(H (x) W)x <= -2 sigma x'(I (x) W)x` holds for every `W >= 0`.
    HalfMinEigenvalue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyConstants {
    /// Solution of `(L + G) theta = 1`.
    pub theta: DVector<f64>,
    /// `diag(1 / theta_i)`.
    pub theta_matrix: DMatrix<f64>,
    /// `Theta (L + G) + (L + G)' Theta`.
    pub h: DMatrix<f64>,
    /// Ascending eigenvalues of `H`.
    pub h_eigenvalues: DVector<f64>,
    pub sigma_rule: SigmaRule,
    pub sigma: f64,
    /// `(L + G)' (L + G)`.
    pub m: DMatrix<f64>,
    /// Ascending eigenvalues of `M`.
    pub m_eigenvalues: DVector<f64>,
    /// Orthogonal diagonaliser of `M`; columns match `m_eigenvalues`.
    pub m_eigenvectors: DMatrix<f64>,
    pub lambda_bar: f64,
    /// Relative residual of the linear solve for `theta`.
    pub theta_residual: f64,
}

impl TopologyConstants {
    pub fn node_count(&self) -> usize {
        self.theta.len()
    }
}

/// Computes `theta`, `Theta`, `H`, `sigma`, `M` and `lambda_bar`.
pub fn topology_constants(t: &PinnedTopology, rule: SigmaRule) -> Result<TopologyConstants> {
    let unreachable = t.unreachable_nodes();
    if !unreachable.is_empty() {
        return Err(Error::NoPinnedSpanningTree { unreachable });
    }
    let lg = t.pinned_laplacian();
    let n = lg.nrows();

    let sv = lg.singular_values();
    if sv.min() <= 1e-12 * sv.max() {
        return Err(Error::SingularTopology);
    }
    let ones = DVector::from_element(n, 1.0);
    let theta = lg.clone().lu().solve(&ones).ok_or(Error::SingularTopology)?;
    let theta_residual = (&lg * &theta - &ones).amax();
    if theta.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::SingularTopology);
    }

    let theta_matrix = DMatrix::from_diagonal(&theta.map(|v| 1.0 / v));
    let h = symmetrize(&(&theta_matrix * &lg + lg.transpose() * &theta_matrix));
    let (h_eigenvalues, _) = sym_eigen(&h);
    // Not implied by the spanning-tree condition once edge or pinning
    // weights differ, so it is checked rather than assumed.
    if !(h_eigenvalues.min() > 0.0) {
        return Err(Error::IndefiniteTopology {
            min_eigenvalue: h_eigenvalues.min(),
        });
    }
    let sigma = match rule {
        SigmaRule::HalfMaxEigenvalue => h_eigenvalues.max() / 2.0,
        SigmaRule::HalfMinEigenvalue => h_eigenvalues.min() / 2.0,
    };
    if !(sigma > 0.0) {
        return Err(Error::SingularTopology);
    }
    let m = symmetrize(&(lg.transpose() * &lg));
    let (m_eigenvalues, m_eigenvectors) = sym_eigen(&m);
    let lambda_bar = m_eigenvalues.max();

    Ok(TopologyConstants {
        theta,
        theta_matrix,
        h,
        h_eigenvalues,
        sigma_rule: rule,
        sigma,
        m,
        m_eigenvalues,
        m_eigenvectors,
        lambda_bar,
        theta_residual,
    })
}
