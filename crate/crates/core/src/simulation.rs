//! Closed-loop integration, cost evaluation and Lyapunov dissipation checks.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::graph::PinnedTopology;
use crate::synthesis::{AgentModel, CostWeights, SynthesisResult};
use crate::uncertainty::{cumulative_trapezoid, sample_index, CouplingOperator};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationOptions {
    pub horizon: f64,
    pub step: f64,
    /// Integration stops with an error once any state norm exceeds this.
    pub divergence_guard: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            horizon: 30.0,
            step: 1e-3,
            divergence_guard: 1e9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: AgentModel,
    pub couplings: Vec<CouplingOperator>,
    pub topology: PinnedTopology,
    pub gain: DMatrix<f64>,
    pub x0_leader: DVector<f64>,
    pub x0_followers: Vec<DVector<f64>>,
    pub options: SimulationOptions,
}

impl Scenario {
    pub fn new(
        model: AgentModel,
        couplings: Vec<CouplingOperator>,
        topology: PinnedTopology,
        gain: DMatrix<f64>,
        x0_leader: DVector<f64>,
        x0_followers: Vec<DVector<f64>>,
        options: SimulationOptions,
    ) -> Result<Self> {
        let n = model.state_dim();
        let nodes = topology.node_count();
        if gain.shape() != (model.input_dim(), n) {
            return Err(Error::dims("K", format!("{}x{n}", model.input_dim()), format!("{}x{}", gain.nrows(), gain.ncols())));
        }
        if x0_leader.len() != n {
            return Err(Error::dims("leader initial state", n, x0_leader.len()));
        }
        if x0_followers.len() != nodes {
            return Err(Error::dims("follower initial states", nodes, x0_followers.len()));
        }
        if let Some(x) = x0_followers.iter().find(|x| x.len() != n) {
            return Err(Error::dims("follower initial state", n, x.len()));
        }
        for (k, op) in couplings.iter().enumerate() {
            let (i, j) = op.edge;
            if i >= nodes || j >= nodes || i == j {
                return Err(Error::InvalidScenario(format!("coupling edge ({}, {}) is not a valid edge", i + 1, j + 1)));
            }
            if couplings[..k].iter().any(|o| o.edge == op.edge) {
                return Err(Error::InvalidScenario(format!("duplicate coupling on edge ({}, {})", i + 1, j + 1)));
            }
            if let Some(m) = op.output_dim() {
                if m != model.coupling_dim() {
                    return Err(Error::dims(format!("coupling ({}, {}) output", i + 1, j + 1), model.coupling_dim(), m));
                }
            }
        }
        let o = &options;
        if !(o.step > 0.0 && o.step.is_finite() && o.horizon >= o.step && o.horizon.is_finite()) {
            return Err(Error::InvalidScenario(format!("need 0 < step <= horizon (step {}, horizon {})", o.step, o.horizon)));
        }
        let steps = (o.horizon / o.step).round();
        if (steps * o.step - o.horizon).abs() > 1e-9 * o.horizon {
            return Err(Error::InvalidScenario(format!("horizon {} is not a multiple of step {}", o.horizon, o.step)));
        }
        Ok(Self {
            model,
            couplings,
            topology,
            gain,
            x0_leader,
            x0_followers,
            options,
        })
    }

    pub fn node_count(&self) -> usize {
        self.topology.node_count()
    }

    pub fn step_count(&self) -> usize {
        (self.options.horizon / self.options.step).round() as usize
    }

    pub fn with_options(&self, options: SimulationOptions) -> Result<Self> {
        Self::new(
            self.model.clone(),
            self.couplings.clone(),
            self.topology.clone(),
            self.gain.clone(),
            self.x0_leader.clone(),
            self.x0_followers.clone(),
            options,
        )
    }

    pub fn initial_errors(&self) -> Vec<DVector<f64>> {
        self.x0_followers.iter().map(|x| &self.x0_leader - x).collect()
    }
}

/// `u_i = -K (sum_{j in T_i} a_ij (x_j - x_i) + g_i (x_0 - x_i))`.
pub fn control_input(x: &[DVector<f64>], x0: &DVector<f64>, s: &Scenario, i: usize) -> DVector<f64> {
    let g = s.topology.graph();
    let mut v = (x0 - &x[i]) * s.topology.pinning()[i];
    for j in g.in_neighbors(i) {
        v += (&x[j] - &x[i]) * g.weight(i, j);
    }
    -(&s.gain * v)
}

/// Samples on the uniform grid `t_k = k h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub leader: Vec<DVector<f64>>,
    /// `followers[k][i]`.
    pub followers: Vec<Vec<DVector<f64>>>,
    /// `errors[k][i] = leader[k] - followers[k][i]`.
    pub errors: Vec<Vec<DVector<f64>>>,
    pub inputs: Vec<Vec<DVector<f64>>>,
    pub coupling_edges: Vec<(usize, usize)>,
    /// `coupling_outputs[k][e]` for edge `coupling_edges[e]`.
    pub coupling_outputs: Vec<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Input `x_j - x_i = e_i - e_j` of the coupling on edge `(i, j)`.
    pub fn coupling_signal(&self, (i, j): (usize, usize)) -> Vec<DVector<f64>> {
        self.followers.iter().map(|x| &x[j] - &x[i]).collect()
    }

    /// `sum_i |e_i|^2` at every sample.
    pub fn error_energy_density(&self) -> Vec<f64> {
        self.errors.iter().map(|e| e.iter().map(|v| v.norm_squared()).sum()).collect()
    }
}

fn unstack(z: &DVector<f64>, n: usize, nodes: usize) -> (DVector<f64>, Vec<DVector<f64>>) {
    let x0 = z.rows(0, n).into_owned();
    let xs = (0..nodes).map(|i| z.rows((i + 1) * n, n).into_owned()).collect();
    (x0, xs)
}

fn coupling_sum(s: &Scenario, t: f64, x: &[DVector<f64>], i: usize, out: &mut DVector<f64>) {
    for op in s.couplings.iter().filter(|o| o.edge.0 == i) {
        let y = &x[op.edge.1] - &x[i];
        *out += &s.model.b2 * op.apply(t, &y);
    }
}

fn closed_loop(s: &Scenario, t: f64, z: &DVector<f64>) -> DVector<f64> {
    let n = s.model.state_dim();
    let nodes = s.node_count();
    let (x0, xs) = unstack(z, n, nodes);
    let mut dz = DVector::zeros(z.len());
    dz.rows_mut(0, n).copy_from(&(&s.model.a * &x0));
    for i in 0..nodes {
        let u = control_input(&xs, &x0, s, i);
        let mut d = &s.model.a * &xs[i] + &s.model.b1 * u;
        coupling_sum(s, t, &xs, i, &mut d);
        dz.rows_mut((i + 1) * n, n).copy_from(&d);
    }
    dz
}

/// Error dynamics integrated directly:
/// `e_i' = A e_i - B1 u_i - B2 sum_j phi_ij(t, e_i - e_j)` with
/// `u_i = -K (sum_{j in T_i} a_ij (e_i - e_j) + g_i e_i)`.
fn error_dynamics(s: &Scenario, t: f64, z: &DVector<f64>) -> DVector<f64> {
    let n = s.model.state_dim();
    let nodes = s.node_count();
    let e: Vec<DVector<f64>> = (0..nodes).map(|i| z.rows(i * n, n).into_owned()).collect();
    let g = s.topology.graph();
    let mut dz = DVector::zeros(z.len());
    for i in 0..nodes {
        let mut v = &e[i] * s.topology.pinning()[i];
        for j in g.in_neighbors(i) {
            v += (&e[i] - &e[j]) * g.weight(i, j);
        }
        let u = -(&s.gain * v);
        let mut d = &s.model.a * &e[i] - &s.model.b1 * u;
        for op in s.couplings.iter().filter(|o| o.edge.0 == i) {
            d -= &s.model.b2 * op.apply(t, &(&e[i] - &e[op.edge.1]));
        }
        dz.rows_mut(i * n, n).copy_from(&d);
    }
    dz
}

fn rk4<F: Fn(f64, &DVector<f64>) -> DVector<f64>>(
    f: F,
    z0: DVector<f64>,
    step: f64,
    steps: usize,
    guard: f64,
    mut record: impl FnMut(usize, f64, &DVector<f64>),
) -> Result<()> {
    let mut z = z0;
    record(0, 0.0, &z);
    for k in 0..steps {
        let t = k as f64 * step;
        let k1 = f(t, &z);
        let k2 = f(t + step / 2.0, &(&z + &k1 * (step / 2.0)));
        let k3 = f(t + step / 2.0, &(&z + &k2 * (step / 2.0)));
        let k4 = f(t + step, &(&z + &k3 * step));
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
        let t_next = (k + 1) as f64 * step;
        if !z.iter().all(|v| v.is_finite()) || z.norm() > guard {
            return Err(Error::NonFiniteState { time: t_next });
        }
        record(k + 1, t_next, &z);
    }
    Ok(())
}

/// Fixed-step RK4 over `[0, T]` of the leader and follower states.
pub fn integrate(s: &Scenario) -> Result<Trajectory> {
    let n = s.model.state_dim();
    let nodes = s.node_count();
    let steps = s.step_count();
    let mut z0 = DVector::zeros((nodes + 1) * n);
    z0.rows_mut(0, n).copy_from(&s.x0_leader);
    for (i, x) in s.x0_followers.iter().enumerate() {
        z0.rows_mut((i + 1) * n, n).copy_from(x);
    }
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        leader: Vec::with_capacity(steps + 1),
        followers: Vec::with_capacity(steps + 1),
        errors: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        coupling_edges: s.couplings.iter().map(|o| o.edge).collect(),
        coupling_outputs: Vec::with_capacity(steps + 1),
    };
    rk4(|t, z| closed_loop(s, t, z), z0, s.options.step, steps, s.options.divergence_guard, |_, t, z| {
        let (x0, xs) = unstack(z, n, nodes);
        traj.times.push(t);
        traj.errors.push(xs.iter().map(|x| &x0 - x).collect());
        traj.inputs.push((0..nodes).map(|i| control_input(&xs, &x0, s, i)).collect());
        traj.coupling_outputs
            .push(s.couplings.iter().map(|o| o.apply(t, &(&xs[o.edge.1] - &xs[o.edge.0]))).collect());
        traj.leader.push(x0);
        traj.followers.push(xs);
    })?;
    Ok(traj)
}

/// Errors obtained by integrating the error dynamics directly.
pub fn integrate_errors(s: &Scenario) -> Result<Vec<Vec<DVector<f64>>>> {
    let n = s.model.state_dim();
    let nodes = s.node_count();
    let mut z0 = DVector::zeros(nodes * n);
    for (i, e) in s.initial_errors().iter().enumerate() {
        z0.rows_mut(i * n, n).copy_from(e);
    }
    let mut out = Vec::with_capacity(s.step_count() + 1);
    rk4(|t, z| error_dynamics(s, t, z), z0, s.options.step, s.step_count(), s.options.divergence_guard, |_, _, z| {
        out.push((0..nodes).map(|i| z.rows(i * n, n).into_owned()).collect());
    })?;
    Ok(out)
}

/// Terminal stacked state `[x_0; x_1; ...; x_N]`.
pub fn terminal_state(s: &Scenario) -> Result<DVector<f64>> {
    let n = s.model.state_dim();
    let nodes = s.node_count();
    let mut z0 = DVector::zeros((nodes + 1) * n);
    z0.rows_mut(0, n).copy_from(&s.x0_leader);
    for (i, x) in s.x0_followers.iter().enumerate() {
        z0.rows_mut((i + 1) * n, n).copy_from(x);
    }
    let mut last = z0.clone();
    rk4(|t, z| closed_loop(s, t, z), z0, s.options.step, s.step_count(), s.options.divergence_guard, |_, _, z| {
        last.copy_from(z)
    })?;
    Ok(last)
}

/// Empirical order `log2(|z_h - z_{h/2}| / |z_{h/2} - z_{h/4}|)` of the
/// terminal state with base step `step`.
pub fn convergence_order(s: &Scenario, step: f64) -> Result<f64> {
    let run = |h: f64| terminal_state(&s.with_options(SimulationOptions { step: h, ..s.options })?);
    let (z1, z2, z4) = (run(step)?, run(step / 2.0)?, run(step / 4.0)?);
    Ok(((&z1 - &z2).norm() / (&z2 - &z4).norm()).log2())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Trapezoid integral of `sum_i e_i'Q e_i + u_i'R u_i` over `[0, T]`.
    pub cost: f64,
    /// Geometric extrapolation of the remaining cost beyond `T`; `None` when
    /// the integrand is not decaying over the last third of the horizon.
    pub tail_estimate: Option<f64>,
    #[serde(skip)]
    pub running_cost: Vec<f64>,
}

fn cost_density(traj: &Trajectory, w: &CostWeights) -> Vec<f64> {
    traj.errors
        .iter()
        .zip(&traj.inputs)
        .map(|(es, us)| {
            let ec: f64 = es.iter().map(|e| (e.transpose() * &w.q * e)[(0, 0)]).sum();
            let uc: f64 = us.iter().map(|u| (u.transpose() * &w.r * u)[(0, 0)]).sum();
            ec + uc
        })
        .collect()
}

/// Ratio-based tail: with `E1`, `E2` the integrals over the two halves of the
/// last third, later windows are assumed to shrink by `r = E2 / E1` each.
pub fn tail_estimate(times: &[f64], density: &[f64]) -> Option<f64> {
    let n = times.len();
    if n < 7 {
        return None;
    }
    let start = n - 1 - (n - 1) / 3;
    let mid = start + (n - 1 - start) / 2;
    let cum = cumulative_trapezoid(times, density);
    let e1 = cum[mid] - cum[start];
    let e2 = cum[n - 1] - cum[mid];
    if e2 == 0.0 {
        return Some(0.0);
    }
    let r = e2 / e1;
    (e1 > 0.0 && r < 1.0).then(|| e2 * r / (1.0 - r))
}

pub fn evaluate_cost(traj: &Trajectory, w: &CostWeights) -> CostReport {
    let density = cost_density(traj, w);
    let running_cost = cumulative_trapezoid(&traj.times, &density);
    CostReport {
        cost: running_cost.last().copied().unwrap_or(0.0),
        tail_estimate: tail_estimate(&traj.times, &density),
        running_cost,
    }
}

/// `int_{T/2}^T |e|^2 / int_0^{T/2} |e|^2`.
pub fn tail_energy_ratio(traj: &Trajectory) -> f64 {
    let cum = cumulative_trapezoid(&traj.times, &traj.error_energy_density());
    let mid = (traj.len() - 1) / 2;
    let last = traj.len() - 1;
    (cum[last] - cum[mid]) / cum[mid]
}

/// `V(e) = sum_i e_i' Y^-1 e_i / theta_i` along the trajectory.
pub fn lyapunov_series(traj: &Trajectory, result: &SynthesisResult) -> Vec<f64> {
    let theta = &result.constants.theta;
    traj.errors
        .iter()
        .map(|es| es.iter().enumerate().map(|(i, e)| (e.transpose() * &result.y_inverse * e)[(0, 0)] / theta[i]).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub check_times: Vec<f64>,
    pub v0: f64,
    pub v: Vec<f64>,
    /// `int_0^{t_l} sum_i e_i' (sigma K' Rhat K + Q) e_i`.
    pub dissipated: Vec<f64>,
    /// `V(t_l) - V(0) + dissipated(t_l)`; must not exceed `slack`.
    pub residual: Vec<f64>,
    pub slack: f64,
    pub satisfied: Vec<bool>,
}

impl DissipationReport {
    pub fn all_satisfied(&self) -> bool {
        self.satisfied.iter().all(|&s| s)
    }

    /// Largest `residual / V(0)`.
    pub fn worst_relative_residual(&self) -> f64 {
        let worst = self.residual.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if self.v0 > 0.0 {
            worst / self.v0
        } else {
            worst
        }
    }
}

/// Relative slack of the dissipation check.
pub const DISSIPATION_SLACK: f64 = 1e-4;

/// Checks `V(e(t_l)) - V(e(0)) <= -int_0^{t_l} sum_i e_i'(sigma K'Rhat K + Q) e_i`
/// at each `t_l`, up to `1e-4 V(e(0))`.
pub fn lyapunov_dissipation_check(
    traj: &Trajectory,
    result: &SynthesisResult,
    w: &CostWeights,
    check_times: &[f64],
) -> Result<DissipationReport> {
    let c = &result.constants;
    let weight = result.k.transpose() * w.r_hat(c) * &result.k * c.sigma + &w.q;
    let density: Vec<f64> = traj
        .errors
        .iter()
        .map(|es| es.iter().map(|e| (e.transpose() * &weight * e)[(0, 0)]).sum())
        .collect();
    let cum = cumulative_trapezoid(&traj.times, &density);
    let v_all = lyapunov_series(traj, result);
    let v0 = v_all[0];
    let slack = DISSIPATION_SLACK * v0;
    let mut report = DissipationReport {
        check_times: check_times.to_vec(),
        v0,
        v: Vec::new(),
        dissipated: Vec::new(),
        residual: Vec::new(),
        slack,
        satisfied: Vec::new(),
    };
    for &tl in check_times {
        let k = sample_index(&traj.times, tl)?;
        let residual = v_all[k] - v0 + cum[k];
        report.v.push(v_all[k]);
        report.dissipated.push(cum[k]);
        report.residual.push(residual);
        report.satisfied.push(residual <= slack);
    }
    Ok(report)
}

/// Writes one row per sample: time, leader state, follower states, errors,
/// inputs, then the optional running cost and `V(e)` columns.
pub fn write_csv<W: Write>(out: W, traj: &Trajectory, running_cost: Option<&[f64]>, lyapunov: Option<&[f64]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if traj.is_empty() {
        w.flush()?;
        return Ok(());
    }
    let n = traj.leader[0].len();
    let nodes = traj.followers[0].len();
    let p = traj.inputs[0].first().map_or(0, |u| u.len());
    let mut header = vec!["time".to_string()];
    header.extend((1..=n).map(|c| format!("x0_{c}")));
    for (prefix, dim) in [("x", n), ("e", n), ("u", p)] {
        for i in 1..=nodes {
            header.extend((1..=dim).map(|c| format!("{prefix}{i}_{c}")));
        }
    }
    if running_cost.is_some() {
        header.push("running_cost".into());
    }
    if lyapunov.is_some() {
        header.push("lyapunov".into());
    }
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for k in 0..traj.len() {
        row.clear();
        row.push(traj.times[k]);
        row.extend(traj.leader[k].iter());
        for group in [&traj.followers[k], &traj.errors[k], &traj.inputs[k]] {
            for v in group {
                row.extend(v.iter());
            }
        }
        if let Some(c) = running_cost {
            row.push(c[k]);
        }
        if let Some(v) = lyapunov {
            row.push(v[k]);
        }
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DirectedGraph;
    use crate::pendulum::{self, PendulumParameters};
    use crate::uncertainty::{CouplingOperator, GainFactor};
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn fixture_scenario(gain: DMatrix<f64>, options: SimulationOptions) -> Scenario {
        let f = pendulum::fixture(&PendulumParameters::default()).unwrap();
        let (x0, xs) = pendulum::default_initial_state();
        Scenario::new(f.model, f.operators, f.control, gain, x0, xs, options).unwrap()
    }

    fn short(horizon: f64, step: f64) -> SimulationOptions {
        SimulationOptions {
            horizon,
            step,
            ..Default::default()
        }
    }

    #[test]
    fn consensus_fixed_point_has_zero_input() {
        let s = fixture_scenario(dmatrix![4.5, 4.3], short(1.0, 0.1));
        let x = vec![dvector![0.3, -0.1]; 3];
        for i in 0..3 {
            assert_eq!(control_input(&x, &dvector![0.3, -0.1], &s, i), dvector![0.0]);
        }
    }

    #[test]
    fn node_three_ignores_leader() {
        let s = fixture_scenario(dmatrix![1.0, 2.0], short(1.0, 0.1));
        let x = vec![dvector![0.0, 0.0], dvector![1.0, 0.5], dvector![0.2, 0.1]];
        let u = control_input(&x, &dvector![9.0, 9.0], &s, 2);
        assert_abs_diff_eq!(u[0], -(1.0 * 0.8 + 2.0 * 0.4), epsilon = 1e-15);
    }

    #[test]
    fn pinned_single_agent_input() {
        let model = pendulum::model(0.25, 1.0, 10.0).unwrap();
        let topo = PinnedTopology::new(DirectedGraph::new(1, []).unwrap(), vec![1.0]).unwrap();
        let s = Scenario::new(model, vec![], topo, dmatrix![2.0, 3.0], dvector![1.0, 0.0], vec![dvector![0.5, 0.5]], short(1.0, 0.1)).unwrap();
        let u = control_input(&s.x0_followers, &s.x0_leader, &s, 0);
        assert_abs_diff_eq!(u[0], -(2.0 * 0.5 + 3.0 * -0.5), epsilon = 1e-15);
    }

    #[test]
    fn leader_is_harmonic() {
        let s = fixture_scenario(dmatrix![0.0, 0.0], short(5.0, 1e-3));
        let traj = integrate(&s).unwrap();
        let w = 10f64.sqrt();
        for (t, x0) in traj.times.iter().zip(&traj.leader).step_by(250) {
            assert_abs_diff_eq!(x0[0], 0.2 * (w * t).cos(), epsilon = 1e-10);
            assert_abs_diff_eq!(x0[1], -0.2 * w * (w * t).sin(), epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_errors_stay_zero() {
        let f = pendulum::fixture(&PendulumParameters::default()).unwrap();
        let x0 = dvector![0.1, 0.2];
        let s = Scenario::new(f.model, vec![], f.control, dmatrix![3.0, 1.0], x0.clone(), vec![x0; 3], short(3.0, 1e-2)).unwrap();
        let traj = integrate(&s).unwrap();
        assert!(traj.errors.iter().flatten().all(|e| e.amax() < 1e-14));
    }

    #[test]
    fn errors_match_direct_error_dynamics() {
        let s = fixture_scenario(dmatrix![4.5, 4.3], short(5.0, 1e-2));
        let traj = integrate(&s).unwrap();
        let direct = integrate_errors(&s).unwrap();
        let h4 = 1e-2f64.powi(4);
        for (k, (a, b)) in traj.errors.iter().zip(&direct).enumerate() {
            for (ea, eb) in a.iter().zip(b) {
                assert!((ea - eb).amax() <= 10.0 * h4 * traj.times[k].max(1.0));
            }
        }
        for (k, es) in traj.errors.iter().enumerate() {
            for (i, e) in es.iter().enumerate() {
                assert_eq!(e, &(&traj.leader[k] - &traj.followers[k][i]));
            }
        }
    }

    #[test]
    fn rk4_order() {
        let s = fixture_scenario(dmatrix![4.5, 4.3], short(10.0, 0.04));
        let order = convergence_order(&s, 0.04).unwrap();
        assert!((3.5..=4.5).contains(&order), "{order}");
    }

    #[test]
    fn cost_closed_forms() {
        let w = CostWeights::new(DMatrix::identity(2, 2), dmatrix![0.1]).unwrap();
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
        let zero = Trajectory {
            times: times.clone(),
            leader: vec![DVector::zeros(2); 101],
            followers: vec![vec![DVector::zeros(2); 3]; 101],
            errors: vec![vec![DVector::zeros(2); 3]; 101],
            inputs: vec![vec![DVector::zeros(1); 3]; 101],
            coupling_edges: vec![],
            coupling_outputs: vec![vec![]; 101],
        };
        let r = evaluate_cost(&zero, &w);
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.tail_estimate, Some(0.0));

        let e0 = dvector![0.3, -0.4];
        let constant = Trajectory {
            errors: vec![vec![e0.clone(); 3]; 101],
            ..zero
        };
        let r = evaluate_cost(&constant, &w);
        assert_abs_diff_eq!(r.cost, 10.0 * 3.0 * 0.25, epsilon = 1e-12);
        assert_eq!(r.tail_estimate, None);
        assert!(r.running_cost.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn exponential_tail_is_exact() {
        // density e^{-t}: E1, E2 over consecutive windows give the exact tail.
        let times: Vec<f64> = (0..=3000).map(|k| k as f64 * 0.01).collect();
        let density: Vec<f64> = times.iter().map(|t| (-0.2 * t).exp()).collect();
        let tail = tail_estimate(&times, &density).unwrap();
        let exact = (-0.2f64 * 30.0).exp() / 0.2;
        assert_abs_diff_eq!(tail, exact, epsilon = 1e-5 * exact);
    }

    #[test]
    fn scenario_validation() {
        let f = pendulum::fixture(&PendulumParameters::default()).unwrap();
        let (x0, xs) = pendulum::default_initial_state();
        let bad_gain = Scenario::new(f.model.clone(), vec![], f.control.clone(), dmatrix![1.0], x0.clone(), xs.clone(), short(1.0, 0.1));
        assert!(matches!(bad_gain, Err(Error::DimensionMismatch { .. })));
        let bad_step = Scenario::new(f.model.clone(), vec![], f.control.clone(), dmatrix![1.0, 1.0], x0.clone(), xs.clone(), short(1.0, 0.3));
        assert!(matches!(bad_step, Err(Error::InvalidScenario(_))));
        let dup = vec![f.operators[0].clone(), f.operators[0].clone()];
        let dup = Scenario::new(f.model, dup, f.control, dmatrix![1.0, 1.0], x0, xs, short(1.0, 0.1));
        assert!(matches!(dup, Err(Error::InvalidScenario(_))));
    }

    #[test]
    fn divergence_is_detected() {
        let f = pendulum::fixture(&PendulumParameters::default()).unwrap();
        let (x0, mut xs) = pendulum::default_initial_state();
        xs[0][0] = 0.1;
        let blowup = CouplingOperator::memoryless((0, 1), dmatrix![-50.0, -5.0], GainFactor::Constant(1.0));
        let s = Scenario::new(f.model, vec![blowup], f.control, dmatrix![0.0, 0.0], x0, xs, short(30.0, 1e-2)).unwrap();
        assert!(matches!(integrate(&s), Err(Error::NonFiniteState { .. })));
    }

    #[test]
    fn csv_layout() {
        let s = fixture_scenario(dmatrix![4.5, 4.3], short(0.2, 0.1));
        let traj = integrate(&s).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &traj, Some(&[0.0, 1.0, 2.0]), None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("time,x0_1,x0_2,x1_1,x1_2"));
        assert!(lines[0].ends_with("u3_1,running_cost"));
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }
}
