//! Log-barrier interior-point method for small dense LMI programs.
//!
//! All constraints are brought to the form `G(x) = G0 + sum_v x_v G_v > 0`
//! over the flattened decision vector `x = [upper(Y); scalars]`. A phase-I
//! program `min s  s.t.  G_k(x) + s I > 0` locates a strictly feasible point
//! (or certifies that the least achievable `s` is positive), after which the
//! barrier `t c'x - sum_k log det G_k(x)` is followed with damped Newton steps
//! for increasing `t` until the duality-gap bound `theta / t` meets the
//! tolerance. A Euclidean ball `|x| < R` keeps every barrier subproblem
//! bounded.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::program::{evaluate_constraint, LmiPoint, LmiProgram, Sense};
use super::sym::SymMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Relative accuracy on the objective.
    pub tolerance: f64,
    /// Budget of Newton steps over both phases.
    pub max_iterations: usize,
    /// Margin used for strict inequalities when programs are assembled.
    pub strictness_margin: f64,
    /// Factor applied to the barrier weight `1/t` after each centering.
    pub barrier_decrease_factor: f64,
    /// Radius of the ball that bounds all decision variables.
    pub feasibility_radius: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 2000,
            strictness_margin: 1e-6,
            barrier_decrease_factor: 0.1,
            feasibility_radius: 1e6,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tolerance > 0.0
            && self.max_iterations > 0
            && self.strictness_margin >= 0.0
            && self.barrier_decrease_factor > 0.0
            && self.barrier_decrease_factor < 1.0
            && self.feasibility_radius > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config("solver", "tolerance, radius > 0; 0 < barrier_decrease_factor < 1; margin >= 0"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Strictly feasible and optimal to the requested tolerance.
    Optimal,
    /// Strictly feasible; optimality not established (or no objective).
    Feasible,
    /// Phase I proved that no strictly feasible point exists in the ball.
    Infeasible,
    /// Budget exhausted before feasibility was decided.
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub status: SolveStatus,
    pub y: SymMatrix,
    pub scalars: Vec<f64>,
    pub objective_value: f64,
    /// Largest eigenvalue over all constraints written as `F < 0`,
    /// re-evaluated at the returned point.
    pub max_constraint_eigenvalue: f64,
    /// Upper bound `theta / t` on the suboptimality of the returned point.
    pub gap_bound: f64,
    pub iterations: usize,
}

impl SdpSolution {
    pub fn point(&self) -> LmiPoint {
        LmiPoint {
            y: self.y.clone(),
            scalars: self.scalars.clone(),
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self.status, SolveStatus::Optimal | SolveStatus::Feasible)
    }
}

struct FlatLmi {
    g0: DMatrix<f64>,
    coeffs: Vec<(usize, DMatrix<f64>)>,
}

impl FlatLmi {
    fn order(&self) -> usize {
        self.g0.nrows()
    }

    fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut g = self.g0.clone();
        for (v, m) in &self.coeffs {
            g += m * x[*v];
        }
        g
    }
}

fn y_var_count(n: usize) -> usize {
    n * (n + 1) / 2
}

fn y_var_index(n: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * n - a * a.saturating_sub(1) / 2 + (b - a)
}

/// `G_k(x) > 0` form of every program constraint.
fn flatten(p: &LmiProgram) -> Vec<FlatLmi> {
    let n = p.matrix_order;
    let ny = y_var_count(n);
    p.constraints
        .iter()
        .map(|c| {
            let order = c.order();
            let sign = match c.sense {
                Sense::NegativeDefinite => -1.0,
                Sense::PositiveDefinite => 1.0,
            };
            let eps = if c.strict { p.strictness_margin } else { 0.0 };
            let g0 = c.constant.to_dmatrix() * sign - DMatrix::identity(order, order) * eps;
            let mut coeffs = Vec::new();
            for a in 0..n {
                for b in a..n {
                    let mut m = DMatrix::zeros(order, order);
                    for t in &c.matrix_terms {
                        let (la, ra) = (t.left.column(a), t.right.column(a));
                        let (lb, rb) = (t.left.column(b), t.right.column(b));
                        let mut e = la * rb.transpose() + ra * lb.transpose();
                        if a != b {
                            e += lb * ra.transpose() + rb * la.transpose();
                        }
                        m += e;
                    }
                    if m.amax() > 0.0 {
                        coeffs.push((y_var_index(n, a, b), m * sign));
                    }
                }
            }
            for (&k, m) in &c.scalar_terms {
                if !m.is_zero() {
                    coeffs.push((ny + k, m.to_dmatrix() * sign));
                }
            }
            FlatLmi { g0, coeffs }
        })
        .collect()
}

/// `[[R, x'], [x, R I]] > 0`, i.e. `|x| < R`.
fn ball(dim: usize, radius: f64) -> FlatLmi {
    let g0 = DMatrix::identity(dim + 1, dim + 1) * radius;
    let coeffs = (0..dim)
        .map(|v| {
            let mut m = DMatrix::zeros(dim + 1, dim + 1);
            m[(0, v + 1)] = 1.0;
            m[(v + 1, 0)] = 1.0;
            (v, m)
        })
        .collect();
    FlatLmi { g0, coeffs }
}

fn log_det_pd(g: DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
    if g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = g.cholesky()?;
    let l = chol.l();
    let ld = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some((ld, l))
}

fn barrier_value(lmis: &[FlatLmi], x: &DVector<f64>, t: f64, c: &DVector<f64>) -> Option<f64> {
    let mut f = t * c.dot(x);
    for lmi in lmis {
        let (ld, _) = log_det_pd(lmi.eval(x))?;
        f -= ld;
    }
    Some(f)
}

fn barrier_derivatives(
    lmis: &[FlatLmi],
    x: &DVector<f64>,
    t: f64,
    c: &DVector<f64>,
) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
    let d = x.len();
    let mut f = t * c.dot(x);
    let mut grad = c * t;
    let mut hess = DMatrix::zeros(d, d);
    for lmi in lmis {
        let (ld, l) = log_det_pd(lmi.eval(x))?;
        f -= ld;
        // W_v = L^-1 G_v L^-T; grad -= tr W_v; hess += tr(W_u W_v).
        let ws: Vec<(usize, DMatrix<f64>)> = lmi
            .coeffs
            .iter()
            .map(|(v, gv)| {
                let half = l.solve_lower_triangular(gv)?;
                let w = l.solve_lower_triangular(&half.transpose())?;
                Some((*v, w))
            })
            .collect::<Option<_>>()?;
        for (i, (u, wu)) in ws.iter().enumerate() {
            grad[*u] -= wu.trace();
            for (v, wv) in &ws[i..] {
                let h = wu.component_mul(wv).sum();
                hess[(*u, *v)] += h;
                if u != v {
                    hess[(*v, *u)] += h;
                }
            }
        }
    }
    Some((f, grad, hess))
}

fn newton_direction(grad: &DVector<f64>, hess: &DMatrix<f64>) -> Result<DVector<f64>> {
    let scale = hess.diagonal().amax().max(1e-300);
    let mut reg = 0.0;
    for _ in 0..12 {
        let h = hess + DMatrix::identity(hess.nrows(), hess.ncols()) * reg;
        if let Some(chol) = h.cholesky() {
            let dx = -chol.solve(grad);
            if dx.iter().all(|v| v.is_finite()) {
                return Ok(dx);
            }
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    Err(Error::NumericalBreakdown("Newton system could not be factorised".into()))
}

/// Outcome of one centering run.
enum Centering {
    Centered,
    /// A callback requested an early exit.
    Stopped,
    Budget,
}

struct Newton<'a> {
    lmis: &'a [FlatLmi],
    c: DVector<f64>,
    iterations: usize,
    budget: usize,
}

impl Newton<'_> {
    fn center(&mut self, x: &mut DVector<f64>, t: f64, stop: &dyn Fn(&DVector<f64>) -> bool) -> Result<Centering> {
        let mut previous = f64::INFINITY;
        let mut stalled = 0;
        loop {
            if self.iterations >= self.budget {
                return Ok(Centering::Budget);
            }
            let (f, grad, hess) = barrier_derivatives(self.lmis, x, t, &self.c)
                .ok_or_else(|| Error::NumericalBreakdown("iterate left the barrier domain".into()))?;
            let dx = newton_direction(&grad, &hess)?;
            let slope = grad.dot(&dx);
            let decrement = -slope / 2.0;
            if decrement <= 1e-10 {
                return Ok(Centering::Centered);
            }
            // Close to the centre, rounding noise keeps the decrement from
            // shrinking further; treat a stalled decrement as converged.
            if decrement < 1e-3 && decrement > 0.5 * previous {
                stalled += 1;
                if stalled >= 5 {
                    return Ok(Centering::Centered);
                }
            } else {
                stalled = 0;
            }
            previous = decrement;
            self.iterations += 1;
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-16 {
                let trial = &*x + &dx * alpha;
                if let Some(ft) = barrier_value(self.lmis, &trial, t, &self.c) {
                    if ft <= f + 0.25 * alpha * slope {
                        *x = trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // No further progress is possible in floating point.
                return Ok(Centering::Centered);
            }
            if stop(x) {
                return Ok(Centering::Stopped);
            }
        }
    }
}

fn unflatten(p: &LmiProgram, x: &DVector<f64>) -> LmiPoint {
    let n = p.matrix_order;
    let ny = y_var_count(n);
    let mut y = SymMatrix::zeros(n);
    for a in 0..n {
        for b in a..n {
            y.set(a, b, x[y_var_index(n, a, b)]);
        }
    }
    LmiPoint {
        y,
        scalars: x.rows(ny, p.scalar_count()).iter().copied().collect(),
    }
}

fn flatten_point(p: &LmiProgram, point: &LmiPoint) -> Result<DVector<f64>> {
    let n = p.matrix_order;
    if point.y.order() != n || point.scalars.len() != p.scalar_count() {
        return Err(Error::dims("initial point", format!("Y {n}x{n}, {} scalars", p.scalar_count()), format!(
            "Y {0}x{0}, {1} scalars",
            point.y.order(),
            point.scalars.len()
        )));
    }
    let ny = y_var_count(n);
    let mut x = DVector::zeros(ny + p.scalar_count());
    for a in 0..n {
        for b in a..n {
            x[y_var_index(n, a, b)] = point.y.get(a, b);
        }
    }
    for (k, v) in point.scalars.iter().enumerate() {
        x[ny + k] = *v;
    }
    Ok(x)
}

fn default_start(p: &LmiProgram) -> LmiPoint {
    LmiPoint {
        y: SymMatrix::identity(p.matrix_order),
        scalars: vec![0.0; p.scalar_count()],
    }
}

fn certificate(p: &LmiProgram, point: &LmiPoint) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for c in &p.constraints {
        worst = worst.max(evaluate_constraint(c, point)?.violation);
    }
    Ok(worst)
}

/// Solves `p` starting from `Y = I` and zero scalars.
pub fn solve(p: &LmiProgram, opts: &SolverOptions) -> Result<SdpSolution> {
    solve_from(p, opts, &default_start(p))
}

/// Solves `p` starting phase I from `start` (which need not be feasible).
pub fn solve_from(p: &LmiProgram, opts: &SolverOptions, start: &LmiPoint) -> Result<SdpSolution> {
    p.validate()?;
    opts.validate()?;
    let mut x = flatten_point(p, start)?;
    let d = x.len();
    if x.norm() >= opts.feasibility_radius {
        return Err(Error::NumericalBreakdown("initial point lies outside the feasibility radius".into()));
    }
    let lmis = flatten(p);
    let theta: usize = lmis.iter().map(FlatLmi::order).sum::<usize>() + d + 1;
    let mut iterations = 0;

    // Phase I.
    let s0 = lmis
        .iter()
        .map(|l| -crate::linalg::min_eigenvalue(&l.eval(&x)))
        .fold(f64::NEG_INFINITY, f64::max);
    let needs_phase_one = s0 >= 0.0 || lmis.iter().any(|l| l.eval(&x).cholesky().is_none());
    if needs_phase_one {
        let s_start = s0.max(0.0) + 1.0;
        let floor = 1.0 + s_start;
        let mut lmis1: Vec<FlatLmi> = lmis
            .iter()
            .map(|l| {
                let mut coeffs = l.coeffs.clone();
                coeffs.push((d, DMatrix::identity(l.order(), l.order())));
                FlatLmi { g0: l.g0.clone(), coeffs }
            })
            .collect();
        lmis1.push(FlatLmi {
            g0: DMatrix::from_element(1, 1, floor),
            coeffs: vec![(d, DMatrix::from_element(1, 1, 1.0))],
        });
        lmis1.push(ball(d, opts.feasibility_radius));
        let theta1: usize = lmis1.iter().map(FlatLmi::order).sum();
        let mut z = DVector::zeros(d + 1);
        z.rows_mut(0, d).copy_from(&x);
        z[d] = s_start;
        let mut c1 = DVector::zeros(d + 1);
        c1[d] = 1.0;
        let target = -1e-3 * s_start;
        let mut newton = Newton {
            lmis: &lmis1,
            c: c1,
            iterations: 0,
            budget: opts.max_iterations,
        };
        let mut t = 1.0 / s_start;
        let feasible = loop {
            let outcome = newton.center(&mut z, t, &|z: &DVector<f64>| z[d] < target)?;
            let s = z[d];
            let gap = theta1 as f64 / t;
            match outcome {
                Centering::Stopped => break true,
                Centering::Budget => {
                    if s < 0.0 {
                        break true;
                    }
                    let point = unflatten(p, &z.rows(0, d).into_owned());
                    return Ok(SdpSolution {
                        status: SolveStatus::MaxIterations,
                        objective_value: objective(p, &point),
                        max_constraint_eigenvalue: certificate(p, &point)?,
                        y: point.y,
                        scalars: point.scalars,
                        gap_bound: f64::INFINITY,
                        iterations: newton.iterations,
                    });
                }
                Centering::Centered => {
                    if s < 0.0 {
                        break true;
                    }
                    if s - gap > 0.0 || gap <= opts.tolerance * s.abs().max(1.0) {
                        break false;
                    }
                }
            }
            t /= opts.barrier_decrease_factor;
        };
        iterations = newton.iterations;
        x = z.rows(0, d).into_owned();
        if !feasible {
            let point = unflatten(p, &x);
            return Ok(SdpSolution {
                status: SolveStatus::Infeasible,
                objective_value: objective(p, &point),
                max_constraint_eigenvalue: certificate(p, &point)?,
                y: point.y,
                scalars: point.scalars,
                gap_bound: f64::INFINITY,
                iterations,
            });
        }
    }

    // Phase II.
    let mut all = lmis;
    all.push(ball(d, opts.feasibility_radius));
    let ny = y_var_count(p.matrix_order);
    let mut c = DVector::zeros(d);
    for (k, v) in p.objective.iter().enumerate() {
        c[ny + k] = *v;
    }
    let mut newton = Newton {
        lmis: &all,
        c: c.clone(),
        iterations,
        budget: opts.max_iterations,
    };
    let never = |_: &DVector<f64>| false;
    let (status, gap_bound) = if c.amax() == 0.0 {
        // Pure feasibility: move to the analytic centre.
        newton.center(&mut x, 0.0, &never)?;
        (SolveStatus::Feasible, 0.0)
    } else {
        let mut t = theta as f64 / c.dot(&x).abs().max(1.0);
        loop {
            match newton.center(&mut x, t, &never)? {
                Centering::Budget => break (SolveStatus::Feasible, theta as f64 / t),
                _ => {
                    let gap = theta as f64 / t;
                    if gap <= opts.tolerance * c.dot(&x).abs().max(1.0) {
                        break (SolveStatus::Optimal, gap);
                    }
                    t /= opts.barrier_decrease_factor;
                }
            }
        }
    };
    let point = unflatten(p, &x);
    Ok(SdpSolution {
        status,
        objective_value: objective(p, &point),
        max_constraint_eigenvalue: certificate(p, &point)?,
        y: point.y,
        scalars: point.scalars,
        gap_bound,
        iterations: newton.iterations,
    })
}

fn objective(p: &LmiProgram, point: &LmiPoint) -> f64 {
    p.objective.iter().zip(&point.scalars).map(|(c, x)| c * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmi::program::AffineLmiConstraint;
    use approx::assert_abs_diff_eq;

    fn scalar_bound(eps: f64) -> LmiProgram {
        let mut p = LmiProgram::new(0, eps);
        let x = p.add_scalar("x");
        p.set_objective(x, 1.0);
        p.push(
            AffineLmiConstraint::new("x - 2", SymMatrix::from_diagonal(&[-2.0]), Sense::PositiveDefinite)
                .with_scalar(x, SymMatrix::identity(1)),
        );
        p
    }

    #[test]
    fn packed_index_matches_sym_matrix() {
        let n = 4;
        let mut m = SymMatrix::zeros(n);
        for a in 0..n {
            for b in a..n {
                m.set(a, b, y_var_index(n, a, b) as f64);
            }
        }
        let expected: Vec<f64> = (0..y_var_count(n)).map(|v| v as f64).collect();
        assert_eq!(m.packed(), expected.as_slice());
    }

    #[test]
    fn scalar_lower_bound() {
        let sol = solve(&scalar_bound(1e-6), &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(sol.objective_value, 2.0 + 1e-6, epsilon = 1e-7);
        assert!(sol.max_constraint_eigenvalue < 0.0);
    }

    #[test]
    fn infeasible_scalar_pair() {
        // x > 2 and x < 1.
        let mut p = scalar_bound(1e-6);
        p.push(
            AffineLmiConstraint::new("x - 1", SymMatrix::from_diagonal(&[-1.0]), Sense::NegativeDefinite)
                .with_scalar(0, SymMatrix::identity(1)),
        );
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
        // The least achievable violation is (2 - 1) / 2.
        assert!(sol.max_constraint_eigenvalue > 0.4, "{}", sol.max_constraint_eigenvalue);
    }

    #[test]
    fn feasibility_only_program_is_centered() {
        let mut p = LmiProgram::new(0, 1e-6);
        let x = p.add_scalar("x");
        p.push(
            AffineLmiConstraint::new("x - 2", SymMatrix::from_diagonal(&[-2.0]), Sense::PositiveDefinite)
                .with_scalar(x, SymMatrix::identity(1)),
        );
        p.push(
            AffineLmiConstraint::new("x - 4", SymMatrix::from_diagonal(&[-4.0]), Sense::NegativeDefinite)
                .with_scalar(x, SymMatrix::identity(1)),
        );
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Feasible);
        assert_abs_diff_eq!(sol.scalars[0], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn tiny_budget_reports_max_iterations() {
        // Deciding infeasibility of x > 2, x < 1 needs more than one step.
        let mut p = scalar_bound(1e-6);
        p.push(
            AffineLmiConstraint::new("x - 1", SymMatrix::from_diagonal(&[-1.0]), Sense::NegativeDefinite)
                .with_scalar(0, SymMatrix::identity(1)),
        );
        let opts = SolverOptions {
            max_iterations: 1,
            ..Default::default()
        };
        let sol = solve(&p, &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::MaxIterations);
        assert!(!sol.is_feasible());
    }

    #[test]
    fn lyapunov_matrix_variable() {
        // Find Y > I with A Y + Y A' < 0 for a Hurwitz A, minimising nothing.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        let mut p = LmiProgram::new(2, 1e-6);
        p.push(
            AffineLmiConstraint::new("lyap", SymMatrix::zeros(2), Sense::NegativeDefinite)
                .with_matrix_term(a.clone(), DMatrix::identity(2, 2)),
        );
        p.push(
            AffineLmiConstraint::new("Y > I", SymMatrix::scaled_identity(2, -1.0), Sense::PositiveDefinite)
                .with_matrix_term(DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2)),
        );
        let sol = solve(&p, &SolverOptions { feasibility_radius: 1e3, ..Default::default() }).unwrap();
        assert!(sol.is_feasible());
        let y = sol.y.to_dmatrix();
        let lyap = &a * &y + &y * a.transpose();
        assert!(crate::linalg::max_eigenvalue(&lyap) < 0.0);
        assert!(crate::linalg::min_eigenvalue(&y) > 1.0);
    }
}
