//! Uncertain coupling operators and sampled IQC checks.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Time-varying attachment point of a spring-damper coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    Sin {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    Cos {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    Constant {
        value: f64,
    },
}

impl Placement {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Placement::Sin { amplitude, frequency, phase } => amplitude * (frequency * t + phase).sin(),
            Placement::Cos { amplitude, frequency, phase } => amplitude * (frequency * t + phase).cos(),
            Placement::Constant { value } => value,
        }
    }

    /// `sup_t |p(t)|`.
    pub fn sup_abs(&self) -> f64 {
        match *self {
            Placement::Sin { amplitude, .. } | Placement::Cos { amplitude, .. } => amplitude.abs(),
            Placement::Constant { value } => value.abs(),
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            Placement::Sin { amplitude, frequency, phase } | Placement::Cos { amplitude, frequency, phase } => {
                amplitude.is_finite() && frequency.is_finite() && phase.is_finite()
            }
            Placement::Constant { value } => value.is_finite(),
        }
    }
}

/// Scalar factor `f(t)` of a gain `Gamma(t) = f(t) * base`.
#[derive(Clone)]
pub enum GainFactor {
    /// `p(t)^2 / l^2`.
    PlacementSquared { placement: Placement, length: f64 },
    Constant(f64),
    /// Arbitrary factor with an optional known `sup_t |f(t)|`.
    Custom {
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        sup_abs: Option<f64>,
    },
}

impl GainFactor {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            GainFactor::PlacementSquared { placement, length } => {
                let p = placement.eval(t);
                p * p / (length * length)
            }
            GainFactor::Constant(c) => *c,
            GainFactor::Custom { f, .. } => f(t),
        }
    }

    /// Uniform bound on `|f|` over the admissible class.
    ///
    /// For placements this is 1, since any admissible placement satisfies
    /// `|p(t)| <= l`.
    pub fn sup_abs(&self) -> Option<f64> {
        match self {
            GainFactor::PlacementSquared { .. } => Some(1.0),
            GainFactor::Constant(c) => Some(c.abs()),
            GainFactor::Custom { sup_abs, .. } => *sup_abs,
        }
    }
}

impl fmt::Debug for GainFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GainFactor::PlacementSquared { placement, length } => f
                .debug_struct("PlacementSquared")
                .field("placement", placement)
                .field("length", length)
                .finish(),
            GainFactor::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            GainFactor::Custom { sup_abs, .. } => f.debug_struct("Custom").field("sup_abs", sup_abs).finish_non_exhaustive(),
        }
    }
}

type UserFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub enum OperatorKind {
    /// `phi(t, y) = f(t) * base * y`.
    MemorylessGain { base: DMatrix<f64>, factor: GainFactor },
    /// Any pointwise map; no analytic IQC bound is known.
    UserSupplied(UserFn),
}

impl fmt::Debug for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorKind::MemorylessGain { base, factor } => f
                .debug_struct("MemorylessGain")
                .field("base", base)
                .field("factor", factor)
                .finish(),
            OperatorKind::UserSupplied(_) => f.write_str("UserSupplied(..)"),
        }
    }
}

/// Uncertain coupling `phi_ij` acting on `x_j - x_i` for edge `(i, j)`.
#[derive(Debug, Clone)]
pub struct CouplingOperator {
    pub edge: (usize, usize),
    pub kind: OperatorKind,
}

impl CouplingOperator {
    pub fn memoryless(edge: (usize, usize), base: DMatrix<f64>, factor: GainFactor) -> Self {
        Self {
            edge,
            kind: OperatorKind::MemorylessGain { base, factor },
        }
    }

    pub fn user_supplied(edge: (usize, usize), f: impl Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self {
            edge,
            kind: OperatorKind::UserSupplied(Arc::new(f)),
        }
    }

    /// `Gamma(t)` for memoryless gains.
    pub fn gain(&self, t: f64) -> Option<DMatrix<f64>> {
        match &self.kind {
            OperatorKind::MemorylessGain { base, factor } => Some(base * factor.eval(t)),
            OperatorKind::UserSupplied(_) => None,
        }
    }

    pub fn apply(&self, t: f64, y: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            OperatorKind::MemorylessGain { base, factor } => base * y * factor.eval(t),
            OperatorKind::UserSupplied(f) => f(t, y),
        }
    }

    /// Output dimension; `None` for user-supplied maps.
    pub fn output_dim(&self) -> Option<usize> {
        match &self.kind {
            OperatorKind::MemorylessGain { base, .. } => Some(base.nrows()),
            OperatorKind::UserSupplied(_) => None,
        }
    }
}

/// Spring-damper coupling `(p(t)^2 / l^2) [k_spring, k_damper]` on edge `(i, j)`.
pub fn pendulum_coupling(edge: (usize, usize), spring_k: f64, damper_k: f64, placement: Placement, length: f64) -> Result<CouplingOperator> {
    if !(length.is_finite() && length > 0.0) {
        return Err(Error::InvalidScenario(format!("pendulum length must be positive, got {length}")));
    }
    if !(spring_k.is_finite() && damper_k.is_finite() && placement.is_finite()) {
        return Err(Error::InvalidScenario("coupling parameters must be finite".into()));
    }
    let sup = placement.sup_abs();
    if sup > length {
        // Report a time at which |p| peaks.
        let time = match placement {
            Placement::Sin { frequency, phase, .. } if frequency != 0.0 => (std::f64::consts::FRAC_PI_2 - phase) / frequency,
            Placement::Cos { frequency, phase, .. } if frequency != 0.0 => -phase / frequency,
            _ => 0.0,
        };
        return Err(Error::PlacementOutOfRange {
            time,
            value: placement.eval(time),
            length,
        });
    }
    Ok(CouplingOperator::memoryless(
        edge,
        DMatrix::from_row_slice(1, 2, &[spring_k, damper_k]),
        GainFactor::PlacementSquared { placement, length },
    ))
}

/// Tight `C` with `|phi(t, y)| <= |C y|` for all `t` and `y`.
pub fn iqc_bound_matrix(op: &CouplingOperator) -> Result<DMatrix<f64>> {
    match &op.kind {
        OperatorKind::MemorylessGain { base, factor } => {
            let sup = factor.sup_abs().filter(|s| s.is_finite()).ok_or(Error::UnboundedGain)?;
            Ok(base * sup)
        }
        OperatorKind::UserSupplied(_) => Err(Error::UnboundedGain),
    }
}

/// Integrals of `|phi|^2` and `|C y|^2` up to each check time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqcReport {
    pub edge: (usize, usize),
    pub check_times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// Richardson estimate of the combined quadrature error.
    pub error_estimate: Vec<f64>,
    pub satisfied: Vec<bool>,
}

impl IqcReport {
    pub fn all_satisfied(&self) -> bool {
        self.satisfied.iter().all(|&s| s)
    }
}

/// `t_l = l T / 20` for `l = 1..=20`.
pub fn default_check_times(horizon: f64) -> Vec<f64> {
    (1..=20).map(|l| l as f64 * horizon / 20.0).collect()
}

/// Index of the sample that coincides with `t`.
pub(crate) fn sample_index(times: &[f64], t: f64) -> Result<usize> {
    let k = times.partition_point(|&s| s < t);
    let tol = 1e-9 * t.abs().max(1.0);
    [k.saturating_sub(1), k]
        .into_iter()
        .filter(|&k| k < times.len())
        .find(|&k| (times[k] - t).abs() <= tol)
        .ok_or_else(|| Error::GridMismatch(format!("check time {t} is not a sample time")))
}

/// Cumulative trapezoid integral at every sample.
pub(crate) fn cumulative_trapezoid(times: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.len());
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..f.len() {
        acc += 0.5 * (times[k] - times[k - 1]) * (f[k] + f[k - 1]);
        out.push(acc);
    }
    out
}

/// Trapezoid over `[t_0, t_k]` using every other sample (the last odd
/// interval, if any, at the fine step).
fn coarse_trapezoid(times: &[f64], f: &[f64], k: usize) -> f64 {
    let even = k - k % 2;
    let mut acc = 0.0;
    let mut m = 2;
    while m <= even {
        acc += 0.5 * (times[m] - times[m - 2]) * (f[m] + f[m - 2]);
        m += 2;
    }
    if k % 2 == 1 {
        acc += 0.5 * (times[k] - times[k - 1]) * (f[k] + f[k - 1]);
    }
    acc
}

/// Checks `int_0^{t_l} |phi(t, y)|^2 <= int_0^{t_l} |C y|^2` at each `t_l`.
///
/// `y` holds the operator input at `times`; every check time must be a
/// sample time and the samples must be at least twice as dense as the checks.
pub fn verify_iqc(op: &CouplingOperator, times: &[f64], y: &[DVector<f64>], c: &DMatrix<f64>, check_times: &[f64]) -> Result<IqcReport> {
    if times.len() != y.len() {
        return Err(Error::GridMismatch(format!("{} sample times but {} samples", times.len(), y.len())));
    }
    if times.len() < 3 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::GridMismatch("sample times must be strictly increasing with at least 3 samples".into()));
    }
    if times.len() < 2 * check_times.len() {
        return Err(Error::GridMismatch("signal grid is not finer than the check grid".into()));
    }
    let phi2: Vec<f64> = times.iter().zip(y).map(|(&t, v)| op.apply(t, v).norm_squared()).collect();
    let cy2: Vec<f64> = y
        .iter()
        .map(|v| {
            if v.len() != c.ncols() {
                return Err(Error::dims("IQC signal", c.ncols(), v.len()));
            }
            Ok((c * v).norm_squared())
        })
        .collect::<Result<_>>()?;
    let lhs_all = cumulative_trapezoid(times, &phi2);
    let rhs_all = cumulative_trapezoid(times, &cy2);

    let mut report = IqcReport {
        edge: op.edge,
        check_times: check_times.to_vec(),
        lhs: Vec::with_capacity(check_times.len()),
        rhs: Vec::with_capacity(check_times.len()),
        error_estimate: Vec::with_capacity(check_times.len()),
        satisfied: Vec::with_capacity(check_times.len()),
    };
    for &tl in check_times {
        let k = sample_index(times, tl)?;
        let (lhs, rhs) = (lhs_all[k], rhs_all[k]);
        let err = if k >= 2 {
            ((lhs - coarse_trapezoid(times, &phi2, k)).abs() + (rhs - coarse_trapezoid(times, &cy2, k)).abs()) / 3.0
        } else {
            0.0
        };
        report.lhs.push(lhs);
        report.rhs.push(rhs);
        report.error_estimate.push(err);
        report.satisfied.push(lhs <= rhs * (1.0 + 1e-6) + err);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn a_placement() -> Placement {
        Placement::Sin {
            amplitude: 0.5,
            frequency: 0.2,
            phase: 0.0,
        }
    }

    fn grid(n: usize, horizon: f64) -> Vec<f64> {
        (0..=n).map(|k| k as f64 * horizon / n as f64).collect()
    }

    fn signal(times: &[f64]) -> Vec<DVector<f64>> {
        times.iter().map(|&t| dvector![(1.3 * t).sin() * (-0.1 * t).exp(), (0.7 * t).cos()]).collect()
    }

    #[test]
    fn pendulum_gain_matches_formula() {
        let op = pendulum_coupling((0, 1), 2.0, 1.0, a_placement(), 1.0).unwrap();
        for t in [0.0f64, 1.0, 3.7, 12.0] {
            let s = (0.2 * t).sin();
            let expected = dmatrix![2.0, 1.0] * (0.25 * s * s);
            assert_abs_diff_eq!(op.gain(t).unwrap(), expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn boundary_and_vanishing_placements() {
        let full = pendulum_coupling((0, 1), 4.0, 2.0, Placement::Constant { value: 2.0 }, 2.0).unwrap();
        assert_eq!(full.gain(5.0).unwrap(), dmatrix![4.0, 2.0]);
        let tiny = pendulum_coupling((0, 1), 4.0, 2.0, Placement::Constant { value: 1e-9 }, 1.0).unwrap();
        assert!(tiny.gain(0.0).unwrap().amax() < 1e-17);
    }

    #[test]
    fn placement_beyond_length_is_rejected() {
        let p = Placement::Cos {
            amplitude: 1.5,
            frequency: 0.1,
            phase: 0.0,
        };
        assert!(matches!(pendulum_coupling((0, 1), 1.0, 1.0, p, 1.0), Err(Error::PlacementOutOfRange { .. })));
    }

    #[test]
    fn bound_matrices() {
        let left = pendulum_coupling((0, 1), 2.0, 1.0, a_placement(), 1.0).unwrap();
        assert_eq!(iqc_bound_matrix(&left).unwrap(), dmatrix![2.0, 1.0]);
        let b = Placement::Cos {
            amplitude: 0.8,
            frequency: 0.1,
            phase: 0.0,
        };
        let right = pendulum_coupling((1, 2), 4.0, 2.0, b, 1.0).unwrap();
        assert_eq!(iqc_bound_matrix(&right).unwrap(), dmatrix![4.0, 2.0]);
        let zero = CouplingOperator::memoryless((0, 1), DMatrix::zeros(1, 2), GainFactor::Constant(1.0));
        assert_eq!(iqc_bound_matrix(&zero).unwrap(), DMatrix::zeros(1, 2));
        let user = CouplingOperator::user_supplied((0, 1), |_, y| y.clone());
        assert!(matches!(iqc_bound_matrix(&user), Err(Error::UnboundedGain)));
    }

    #[test]
    fn iqc_cases() {
        let times = grid(2000, 30.0);
        let y = signal(&times);
        let checks = default_check_times(30.0);
        let c = dmatrix![2.0, 1.0];

        let op = pendulum_coupling((0, 1), 2.0, 1.0, a_placement(), 1.0).unwrap();
        assert!(verify_iqc(&op, &times, &y, &c, &checks).unwrap().all_satisfied());

        let double = CouplingOperator::memoryless((0, 1), c.clone(), GainFactor::Constant(2.0));
        let r = verify_iqc(&double, &times, &y, &c, &checks).unwrap();
        assert!(r.satisfied.iter().all(|&s| !s));

        let exact = CouplingOperator::memoryless((0, 1), c.clone(), GainFactor::Constant(1.0));
        let r = verify_iqc(&exact, &times, &y, &c, &checks).unwrap();
        assert!(r.all_satisfied());
        for (l, r) in r.lhs.iter().zip(&r.rhs) {
            assert_abs_diff_eq!(l, r, epsilon = 1e-12 * r.max(1.0));
        }
        assert!(r.lhs.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn grid_mismatches() {
        let times = grid(100, 10.0);
        let y = signal(&times);
        let op = pendulum_coupling((0, 1), 2.0, 1.0, a_placement(), 1.0).unwrap();
        let c = dmatrix![2.0, 1.0];
        assert!(matches!(verify_iqc(&op, &times, &y[..50], &c, &[5.0]), Err(Error::GridMismatch(_))));
        assert!(matches!(verify_iqc(&op, &times, &y, &c, &[5.05]), Err(Error::GridMismatch(_))));
        let dense_checks = grid(80, 10.0);
        assert!(matches!(verify_iqc(&op, &times, &y, &c, &dense_checks), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn boundary_placement_is_tight() {
        let op = pendulum_coupling((0, 1), 2.0, 1.0, Placement::Constant { value: 1.0 }, 1.0).unwrap();
        let c = iqc_bound_matrix(&op).unwrap();
        let times = grid(1000, 10.0);
        let r = verify_iqc(&op, &times, &signal(&times), &c, &[10.0]).unwrap();
        assert_abs_diff_eq!(r.lhs[0] / r.rhs[0], 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn memoryless_gain_is_linear(
            t in 0.0f64..50.0,
            y1 in proptest::collection::vec(-10.0f64..10.0, 2),
            y2 in proptest::collection::vec(-10.0f64..10.0, 2),
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let op = pendulum_coupling((0, 1), 2.0, 1.0, a_placement(), 1.0).unwrap();
            let (y1, y2) = (DVector::from_vec(y1), DVector::from_vec(y2));
            let lhs = op.apply(t, &(&y1 * a + &y2 * b));
            let rhs = op.apply(t, &y1) * a + op.apply(t, &y2) * b;
            prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + y1.amax() + y2.amax()) * 10.0);
        }

        #[test]
        fn pendulum_couplings_dominated(
            amplitude in 0.0f64..=1.0,
            frequency in 0.0f64..2.0,
            phase in -3.0f64..3.0,
            use_sin in any::<bool>(),
            k1 in 0.0f64..10.0,
            k2 in 0.0f64..10.0,
            w in 0.1f64..3.0,
        ) {
            let p = if use_sin {
                Placement::Sin { amplitude, frequency, phase }
            } else {
                Placement::Cos { amplitude, frequency, phase }
            };
            let op = pendulum_coupling((0, 1), k1, k2, p, 1.0).unwrap();
            let c = iqc_bound_matrix(&op).unwrap();
            let times = grid(400, 20.0);
            let y: Vec<DVector<f64>> = times.iter().map(|&t| dvector![(w * t).sin(), (w * t).cos() * 2.0]).collect();
            let r = verify_iqc(&op, &times, &y, &c, &default_check_times(20.0)).unwrap();
            prop_assert!(r.all_satisfied());
        }
    }
}
