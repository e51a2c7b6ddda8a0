//! Property tests over randomly generated graphs, programs and states.

use iqc_consensus::Error;
use iqc_consensus::graph::{laplacian, topology_constants, DirectedGraph, PinnedTopology, SigmaRule};
use iqc_consensus::linalg::min_eigenvalue;
use iqc_consensus::lmi::{evaluate_constraint, solve, AffineLmiConstraint, LmiProgram, Sense, SolverOptions, SymMatrix};
use iqc_consensus::pendulum::{self, PendulumParameters};
use iqc_consensus::synthesis::{synthesize, Formulation, SynthesisProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// A directed graph containing a spanning tree rooted at node 0, which is
/// always pinned, plus extra edges and pins.
fn pinned_topology() -> impl Strategy<Value = PinnedTopology> {
    (1usize..7).prop_flat_map(|n| {
        let parents = proptest::collection::vec(any::<prop::sample::Index>(), n - 1);
        let extra = proptest::collection::vec((0..n, 0..n), 0..2 * n);
        let weights = proptest::collection::vec(0.2f64..3.0, n * n);
        let pins = proptest::collection::vec(prop_oneof![Just(0.0), 0.2f64..2.0], n);
        (Just(n), parents, extra, weights, pins).prop_map(|(n, parents, extra, weights, mut pins)| {
            let mut edges: Vec<(usize, usize)> = parents.iter().enumerate().map(|(k, p)| (k + 1, p.index(k + 1))).collect();
            for (i, j) in extra {
                if i != j && !edges.contains(&(i, j)) {
                    edges.push((i, j));
                }
            }
            let weighted: Vec<_> = edges.iter().map(|&(i, j)| (i, j, weights[i * n + j])).collect();
            pins[0] = pins[0].max(0.5);
            PinnedTopology::new(DirectedGraph::with_weights(n, weighted).unwrap(), pins).unwrap()
        })
    })
}

/// `minimize c (x1 + x2)` subject to `[[x1 - a, d], [d, x2 - b]] >= 0`.
fn coupled_program(a: f64, b: f64, d: f64, c: f64, eps: f64) -> LmiProgram {
    let mut p = LmiProgram::new(0, eps);
    let x1 = p.add_scalar("x1");
    let x2 = p.add_scalar("x2");
    p.set_objective(x1, c);
    p.set_objective(x2, c);
    let mut constant = SymMatrix::from_diagonal(&[-a, -b]);
    constant.set(0, 1, d);
    p.push(
        AffineLmiConstraint::new("coupled", constant, Sense::PositiveDefinite)
            .with_scalar(x1, SymMatrix::from_diagonal(&[1.0, 0.0]))
            .with_scalar(x2, SymMatrix::from_diagonal(&[0.0, 1.0])),
    );
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_annihilates_ones(t in pinned_topology()) {
        let l = laplacian(t.graph());
        let ones = DVector::from_element(t.node_count(), 1.0);
        prop_assert!((l * ones).amax() < 1e-12);
    }

    #[test]
    fn pinned_topology_constants(t in pinned_topology()) {
        let lg = t.pinned_laplacian();
        let theta = lg.clone().lu().solve(&DVector::from_element(t.node_count(), 1.0)).unwrap();
        prop_assert!(theta.iter().all(|&v| v > 0.0));
        let h = DMatrix::from_diagonal(&theta.map(|v| 1.0 / v)) * &lg;
        let h_min = min_eigenvalue(&(&h + h.transpose()));
        for rule in [SigmaRule::HalfMinEigenvalue, SigmaRule::HalfMaxEigenvalue] {
            match topology_constants(&t, rule) {
                Ok(c) => {
                    prop_assert!(h_min > 0.0);
                    prop_assert!((&c.theta - &theta).amax() < 1e-9 * theta.amax());
                    prop_assert!((&c.h - c.h.transpose()).amax() < 1e-12);
                    prop_assert!((&c.m - c.m.transpose()).amax() < 1e-12);
                    prop_assert!(min_eigenvalue(&c.h) > 0.0);
                    prop_assert!(min_eigenvalue(&c.m) > 0.0);
                    prop_assert!(c.sigma > 0.0 && c.lambda_bar > 0.0);
                    let again = topology_constants(&t, rule).unwrap();
                    prop_assert_eq!(c, again);
                }
                Err(Error::IndefiniteTopology { min_eigenvalue }) => {
                    prop_assert!(h_min <= 1e-12);
                    prop_assert!((min_eigenvalue - h_min).abs() < 1e-9);
                }
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solved_points_satisfy_every_constraint(a in -2.0f64..2.0, b in -2.0f64..2.0, d in -1.5f64..1.5) {
        let p = coupled_program(a, b, d, 1.0, 1e-6);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        prop_assert!(sol.is_feasible());
        for c in &p.constraints {
            let v = evaluate_constraint(c, &sol.point()).unwrap();
            prop_assert!(v.violation <= -p.strictness_margin / 2.0);
        }
        // Analytic optimum: x1 - a - eps = x2 - b - eps = |d| + eps.
        prop_assert!((sol.objective_value - (a + b + 2.0 * d.abs() + 2.0 * 1e-6)).abs() < 1e-6);
    }

    #[test]
    fn loosening_margin_never_increases_objective(a in -2.0f64..2.0, b in -2.0f64..2.0, d in -1.5f64..1.5, e1 in 1e-7f64..1e-3, e2 in 1e-7f64..1e-3) {
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let opts = SolverOptions::default();
        let loose = solve(&coupled_program(a, b, d, 1.0, lo), &opts).unwrap();
        let tight = solve(&coupled_program(a, b, d, 1.0, hi), &opts).unwrap();
        prop_assert!(loose.objective_value <= tight.objective_value + opts.tolerance);
    }

    #[test]
    fn objective_scaling(a in -2.0f64..2.0, b in -2.0f64..2.0, d in -1.5f64..1.5, c in 0.1f64..10.0) {
        let opts = SolverOptions::default();
        let base = solve(&coupled_program(a, b, d, 1.0, 1e-6), &opts).unwrap();
        let scaled = solve(&coupled_program(a, b, d, c, 1e-6), &opts).unwrap();
        prop_assert!((scaled.objective_value - c * base.objective_value).abs() < 1e-6 * c.max(1.0));
        for (x, y) in base.scalars.iter().zip(&scaled.scalars) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }
}

fn fixture_problem() -> SynthesisProblem {
    let f = pendulum::fixture(&PendulumParameters::default()).unwrap();
    SynthesisProblem::from_topology(f.model, f.bounds, &f.control, f.weights, Formulation::Certified).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bound_is_positive_definite_in_initial_error(e in proptest::collection::vec(-1.0f64..1.0, 6)) {
        use std::sync::OnceLock;
        static RESULT: OnceLock<iqc_consensus::synthesis::SynthesisResult> = OnceLock::new();
        let result = RESULT.get_or_init(|| synthesize(&fixture_problem(), None, &SolverOptions::default()).unwrap());
        let e0 = DVector::from_vec(e);
        let b = result.bound_at(&e0).unwrap();
        if e0.norm() == 0.0 {
            prop_assert_eq!(b, 0.0);
        } else {
            // Bounded below by the smallest eigenvalue of the block form.
            let theta = &result.constants.theta;
            let lmin = min_eigenvalue(&result.y_inverse) / theta.max();
            prop_assert!(b >= lmin * e0.norm_squared() * (1.0 - 1e-9));
            prop_assert!(b > 0.0);
        }
        prop_assert_eq!(result.bound_at(&DVector::zeros(6)).unwrap(), 0.0);
    }

    #[test]
    fn gain_formula_scales_inversely_with_r(c in 0.05f64..20.0) {
        let p = fixture_problem();
        let y_inv = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let k = iqc_consensus::synthesis::gain(&p, &y_inv).unwrap();
        let mut scaled = p.clone();
        scaled.weights = iqc_consensus::synthesis::CostWeights::new(p.weights.q.clone(), &p.weights.r * c).unwrap();
        let r_hat = p.weights.r_hat(&p.constants);
        prop_assert!((scaled.weights.r_hat(&scaled.constants) - &r_hat * c).amax() < 1e-12 * c.max(1.0));
        let ks = iqc_consensus::synthesis::gain(&scaled, &y_inv).unwrap();
        prop_assert!((ks * c - &k).amax() < 1e-10 * k.amax());
    }
}
