use dsmpc::qp::{solve_default, QpStatus, QuadraticProgram};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, &v[..rows * cols])
}

/// Checks the KKT conditions of `min 1/2 x'Px + q'x  s.t.  Gx <= h, lo <= x <= hi`.
fn kkt_error(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> f64 {
    let stationarity = (p * x + q + g.transpose() * y + z).amax();
    let primal = (g * x - h).iter().chain((lo - x).iter()).chain((x - hi).iter()).fold(0.0f64, |m, &v| m.max(v));
    let dual = y.iter().fold(0.0f64, |m, &v| m.max(-v));
    let mut slack: f64 = 0.0;
    for r in 0..g.nrows() {
        slack = slack.max((y[r] * (g.row(r) * x)[0] - y[r] * h[r]).abs());
    }
    for k in 0..x.len() {
        let gap = if z[k] > 0.0 { hi[k] - x[k] } else { x[k] - lo[k] };
        slack = slack.max((z[k] * gap).abs());
    }
    stationarity.max(primal).max(dual).max(slack)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_strictly_convex_programs_satisfy_kkt(
        n in 1usize..5,
        m in 0usize..5,
        seed in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        let l = matrix(n, n, &seed);
        let p = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
        let q = DVector::from_column_slice(&seed[16..16 + n]);
        let g = matrix(m, n, &seed[24..]);
        // Feasible by construction: the origin satisfies every row.
        let h = DVector::from_fn(m, |r, _| 0.1 + seed[44 + r].abs());
        let lo = DVector::from_element(n, -2.0);
        let hi = DVector::from_element(n, 2.0);
        let qp = QuadraticProgram::new(p.clone(), q.clone())
            .with_inequalities(g.clone(), h.clone())
            .with_bounds(lo.clone(), hi.clone());
        let sol = solve_default(&qp).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        let err = kkt_error(&p, &q, &g, &h, &lo, &hi, &sol.x, &sol.ineq_multipliers, &sol.bound_multipliers);
        prop_assert!(err <= 1e-5, "kkt error {}", err);
        prop_assert!((sol.objective - qp.objective(&sol.x)).abs() <= 1e-8 * (1.0 + sol.objective.abs()));
    }
}

#[test]
fn equality_constrained_least_norm() {
    // min |x|^2 / 2 subject to x1 + x2 + x3 = 3.
    let qp = QuadraticProgram::new(DMatrix::identity(3, 3), DVector::zeros(3))
        .with_equalities(DMatrix::from_element(1, 3, 1.0), DVector::from_element(1, 3.0));
    let sol = solve_default(&qp).unwrap();
    assert!(sol.is_optimal());
    for k in 0..3 {
        assert!((sol.x[k] - 1.0).abs() < 1e-6);
    }
    assert!((sol.eq_multipliers[0] + 1.0).abs() < 1e-5);
}

#[test]
fn contradictory_bounds_are_infeasible() {
    let qp = QuadraticProgram::new(DMatrix::identity(1, 1), DVector::zeros(1))
        .with_inequalities(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, -1.0))
        .with_bounds(DVector::from_element(1, 0.0), DVector::from_element(1, 1.0));
    match solve_default(&qp) {
        Ok(sol) => assert_eq!(sol.status, QpStatus::Infeasible),
        Err(e) => {
            assert!(matches!(e, dsmpc::Error::Infeasible { .. } | dsmpc::Error::SubproblemInfeasible { .. }), "{e}")
        }
    }
}
