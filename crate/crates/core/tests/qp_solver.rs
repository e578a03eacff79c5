use erasure_smpc::qp::{check_kkt, solve};
use erasure_smpc::{QuadraticProgram, SolveStatus, SolverSettings};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn contradictory_bounds_are_infeasible() {
    // z ≤ −1 and −z ≤ −1.
    let qp = QuadraticProgram::new(
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
        DVector::from_column_slice(&[-1.0, -1.0]),
    )
    .unwrap();
    let sol = solve(&qp, &SolverSettings::default(), None);
    assert_eq!(sol.status, SolveStatus::Infeasible);
}

#[test]
fn open_direction_is_unbounded() {
    let qp = QuadraticProgram::new(
        DMatrix::zeros(2, 2),
        DVector::from_column_slice(&[-1.0, 0.0]),
        DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        DVector::from_column_slice(&[1.0]),
    )
    .unwrap();
    let sol = solve(&qp, &SolverSettings::default(), None);
    assert_eq!(sol.status, SolveStatus::Unbounded);
}

#[test]
fn text_format_rejects_malformed_input() {
    assert!(QuadraticProgram::from_text("").is_err());
    assert!(QuadraticProgram::from_text("qp 1 0\n1\n").is_err());
    assert!(QuadraticProgram::from_text("lp 1 0\n1\n0\n").is_err());
    assert!(QuadraticProgram::from_text("qp 1 0\n# comment\n2\n-1\n").is_ok());
}

#[test]
fn text_file_round_trip() {
    let qp = QuadraticProgram::new(
        DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        DVector::from_column_slice(&[-1.0, 1.0 / 3.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        DVector::from_column_slice(&[0.1]),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.qp");
    qp.write_text(&path).unwrap();
    assert_eq!(QuadraticProgram::read_text(&path).unwrap(), qp);
}

#[test]
fn settings_validation() {
    let s = SolverSettings { alpha: 2.0, ..SolverSettings::default() };
    assert!(s.validate().is_err());
    assert!(SolverSettings::default().validate().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn box_qp_matches_clamped_minimiser(
        diag in proptest::collection::vec(0.1..10.0f64, 1..8),
        seed in proptest::collection::vec(-10.0..10.0f64, 8),
        width in proptest::collection::vec(0.0..3.0f64, 8),
    ) {
        // Separable: minimiser of ½pz² + qz over [−w, w] is clamp(−q/p).
        let n = diag.len();
        let p = DMatrix::from_diagonal(&DVector::from_column_slice(&diag));
        let q = DVector::from_fn(n, |i, _| seed[i]);
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = 1.0;
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i] = width[i];
            b[2 * i + 1] = width[i];
        }
        let qp = QuadraticProgram::new(p, q.clone(), a, b).unwrap();
        let sol = solve(&qp, &SolverSettings::default(), None);
        prop_assert_eq!(sol.status, SolveStatus::Optimal);
        for i in 0..n {
            let expect = (-q[i] / diag[i]).clamp(-width[i], width[i]);
            prop_assert!((sol.z[i] - expect).abs() < 1e-6, "{} vs {}", sol.z[i], expect);
        }
        prop_assert!(check_kkt(&qp, &sol.z, &sol.y).max() < 1e-6);
    }

    #[test]
    fn text_round_trip_is_exact(vals in proptest::collection::vec(-1e6..1e6f64, 4 + 2 + 6 + 3)) {
        let g = DMatrix::from_row_slice(2, 2, &vals[0..4]);
        let p = &g * g.transpose();
        let q = DVector::from_column_slice(&vals[4..6]);
        let a = DMatrix::from_row_slice(3, 2, &vals[6..12]);
        let b = DVector::from_column_slice(&vals[12..15]);
        let qp = QuadraticProgram::new(p, q, a, b).unwrap();
        prop_assert_eq!(QuadraticProgram::from_text(&qp.to_text()).unwrap(), qp);
    }

    #[test]
    fn warm_start_from_own_solution_is_no_slower(
        diag in proptest::collection::vec(0.5..4.0f64, 3),
        q in proptest::collection::vec(-5.0..5.0f64, 3),
    ) {
        let p = DMatrix::from_diagonal(&DVector::from_column_slice(&diag));
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let qp = QuadraticProgram::new(p, DVector::from_column_slice(&q), a, DVector::from_element(1, 0.5)).unwrap();
        let settings = SolverSettings::default();
        let cold = solve(&qp, &settings, None);
        let warm = solve(&qp, &settings, Some(&cold.warm_start()));
        prop_assert_eq!(warm.status, SolveStatus::Optimal);
        prop_assert!(warm.iterations <= cold.iterations);
    }
}
