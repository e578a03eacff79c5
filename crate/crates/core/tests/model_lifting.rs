use erasure_smpc::lifting::{build_cost_blocks, build_state_lift, constant_term, noise_trace_term};
use erasure_smpc::model::{pseudo_inverse, rank, reachability_index, verify_decomposition};
use erasure_smpc::{LinearSystem, ReachabilityData};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && (a - b).amax() <= tol * (1.0 + a.amax().max(b.amax()))
}

#[test]
fn example_plant_reaches_orthogonal_part_in_three_steps() {
    let sys = LinearSystem::three_state_example();
    assert_eq!(sys.orthogonal_dim(), 3);
    assert_eq!(reachability_index(&sys.a_o(), &sys.b_o()).unwrap(), 3);
    assert!(verify_decomposition(&sys).passed());
}

#[test]
fn example_drift_limit() {
    let sys = LinearSystem::three_state_example();
    let reach = ReachabilityData::new(&sys).unwrap();
    let limit = reach.zeta_upper_limit(&sys);
    assert!((limit - 0.48291).abs() < 5e-5, "limit {limit}");
}

#[test]
fn example_matrix_is_orthogonal() {
    let sys = LinearSystem::three_state_example();
    let a = sys.a();
    assert!(close(&(a.transpose() * a), &DMatrix::identity(3, 3), 1e-12));
}

#[test]
fn unreachable_pair_is_rejected() {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
    let b = DMatrix::zeros(2, 1);
    assert!(reachability_index(&a, &b).is_err());
}

#[test]
fn cost_blocks_stack_weights() {
    let q = DMatrix::identity(2, 2);
    let q_f = DMatrix::identity(2, 2) * 5.0;
    let r = DMatrix::from_element(1, 1, 2.0);
    let c = build_cost_blocks(&q, &q_f, &r, 3).unwrap();
    assert_eq!(c.cal_q.shape(), (8, 8));
    assert_eq!(c.cal_q[(7, 7)], 5.0);
    assert_eq!(c.cal_q[(5, 5)], 1.0);
    assert_eq!(c.cal_r.shape(), (3, 3));
    assert!(build_cost_blocks(&q, &q_f, &DMatrix::from_element(1, 1, 0.0), 3).is_err());
}

#[test]
fn constant_term_matches_direct_sum() {
    let sys = LinearSystem::three_state_example();
    let n = 4;
    let lifted = build_state_lift(&sys, n).unwrap();
    let q = DMatrix::identity(3, 3);
    let q_f = DMatrix::identity(3, 3) * 3.0;
    let costs = build_cost_blocks(&q, &q_f, &DMatrix::from_element(1, 1, 2.0), n).unwrap();
    let sigma_w = DMatrix::identity(3 * n, 3 * n) * 2.0;
    let x = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
    // E‖x_{t+k}‖² under zero input = ‖A^k x‖² + Σ_{j<k} tr((A^{k-1-j})ᵀ A^{k-1-j} 2I).
    let a = sys.a();
    let mut expect = 0.0;
    let mut ak = DMatrix::identity(3, 3);
    let mut noise_acc = 0.0;
    for k in 0..=n {
        let weight = if k == n { &q_f } else { &q };
        let xk = &ak * &x;
        expect += (xk.transpose() * weight * &xk)[(0, 0)];
        if k > 0 {
            // Orthogonal A: each propagated noise block keeps trace 2·3.
            noise_acc += 6.0;
        }
        let scale = if k == n { 3.0 } else { 1.0 };
        expect += scale * noise_acc;
        ak = a * ak;
    }
    let got = constant_term(&lifted, &costs, &x, &sigma_w);
    assert!((got - expect).abs() < 1e-9 * expect, "{got} vs {expect}");
    let trace_only = noise_trace_term(&lifted, &costs, &sigma_w);
    assert!((trace_only - (6.0 + 12.0 + 18.0 + 3.0 * 24.0)).abs() < 1e-9);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pseudo_inverse_satisfies_penrose(a in matrix(4, 2), b in matrix(2, 5)) {
        // Rank at most two, so the generic full-rank path is not the only one exercised.
        let m = &a * &b;
        let p = pseudo_inverse(&m);
        prop_assert!(close(&(&m * &p * &m), &m, 1e-8));
        prop_assert!(close(&(&p * &m * &p), &p, 1e-8));
        let mp = &m * &p;
        let pm = &p * &m;
        prop_assert!(close(&mp, &mp.transpose(), 1e-8));
        prop_assert!(close(&pm, &pm.transpose(), 1e-8));
        prop_assert!(rank(&m, 1e-9) <= 2);
    }

    #[test]
    fn lifted_map_matches_stepping(
        x in proptest::collection::vec(-5.0..5.0f64, 3),
        u in proptest::collection::vec(-5.0..5.0f64, 5),
        w in proptest::collection::vec(-2.0..2.0f64, 15),
    ) {
        let sys = LinearSystem::three_state_example();
        let n = 5;
        let lifted = build_state_lift(&sys, n).unwrap();
        let x0 = DVector::from_column_slice(&x);
        let uu = DVector::from_column_slice(&u);
        let ww = DVector::from_column_slice(&w);
        let stacked = &lifted.cal_a * &x0 + &lifted.cal_b * &uu + &lifted.cal_d * &ww;
        let mut xs = x0.clone();
        prop_assert!((stacked.rows(0, 3) - &xs).amax() < 1e-12);
        for k in 0..n {
            xs = sys.step(&xs, &uu.rows(k, 1).into_owned(), &ww.rows(3 * k, 3).into_owned());
            prop_assert!((stacked.rows(3 * (k + 1), 3) - &xs).amax() < 1e-10);
        }
    }
}
