mod common;

use common::{brute_force_q_lambda, q_lambda_max_gap};
use discern::agent::{discounts, peng_q_lambda_targets};
use discern::math::Tensor;

#[test]
fn recursion_matches_n_step_mixture() {
    let gap = q_lambda_max_gap(100, &[0.0, 0.5, 0.9, 1.0], 42);
    assert!(gap <= 1e-10, "max gap {gap:e}");
}

#[test]
fn lambda_zero_is_one_step_q_learning() {
    let q = [vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.25]];
    let r = [0.1, 0.2, 1.0];
    let d = discounts(3, 0.9);
    let t = peng_q_lambda_targets(&r, &d, &Tensor::from_rows(3, 2, q.concat()), 0.0).unwrap();
    assert_eq!(t, vec![0.1 + 0.9 * 2.0, 0.2 + 0.9 * 0.5, 1.0]);
}

#[test]
fn lambda_one_is_the_discounted_return() {
    let q = vec![vec![5.0, 1.0]; 4];
    let r = [0.0, 0.0, 0.0, 1.0];
    let d = discounts(4, 0.5);
    let t = brute_force_q_lambda(&r, &d, &q, 1.0);
    assert_eq!(t, vec![0.125, 0.25, 0.5, 1.0]);
    let fast = peng_q_lambda_targets(&r, &d, &Tensor::from_rows(4, 2, q.concat()), 1.0).unwrap();
    assert_eq!(fast, t);
}

#[test]
fn terminal_step_never_bootstraps() {
    let d = discounts(5, 0.98);
    assert_eq!(d.len(), 5);
    assert_eq!(d[4], 0.0);
    assert!(d[..4].iter().all(|&g| g == 0.98));
}
