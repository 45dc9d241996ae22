mod common;

use common::suite;

#[test]
fn q1_weights_form_a_partition_of_unity() {
    suite::partition_of_unity().unwrap();
}

#[test]
fn push_conserves_mass_step_by_step() {
    suite::push_conserves_mass().unwrap();
}

#[test]
fn push_is_linear_in_the_initial_vector() {
    suite::push_is_linear().unwrap();
}

#[test]
fn scheme_kernels_are_row_stochastic_and_conserve_mass() {
    suite::scheme_kernels_are_stochastic().unwrap();
}

#[test]
fn gibbs_matches_projected_gradient() {
    suite::gibbs_matches_projected_gradient().unwrap();
}

#[test]
fn gaussian_coupling_is_monotone() {
    suite::gaussian_coupling_is_monotone().unwrap();
}

#[test]
fn w1_matches_transport_lp() {
    suite::w1_matches_transport_lp().unwrap();
}

#[test]
fn zero_entropy_sweep_equals_path_enumeration() {
    suite::zero_entropy_sweep_equals_path_enumeration().unwrap();
}

#[test]
fn transport_oracle_on_known_cases() {
    let d = suite::transport_lp(&[(0.0, 0.5), (1.0, 0.5)], &[(0.5, 1.0)]);
    assert!((d - 0.5).abs() < 1e-15);
    assert_eq!(suite::transport_lp(&[(0.2, 1.0)], &[(0.2, 1.0)]), 0.0);
}

#[test]
fn projected_gradient_oracle_on_a_closed_form() {
    let p = suite::projected_gradient(&[0.0, 1.0], 1.0);
    let e = (-1f64).exp();
    assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-10);
}
