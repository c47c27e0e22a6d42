mod common;

use common::grad_suite;

#[test]
fn elementwise_and_broadcast_primitives() {
    grad_suite::elementwise(0).unwrap().assert_ok();
}

#[test]
fn matrix_and_normalization_primitives() {
    grad_suite::matrix_and_normalization(0).unwrap().assert_ok();
}

#[test]
fn shape_primitives() {
    grad_suite::shapes(0).unwrap().assert_ok();
}

#[test]
fn psd_mvdr_and_beamform_gradients() {
    grad_suite::beamformer_ops(0).unwrap().assert_ok();
}

#[test]
fn full_frontend_parameter_gradients() {
    grad_suite::frontend(0).unwrap().assert_ok();
}

#[test]
fn frontend_plus_backend_joint_loss_gradients() {
    grad_suite::composed(0).unwrap().assert_ok();
}

#[test]
fn single_channel_backend_joint_loss_gradients() {
    grad_suite::encoder_decoder(0).unwrap().assert_ok();
}

#[test]
fn groups_hold_across_seeds() {
    for seed in 1..3 {
        for (name, group) in grad_suite::GROUPS.iter().take(4) {
            let r = group(seed).unwrap();
            assert!(r.failures().is_empty(), "{name} seed {seed}: {:?}", r.failures());
        }
    }
}
