//! Finite-difference gradient checks for every differentiable operation,
//! at 64-bit precision (rtol 1e-4, atol 1e-8, step 1e-6). The oracle
//! harness lives in `lumen_core::gradcheck`.

use lumen_core::gradcheck as gc;

#[test]
fn elementwise_binary_ops() {
    gc::check_elementwise_binary();
}

#[test]
fn elementwise_unary_ops() {
    gc::check_elementwise_unary();
}

#[test]
fn reductions_and_reshape() {
    gc::check_reductions();
}

#[test]
fn matvec_and_channel_ops() {
    gc::check_glue_ops();
}

#[test]
fn conv2d_variants() {
    gc::check_conv2d();
}

#[test]
fn pooling_and_upsampling() {
    gc::check_pool_and_upsample();
}

#[test]
fn batch_norm_both_modes() {
    gc::check_batch_norm();
}

#[test]
fn lstm_two_step_unroll() {
    gc::check_lstm_two_step();
}

#[test]
fn objective_gradients() {
    gc::check_objectives();
}

#[test]
fn composed_chain() {
    gc::check_composed_chain();
}

#[test]
fn enhancer_end_to_end() {
    gc::check_enhancer_end_to_end(false);
}

#[test]
fn enhancer_end_to_end_recurrent_two_steps() {
    gc::check_enhancer_end_to_end(true);
}
