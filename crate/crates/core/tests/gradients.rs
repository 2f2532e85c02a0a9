//! Adjoint gradients against central finite differences: every variational
//! template under every load op, and the whole extractor → head → loss chain.

mod common;

use common::*;

#[test]
fn template_gradients_match_finite_differences() {
    let worst = check_template_gradients(GRADIENT_INSTANCES, 2024).unwrap();
    println!("worst relative error over {GRADIENT_INSTANCES} circuits: {worst:e}");
}

#[test]
fn fusion_chain_gradients_match_finite_differences() {
    let worst = check_fusion_gradients(GRADIENT_INSTANCES, 99).unwrap();
    println!("worst relative error over {GRADIENT_INSTANCES} fusion models: {worst:e}");
}
