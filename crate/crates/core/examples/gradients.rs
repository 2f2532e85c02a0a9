//! Adjoint gradients of a bound circuit checked against central finite
//! differences, for both trainable angles and data inputs.

use qfuse::qnn::{bind, pqc_forward, pqc_gradients, CircuitSpec};

fn main() -> qfuse::Result<()> {
    let spec = CircuitSpec::parse(3, "AngleX > SEL(1) > AngleY > BEL(2)")?;
    let binding = bind(&spec)?;
    let params: Vec<f64> = (0..binding.total_params()).map(|i| 0.3 + 0.17 * i as f64).collect();
    let input = [0.4, -1.1, 0.9];

    let jac = pqc_gradients(&binding, &params, &input)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let (mut up, mut down) = (params.clone(), params.clone());
        up[i] += h;
        down[i] -= h;
        let (fu, fd) = (pqc_forward(&binding, &up, &input)?, pqc_forward(&binding, &down, &input)?);
        for q in 0..3 {
            worst = worst.max(((fu[q] - fd[q]) / (2.0 * h) - jac.d_params[[q, i]]).abs());
        }
    }
    for i in 0..input.len() {
        let (mut up, mut down) = (input, input);
        up[i] += h;
        down[i] -= h;
        let (fu, fd) = (pqc_forward(&binding, &params, &up)?, pqc_forward(&binding, &params, &down)?);
        for q in 0..3 {
            worst = worst.max(((fu[q] - fd[q]) / (2.0 * h) - jac.d_input[[q, i]]).abs());
        }
    }
    println!("`{}`: {} parameters", spec.architecture, binding.total_params());
    println!("⟨Z⟩ = {:?}", pqc_forward(&binding, &params, &input)?);
    println!("d⟨Z_0⟩/dθ = {:?}", jac.d_params.row(0).to_vec());
    println!("largest |adjoint − finite difference| = {worst:.2e}");
    Ok(())
}
