//! Statevector basics: build a Bell pair, rotate a qubit, read ⟨Z⟩ and
//! amplitude-encode a feature vector.

use std::f64::consts::PI;

use qfuse::sim::{amplitude_encode, Gate, State};

fn main() -> qfuse::Result<()> {
    let mut bell = State::new(2)?;
    bell.apply_all(&[Gate::H(0), Gate::CNOT { control: 0, target: 1 }])?;
    println!("Bell state amplitudes:");
    for (i, a) in bell.amplitudes().iter().enumerate() {
        println!("  |{i:02b}⟩  {:+.4} {:+.4}i", a.re, a.im);
    }
    println!("⟨Z⟩ per qubit: {:?}", bell.expval_z_all());

    let mut s = State::new(3)?;
    for (q, theta) in [(0, PI / 3.0), (1, PI / 2.0), (2, PI)] {
        s.apply(&Gate::RX(q, theta))?;
    }
    let z = s.expval_z_all();
    println!("RX(π/3, π/2, π) on |000⟩: ⟨Z⟩ = [{:.4}, {:.4}, {:.4}] (cos θ each)", z[0], z[1], z[2]);

    let encoded = amplitude_encode(&[3.0, 4.0, 0.0], 2)?;
    let amps: Vec<f64> = encoded.amplitudes().iter().map(|c| c.re).collect();
    println!("amplitude encoding of [3, 4, 0] on 2 qubits: {amps:?}");

    match amplitude_encode(&[0.0, 0.0], 1) {
        Err(e) => println!("zero vector: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
