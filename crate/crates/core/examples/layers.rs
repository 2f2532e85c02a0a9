//! Variational templates and the block notation: parameter counts, gate
//! listings, notation parsing and registering a custom template.

use std::sync::Arc;

use qfuse::layers::{register_template, template_names, var_gates, var_param_count, VarKind, VarOpSpec, VarTemplate};
use qfuse::qnn::CircuitSpec;
use qfuse::sim::Gate;

/// One RY per qubit and layer, no entanglement.
struct RyOnly;

impl VarTemplate for RyOnly {
    fn name(&self) -> &str {
        "RyOnly"
    }

    fn param_count(&self, layers: usize, n_qubits: usize) -> usize {
        layers * n_qubits
    }

    fn gates(&self, layers: usize, n_qubits: usize) -> Vec<Gate<usize>> {
        (0..layers * n_qubits).map(|slot| Gate::RY(slot % n_qubits, slot)).collect()
    }
}

fn main() -> qfuse::Result<()> {
    for (kind, layers) in [
        (VarKind::BEL, 3),
        (VarKind::SEL, 3),
        (VarKind::SIMPLIFIED_TWO_DESIGN, 2),
        (VarKind::BELL_LAYER, 1),
    ] {
        let spec = VarOpSpec::new(kind, layers);
        println!("{spec:<24} on 6 qubits: {:>3} parameters", var_param_count(&spec, 6)?);
    }

    println!("\nBEL(1) on 3 qubits:");
    for g in var_gates(&VarOpSpec::new(VarKind::BEL, 1), 3)? {
        println!("  {}", g.map_angles(|slot| slot as f64));
    }

    for notation in ["AngleX > BEL(3)", "Amplitude > SEL(1) > AngleY > SimplifiedTwoDesign(2)", "Amplitude > BEL(1)"] {
        let spec = CircuitSpec::parse(8, notation)?;
        println!("{:<52} {:>3} parameters, input capacity {}", spec.architecture.to_string(), spec.param_count()?, spec.input_capacity());
    }
    if let Err(e) = CircuitSpec::parse(4, "AngleX > BEL(1) > Amplitude > BEL(1)") {
        println!("rejected: {e}");
    }

    register_template(Arc::new(RyOnly))?;
    let spec = CircuitSpec::parse(4, "AngleX > RyOnly(2)")?;
    println!("\ncustom template: `{}` has {} parameters", spec.architecture, spec.param_count()?);
    println!("registered templates: {}", template_names().join(", "));
    Ok(())
}
