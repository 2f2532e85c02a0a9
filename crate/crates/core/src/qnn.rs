//! Executable, differentiable PQC classifiers.
//!
//! A [`CircuitSpec`] is compiled once into a flat tape of primitive gates
//! whose angles point either into the variational parameter vector or into
//! the input vector. Every block re-uploads the same input. Gradients are
//! computed by adjoint differentiation: one forward pass, then a single
//! backward sweep that un-computes the state and the co-state together.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{load_gates, var_gates, var_param_count, Architecture, LoadKind};
use crate::sim::{amplitude_encode, Gate, Pauli, State, MAX_QUBITS};

/// Search-space bound on the number of QML blocks.
pub const MAX_BLOCKS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CircuitSpec {
    pub n_qubits: usize,
    pub architecture: Architecture,
}

impl CircuitSpec {
    pub fn new(n_qubits: usize, architecture: Architecture) -> Self {
        CircuitSpec {
            n_qubits,
            architecture,
        }
    }

    pub fn parse(n_qubits: usize, notation: &str) -> Result<Self> {
        let spec = CircuitSpec::new(n_qubits, notation.parse()?);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || self.n_qubits > MAX_QUBITS {
            return Err(Error::config(format!(
                "register size {} outside supported range 1..={MAX_QUBITS}",
                self.n_qubits
            )));
        }
        let blocks = self.architecture.blocks();
        if blocks.is_empty() || blocks.len() > MAX_BLOCKS {
            return Err(Error::validation(format!(
                "circuit has {} blocks; allowed range is 1..={MAX_BLOCKS}",
                blocks.len()
            )));
        }
        if blocks.iter().all(|b| b.load == LoadKind::IdentityLoad) {
            return Err(Error::validation(format!(
                "`{}` never loads the input; at least one block needs a non-identity load op",
                self.architecture
            )));
        }
        if let Some(i) = blocks.iter().skip(1).position(|b| b.load == LoadKind::Amplitude) {
            return Err(Error::validation(format!(
                "Amplitude load found in block {}; it is only allowed in block 0",
                i + 1
            )));
        }
        for b in blocks {
            b.var.validate()?;
        }
        Ok(())
    }

    /// Longest input vector every load op in the circuit can take.
    pub fn input_capacity(&self) -> usize {
        self.architecture
            .blocks()
            .iter()
            .map(|b| b.load.capacity(self.n_qubits))
            .min()
            .unwrap_or(usize::MAX)
    }

    pub fn param_count(&self) -> Result<usize> {
        self.architecture
            .blocks()
            .iter()
            .map(|b| var_param_count(&b.var, self.n_qubits))
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AngleRef {
    Param(usize),
    Input(usize),
}

/// A primitive tape entry: only RX/RY/RZ carry angles.
type TapeGate = Gate<AngleRef>;

/// A spec bound to a flat parameter layout and a compiled tape.
#[derive(Clone, Debug)]
pub struct PqcBinding {
    spec: CircuitSpec,
    offsets: Vec<usize>,
    total_params: usize,
    amplitude_first: bool,
    tape: Vec<TapeGate>,
}

/// Gradient of a scalar objective `Σ_q upstream_q·⟨Z_q⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct PqcVjp {
    pub outputs: Vec<f64>,
    pub d_params: Vec<f64>,
    pub d_input: Vec<f64>,
}

/// Full Jacobians of every ⟨Z_q⟩; rows are indexed by qubit.
#[derive(Clone, Debug, PartialEq)]
pub struct PqcJacobian {
    pub d_params: Array2<f64>,
    pub d_input: Array2<f64>,
}

fn push_primitive(tape: &mut Vec<TapeGate>, gate: Gate<AngleRef>) {
    match gate {
        // ROT(φ, θ, ω) = RZ(ω)·RY(θ)·RZ(φ): φ acts first
        Gate::ROT(q, [phi, theta, omega]) => {
            tape.push(Gate::RZ(q, phi));
            tape.push(Gate::RY(q, theta));
            tape.push(Gate::RZ(q, omega));
        }
        other => tape.push(other),
    }
}

/// Lays out parameters block by block and compiles the tape.
pub fn bind(spec: &CircuitSpec) -> Result<PqcBinding> {
    spec.validate()?;
    let n = spec.n_qubits;
    let mut offsets = Vec::with_capacity(spec.architecture.len());
    let mut tape = Vec::new();
    let mut offset = 0;
    for block in spec.architecture.blocks() {
        // angle loads are compiled at full width; rotations on features the
        // input does not have are skipped at run time
        for g in load_gates(block.load, if block.load.is_angle() { n } else { 0 }, n)? {
            push_primitive(&mut tape, g.map_angles(AngleRef::Input));
        }
        offsets.push(offset);
        for g in var_gates(&block.var, n)? {
            push_primitive(&mut tape, g.map_angles(|slot| AngleRef::Param(offset + slot)));
        }
        offset += var_param_count(&block.var, n)?;
    }
    Ok(PqcBinding {
        spec: spec.clone(),
        offsets,
        total_params: offset,
        amplitude_first: spec.architecture.blocks()[0].load == LoadKind::Amplitude,
        tape,
    })
}

impl PqcBinding {
    pub fn spec(&self) -> &CircuitSpec {
        &self.spec
    }

    pub fn n_qubits(&self) -> usize {
        self.spec.n_qubits
    }

    pub fn total_params(&self) -> usize {
        self.total_params
    }

    /// Offset of each block's parameters in the flat vector.
    pub fn param_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn check_input_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::validation("PQC input is empty"));
        }
        let cap = self.spec.input_capacity();
        if len > cap {
            return Err(Error::validation(format!(
                "input of length {len} exceeds the {cap}-feature capacity of `{}` on {} qubits",
                self.spec.architecture, self.spec.n_qubits
            )));
        }
        Ok(())
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        if params.len() != self.total_params {
            return Err(Error::validation(format!(
                "`{}` takes {} parameters, got {}",
                self.spec.architecture,
                self.total_params,
                params.len()
            )));
        }
        self.check_input_len(input.len())
    }

    fn resolve(gate: &TapeGate, params: &[f64], input: &[f64]) -> Option<Gate> {
        let mut skip = false;
        let g = gate.map_angles(|r| match r {
            AngleRef::Param(i) => params[i],
            AngleRef::Input(i) => input.get(i).copied().unwrap_or_else(|| {
                skip = true;
                0.0
            }),
        });
        (!skip).then_some(g)
    }

    fn initial_state(&self, input: &[f64]) -> Result<State> {
        if self.amplitude_first {
            amplitude_encode(input, self.spec.n_qubits)
        } else {
            State::new(self.spec.n_qubits)
        }
    }

    /// Final state before measurement.
    pub fn final_state(&self, params: &[f64], input: &[f64]) -> Result<State> {
        self.check(params, input)?;
        let mut state = self.initial_state(input)?;
        for g in &self.tape {
            if let Some(g) = Self::resolve(g, params, input) {
                state.apply_unchecked(&g);
            }
        }
        Ok(state)
    }

    /// `[⟨Z_0⟩, …, ⟨Z_{n−1}⟩]` after running every block on `input`.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.final_state(params, input)?.expval_z_all())
    }

    /// Vector-Jacobian product for the observable `Σ_q upstream_q·Z_q`.
    pub fn vjp(&self, params: &[f64], input: &[f64], upstream: &[f64]) -> Result<PqcVjp> {
        let n = self.spec.n_qubits;
        if upstream.len() != n {
            return Err(Error::validation(format!(
                "upstream gradient has length {}, expected {n}",
                upstream.len()
            )));
        }
        let psi = self.final_state(params, input)?;
        Ok(self.backprop(psi, params, input, upstream))
    }

    /// Adjoint sweep from an already computed final state.
    pub(crate) fn backprop(&self, mut psi: State, params: &[f64], input: &[f64], upstream: &[f64]) -> PqcVjp {
        let n = self.spec.n_qubits;
        let outputs = psi.expval_z_all();

        let mut lambda = psi.clone();
        for (i, a) in lambda.amplitudes_mut().iter_mut().enumerate() {
            let w: f64 = upstream
                .iter()
                .enumerate()
                .map(|(q, g)| if i & (1 << (n - 1 - q)) == 0 { *g } else { -*g })
                .sum();
            *a *= w;
        }

        let mut d_params = vec![0.0; self.total_params];
        let mut d_input = vec![0.0; input.len()];
        for tg in self.tape.iter().rev() {
            let Some(g) = Self::resolve(tg, params, input) else {
                continue;
            };
            let generator = match *tg {
                Gate::RX(q, r) => Some((Pauli::X, q, r)),
                Gate::RY(q, r) => Some((Pauli::Y, q, r)),
                Gate::RZ(q, r) => Some((Pauli::Z, q, r)),
                _ => None,
            };
            if let Some((p, q, r)) = generator {
                // d/dθ ⟨ψ|U†OU|ψ⟩ = Im⟨λ|P|ψ⟩ with both taken after the gate
                let d = lambda.pauli_element(p, q, &psi).im;
                match r {
                    AngleRef::Param(i) => d_params[i] += d,
                    AngleRef::Input(i) => d_input[i] += d,
                }
            }
            psi.apply_inverse_unchecked(&g);
            lambda.apply_inverse_unchecked(&g);
        }

        if self.amplitude_first {
            // ψ₀ = pad(x)/‖x‖ is real, so dE/dψ₀ⱼ = 2·Re λ₀ⱼ; chain through
            // the normalisation: dψⱼ/dxᵢ = (δᵢⱼ − ψᵢψⱼ)/‖x‖
            let norm = input.iter().map(|x| x * x).sum::<f64>().sqrt();
            let a: Vec<f64> = psi.amplitudes()[..input.len()].iter().map(|c| c.re).collect();
            let g: Vec<f64> = lambda.amplitudes()[..input.len()].iter().map(|c| 2.0 * c.re).collect();
            let ga: f64 = g.iter().zip(&a).map(|(g, a)| g * a).sum();
            for i in 0..input.len() {
                d_input[i] += (g[i] - a[i] * ga) / norm;
            }
        }

        PqcVjp {
            outputs,
            d_params,
            d_input,
        }
    }

    /// Exact Jacobians of every qubit expectation.
    pub fn jacobian(&self, params: &[f64], input: &[f64]) -> Result<PqcJacobian> {
        let n = self.spec.n_qubits;
        let mut d_params = Array2::zeros((n, self.total_params));
        let mut d_input = Array2::zeros((n, input.len()));
        let mut unit = vec![0.0; n];
        for q in 0..n {
            unit.iter_mut().for_each(|u| *u = 0.0);
            unit[q] = 1.0;
            let v = self.vjp(params, input, &unit)?;
            d_params.row_mut(q).assign(&ndarray::ArrayView1::from(&v.d_params));
            d_input.row_mut(q).assign(&ndarray::ArrayView1::from(&v.d_input));
        }
        Ok(PqcJacobian { d_params, d_input })
    }
}

/// Runs a bound circuit and returns per-qubit ⟨Z⟩.
pub fn pqc_forward(binding: &PqcBinding, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    binding.forward(params, input)
}

/// Jacobians of every output with respect to parameters and inputs.
pub fn pqc_gradients(binding: &PqcBinding, params: &[f64], input: &[f64]) -> Result<PqcJacobian> {
    binding.jacobian(params, input)
}
