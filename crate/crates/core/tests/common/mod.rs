//! Independent oracles shared by the integration tests and the acceptance
//! run: dense unitaries built from Kronecker products and central finite
//! differences.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64 as C;
use qfuse::fusion::{FusionModel, HeadTopology, ModelTopology};
use qfuse::layers::{Architecture, Block, LoadKind, VarKind, VarOpSpec};
use qfuse::qnn::{bind, pqc_forward, pqc_gradients, CircuitSpec};
use qfuse::sim::{Gate, State};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_TOL: f64 = 1e-10;

pub fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

pub fn m2(a: [[C; 2]; 2]) -> DMatrix<C> {
    DMatrix::from_row_slice(2, 2, &[a[0][0], a[0][1], a[1][0], a[1][1]])
}

pub fn rx(t: f64) -> DMatrix<C> {
    let (s, co) = (t / 2.0).sin_cos();
    m2([[c(co, 0.0), c(0.0, -s)], [c(0.0, -s), c(co, 0.0)]])
}

pub fn ry(t: f64) -> DMatrix<C> {
    let (s, co) = (t / 2.0).sin_cos();
    m2([[c(co, 0.0), c(-s, 0.0)], [c(s, 0.0), c(co, 0.0)]])
}

pub fn rz(t: f64) -> DMatrix<C> {
    m2([[C::from_polar(1.0, -t / 2.0), c(0.0, 0.0)], [c(0.0, 0.0), C::from_polar(1.0, t / 2.0)]])
}

pub fn hadamard() -> DMatrix<C> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    m2([[c(h, 0.0), c(h, 0.0)], [c(h, 0.0), c(-h, 0.0)]])
}

pub fn pauli_x() -> DMatrix<C> {
    m2([[c(0.0, 0.0), c(1.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]])
}

pub fn pauli_z() -> DMatrix<C> {
    m2([[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(-1.0, 0.0)]])
}

pub fn proj(bit: usize) -> DMatrix<C> {
    let mut p = DMatrix::zeros(2, 2);
    p[(bit, bit)] = c(1.0, 0.0);
    p
}

/// `⊗_q op_q` with identities on unlisted qubits; qubit 0 is leftmost.
pub fn embed(n: usize, ops: &[(usize, DMatrix<C>)]) -> DMatrix<C> {
    let mut out = DMatrix::from_element(1, 1, c(1.0, 0.0));
    for q in 0..n {
        let factor = ops
            .iter()
            .find(|(w, _)| *w == q)
            .map(|(_, m)| m.clone())
            .unwrap_or_else(|| DMatrix::identity(2, 2));
        out = out.kronecker(&factor);
    }
    out
}

pub fn dense(n: usize, gate: &Gate) -> DMatrix<C> {
    match *gate {
        Gate::RX(q, t) => embed(n, &[(q, rx(t))]),
        Gate::RY(q, t) => embed(n, &[(q, ry(t))]),
        Gate::RZ(q, t) => embed(n, &[(q, rz(t))]),
        Gate::ROT(q, [phi, theta, omega]) => embed(n, &[(q, rz(omega) * ry(theta) * rz(phi))]),
        Gate::H(q) => embed(n, &[(q, hadamard())]),
        Gate::CNOT { control, target } => {
            embed(n, &[(control, proj(0))]) + embed(n, &[(control, proj(1)), (target, pauli_x())])
        }
        Gate::CZ(a, b) => {
            let dim = 1 << n;
            DMatrix::identity(dim, dim) - embed(n, &[(a, proj(1)), (b, proj(1))]) * c(2.0, 0.0)
        }
    }
}

pub fn expval_z(n: usize, psi: &DVector<C>, q: usize) -> f64 {
    (psi.adjoint() * embed(n, &[(q, pauli_z())]) * psi)[(0, 0)].re
}

pub fn random_gate(n: usize, rng: &mut ChaCha8Rng) -> Gate {
    let q = rng.gen_range(0..n);
    let kind = if n == 1 { rng.gen_range(0..5) } else { rng.gen_range(0..7) };
    let mut angle = || rng.gen_range(-2.0 * std::f64::consts::PI..2.0 * std::f64::consts::PI);
    match kind {
        0 => Gate::RX(q, angle()),
        1 => Gate::RY(q, angle()),
        2 => Gate::RZ(q, angle()),
        3 => Gate::ROT(q, [angle(), angle(), angle()]),
        4 => Gate::H(q),
        k => {
            let other = (q + rng.gen_range(1..n)) % n;
            if k == 5 {
                Gate::CNOT { control: q, target: other }
            } else {
                Gate::CZ(q, other)
            }
        }
    }
}

pub fn random_state(n: usize, rng: &mut ChaCha8Rng) -> Vec<C> {
    let v: Vec<C> = (0..1 << n).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let norm = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / norm).collect()
}

/// Runs `count` random circuits (≤4 qubits, ≤20 gates) against the dense
/// oracle; returns the largest amplitude deviation.
pub fn check_random_circuits(count: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..count {
        let n = rng.gen_range(1..=4);
        let n_gates = rng.gen_range(0..=20);
        let gates: Vec<Gate> = (0..n_gates).map(|_| random_gate(n, &mut rng)).collect();
        let init = if trial % 2 == 0 {
            let mut v = vec![c(0.0, 0.0); 1 << n];
            v[0] = c(1.0, 0.0);
            v
        } else {
            random_state(n, &mut rng)
        };

        let mut state = State::from_amplitudes(n, init.clone()).unwrap();
        state.apply_all(&gates).unwrap();

        let dim = 1 << n;
        let unitary = gates.iter().fold(DMatrix::identity(dim, dim), |u, g| dense(n, g) * u);
        let expected = &unitary * DVector::from_vec(init);
        let unitarity = (unitary.adjoint() * &unitary - DMatrix::identity(dim, dim)).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if unitarity >= ORACLE_TOL {
            return Err(format!("trial {trial}: oracle not unitary ({unitarity:e})"));
        }
        for (i, (got, want)) in state.amplitudes().iter().zip(expected.iter()).enumerate() {
            let dev = (got - want).norm();
            if dev >= ORACLE_TOL {
                return Err(format!("trial {trial}, amplitude {i}: {got} vs {want} for {gates:?}"));
            }
            worst = worst.max(dev);
        }
    }
    Ok(worst)
}

pub const GRADIENT_INSTANCES: usize = 200;
const STEP: f64 = 1e-5;
pub const GRADIENT_REL_TOL: f64 = 1e-5;

/// `‖a − b‖₂ / ‖b‖₂`. The denominator is floored at 1e-4 so gradients that
/// vanish analytically are compared against finite-difference rounding noise
/// (about 1e-11) absolutely.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-4)
}

pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Array2<f64> {
    let n_out = f(x).len();
    let mut jac = Array2::zeros((n_out, x.len()));
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe);
        probe[i] = x[i] - STEP;
        let down = f(&probe);
        probe[i] = x[i];
        for q in 0..n_out {
            jac[[q, i]] = (up[q] - down[q]) / (2.0 * STEP);
        }
    }
    jac
}

const TEMPLATES: [VarKind; 4] = [VarKind::BEL, VarKind::SEL, VarKind::SIMPLIFIED_TWO_DESIGN, VarKind::BELL_LAYER];
const ANGLE_LOADS: [LoadKind; 4] = [LoadKind::AngleX, LoadKind::AngleY, LoadKind::AngleZ, LoadKind::IdentityLoad];

pub fn random_circuit(n_qubits: usize, template: &VarKind, rng: &mut ChaCha8Rng) -> CircuitSpec {
    let n_blocks = rng.gen_range(1..=3);
    let blocks = (0..n_blocks)
        .map(|b| {
            let load = if b == 0 && rng.gen_bool(0.3) {
                LoadKind::Amplitude
            } else if b == 0 {
                ANGLE_LOADS[rng.gen_range(0..3)]
            } else {
                ANGLE_LOADS[rng.gen_range(0..4)]
            };
            let var = if rng.gen_bool(0.15) {
                VarOpSpec::identity()
            } else {
                VarOpSpec::new(template.clone(), rng.gen_range(1..=3))
            };
            Block::new(load, var)
        })
        .collect();
    let spec = CircuitSpec::new(n_qubits, Architecture(blocks));
    spec.validate().unwrap();
    spec
}

/// Jacobians of random circuits, one template per instance in turn; returns
/// the worst relative error.
pub fn check_template_gradients(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let template = &TEMPLATES[instance % TEMPLATES.len()];
        let n = rng.gen_range(1..=4);
        let spec = random_circuit(n, template, &mut rng);
        let binding = bind(&spec).unwrap();
        let params: Vec<f64> = (0..binding.total_params()).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let len = rng.gen_range(1..=spec.input_capacity());
        let input: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect();

        let jac = pqc_gradients(&binding, &params, &input).unwrap();
        let fd_params = central_diff(&params, |p| pqc_forward(&binding, p, &input).unwrap());
        let fd_input = central_diff(&input, |x| pqc_forward(&binding, &params, x).unwrap());
        let errs = [
            rel_err(jac.d_params.as_slice().unwrap(), fd_params.as_slice().unwrap()),
            rel_err(jac.d_input.as_slice().unwrap(), fd_input.as_slice().unwrap()),
        ];

        let upstream: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vjp = binding.vjp(&params, &input, &upstream).unwrap();
        let up = ndarray::Array1::from(upstream);
        let vjp_err = rel_err(&vjp.d_params, up.dot(&jac.d_params).as_slice().unwrap())
            .max(rel_err(&vjp.d_input, up.dot(&jac.d_input).as_slice().unwrap()));

        for e in errs.into_iter().chain([vjp_err]) {
            if e >= GRADIENT_REL_TOL {
                return Err(format!("instance {instance}: `{}` on {n} qubits, relative error {e:e}", spec.architecture));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

pub fn random_topology(instance: usize, rng: &mut ChaCha8Rng) -> (ModelTopology, usize, usize, Option<usize>) {
    let dual = rng.gen_bool(0.5);
    let n_sources = if dual { 2 } else { 1 };
    let d_top = rng.gen_range(2..=5);
    let d_bottom = dual.then(|| rng.gen_range(2..=5));
    let n_qubits = rng.gen_range(2..=4);
    let head_kind = instance % 3;
    let amplitude = head_kind != 0 && rng.gen_bool(0.4);
    let template = &TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
    let mut spec = random_circuit(n_qubits, template, rng);
    spec.architecture.0[0].load = if amplitude { LoadKind::Amplitude } else { ANGLE_LOADS[rng.gen_range(0..3)] };
    let fused_cap = spec.input_capacity();
    let per_source = (fused_cap / n_sources).clamp(1, 3);
    let extractors: Vec<Vec<usize>> = [Some(d_top), d_bottom]
        .into_iter()
        .flatten()
        .map(|d| {
            let out = rng.gen_range(1..=per_source);
            if rng.gen_bool(0.5) {
                vec![d, rng.gen_range(2..=6), out]
            } else {
                vec![d, out]
            }
        })
        .collect();
    let head = match head_kind {
        0 => HeadTopology::Mlp {
            hidden: if rng.gen_bool(0.5) { vec![rng.gen_range(2..=5)] } else { vec![] },
        },
        1 => HeadTopology::PqcSolo { circuit: spec },
        _ => HeadTopology::PqcLinear { circuit: spec },
    };
    let max_classes = if head_kind == 1 { n_qubits.min(3) } else { 3 };
    let n_classes = rng.gen_range(2..=max_classes);
    (ModelTopology { extractors, head }, n_classes, d_top, d_bottom)
}

/// Loss gradients of random fusion models over every head; returns the
/// worst relative error.
pub fn check_fusion_gradients(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let (topology, n_classes, d_top, d_bottom) = random_topology(instance, &mut rng);
        let model = FusionModel::init(&topology, n_classes, &mut rng).unwrap();
        let batch = rng.gen_range(1..=4);
        let x_top = Array2::from_shape_fn((batch, d_top), |_| rng.gen_range(-1.0..1.0));
        let x_bottom = d_bottom.map(|d| Array2::from_shape_fn((batch, d), |_| rng.gen_range(-1.0..1.0)));
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n_classes)).collect();

        let (_, grad) = model.loss_and_grad(x_top.view(), x_bottom.as_ref().map(|x| x.view()), &labels).unwrap();
        let params = model.params();
        let mut probe = model.clone();
        let fd = central_diff(&params, |p| {
            probe.set_params(p).unwrap();
            let (loss, _) = probe
                .loss_and_grad(x_top.view(), x_bottom.as_ref().map(|x| x.view()), &labels)
                .unwrap();
            vec![loss]
        });
        let e = rel_err(&grad, fd.as_slice().unwrap());
        if e >= GRADIENT_REL_TOL {
            return Err(format!(
                "instance {instance}: {} head, {:?}, relative error {e:e}",
                model.head_kind().name(),
                model.architecture()
            ));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}
