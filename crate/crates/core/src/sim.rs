//! Dense statevector simulator.
//!
//! Qubit 0 is the most significant bit of the amplitude index, so on a
//! three-qubit register `|100⟩` lives at index 4. Rotations use the
//! half-angle convention `R_P(θ) = exp(-iθP/2)`.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Largest register the simulator will allocate.
pub const MAX_QUBITS: usize = 20;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateKind {
    RX,
    RY,
    RZ,
    ROT,
    CNOT,
    CZ,
    H,
}

impl GateKind {
    pub fn arity(self) -> usize {
        match self {
            GateKind::RX | GateKind::RY | GateKind::RZ => 1,
            GateKind::ROT => 3,
            GateKind::CNOT | GateKind::CZ | GateKind::H => 0,
        }
    }
}

/// A gate acting on explicit wires. The angle type is generic so that layer
/// templates can emit gates whose angles are parameter slots rather than
/// numbers; the simulator consumes `Gate<f64>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gate<A = f64> {
    RX(usize, A),
    RY(usize, A),
    RZ(usize, A),
    /// `ROT(φ, θ, ω) = RZ(ω)·RY(θ)·RZ(φ)`.
    ROT(usize, [A; 3]),
    CNOT { control: usize, target: usize },
    CZ(usize, usize),
    H(usize),
}

impl<A> Gate<A> {
    pub fn kind(&self) -> GateKind {
        match self {
            Gate::RX(..) => GateKind::RX,
            Gate::RY(..) => GateKind::RY,
            Gate::RZ(..) => GateKind::RZ,
            Gate::ROT(..) => GateKind::ROT,
            Gate::CNOT { .. } => GateKind::CNOT,
            Gate::CZ(..) => GateKind::CZ,
            Gate::H(..) => GateKind::H,
        }
    }

    pub fn wires(&self) -> Vec<usize> {
        match *self {
            Gate::RX(q, _) | Gate::RY(q, _) | Gate::RZ(q, _) | Gate::ROT(q, _) | Gate::H(q) => vec![q],
            Gate::CNOT { control, target } => vec![control, target],
            Gate::CZ(a, b) => vec![a, b],
        }
    }

    pub fn angles(&self) -> Vec<&A> {
        match self {
            Gate::RX(_, a) | Gate::RY(_, a) | Gate::RZ(_, a) => vec![a],
            Gate::ROT(_, [a, b, c]) => vec![a, b, c],
            _ => Vec::new(),
        }
    }

    /// Rewrites every angle, keeping kind and wires.
    pub fn map_angles<B>(self, mut f: impl FnMut(A) -> B) -> Gate<B> {
        match self {
            Gate::RX(q, a) => Gate::RX(q, f(a)),
            Gate::RY(q, a) => Gate::RY(q, f(a)),
            Gate::RZ(q, a) => Gate::RZ(q, f(a)),
            Gate::ROT(q, [a, b, c]) => {
                let (a, b, c) = (f(a), f(b), f(c));
                Gate::ROT(q, [a, b, c])
            }
            Gate::CNOT { control, target } => Gate::CNOT { control, target },
            Gate::CZ(a, b) => Gate::CZ(a, b),
            Gate::H(q) => Gate::H(q),
        }
    }

    /// Checks wire range and distinctness against a register size.
    pub fn check_wires(&self, n_qubits: usize) -> Result<()> {
        let wires = self.wires();
        for &w in &wires {
            if w >= n_qubits {
                return Err(Error::config(format!(
                    "{:?} wire {w} out of range for {n_qubits}-qubit register",
                    self.kind()
                )));
            }
        }
        if wires.len() == 2 && wires[0] == wires[1] {
            return Err(Error::config(format!(
                "{:?} requires distinct wires, got {} twice",
                self.kind(),
                wires[0]
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Gate<f64> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gate::RX(q, a) => write!(f, "RX({a})[{q}]"),
            Gate::RY(q, a) => write!(f, "RY({a})[{q}]"),
            Gate::RZ(q, a) => write!(f, "RZ({a})[{q}]"),
            Gate::ROT(q, [a, b, c]) => write!(f, "ROT({a}, {b}, {c})[{q}]"),
            Gate::CNOT { control, target } => write!(f, "CNOT[{control}, {target}]"),
            Gate::CZ(a, b) => write!(f, "CZ[{a}, {b}]"),
            Gate::H(q) => write!(f, "H[{q}]"),
        }
    }
}

/// Single-qubit Pauli used as a rotation generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pauli {
    X,
    Y,
    Z,
}

type Mat2 = [[C64; 2]; 2];

pub(crate) fn rx_matrix(theta: f64) -> Mat2 {
    let (s, c) = (theta / 2.0).sin_cos();
    [[C64::new(c, 0.0), C64::new(0.0, -s)], [C64::new(0.0, -s), C64::new(c, 0.0)]]
}

pub(crate) fn ry_matrix(theta: f64) -> Mat2 {
    let (s, c) = (theta / 2.0).sin_cos();
    [[C64::new(c, 0.0), C64::new(-s, 0.0)], [C64::new(s, 0.0), C64::new(c, 0.0)]]
}

pub(crate) fn rz_matrix(theta: f64) -> Mat2 {
    let (s, c) = (theta / 2.0).sin_cos();
    [[C64::new(c, -s), ZERO], [ZERO, C64::new(c, s)]]
}

fn h_matrix() -> Mat2 {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    [[C64::new(r, 0.0), C64::new(r, 0.0)], [C64::new(r, 0.0), C64::new(-r, 0.0)]]
}

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[ZERO; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub(crate) fn rot_matrix(phi: f64, theta: f64, omega: f64) -> Mat2 {
    mat_mul(&rz_matrix(omega), &mat_mul(&ry_matrix(theta), &rz_matrix(phi)))
}

/// Quantum register as a dense vector of `2^n` complex amplitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    n_qubits: usize,
    amplitudes: Vec<C64>,
}

impl State {
    /// `|0…0⟩` on `n_qubits` qubits.
    pub fn new(n_qubits: usize) -> Result<Self> {
        check_register(n_qubits)?;
        let mut amplitudes = vec![ZERO; 1 << n_qubits];
        amplitudes[0] = ONE;
        Ok(State {
            n_qubits,
            amplitudes,
        })
    }

    pub fn from_amplitudes(n_qubits: usize, amplitudes: Vec<C64>) -> Result<Self> {
        check_register(n_qubits)?;
        if amplitudes.len() != 1 << n_qubits {
            return Err(Error::config(format!(
                "{} amplitudes given for a {n_qubits}-qubit register (expected {})",
                amplitudes.len(),
                1usize << n_qubits
            )));
        }
        Ok(State {
            n_qubits,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &State) -> C64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    fn mask(&self, qubit: usize) -> usize {
        1 << (self.n_qubits - 1 - qubit)
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.n_qubits {
            return Err(Error::config(format!(
                "qubit {qubit} out of range for {}-qubit register",
                self.n_qubits
            )));
        }
        Ok(())
    }

    pub fn apply(&mut self, gate: &Gate) -> Result<()> {
        gate.check_wires(self.n_qubits)?;
        self.apply_unchecked(gate);
        Ok(())
    }

    pub fn apply_all<'a>(&mut self, gates: impl IntoIterator<Item = &'a Gate>) -> Result<()> {
        for g in gates {
            self.apply(g)?;
        }
        Ok(())
    }

    /// Applies a gate whose wires are already known to be valid.
    pub(crate) fn apply_unchecked(&mut self, gate: &Gate) {
        match *gate {
            Gate::RX(q, t) => self.apply_1q(q, &rx_matrix(t)),
            Gate::RY(q, t) => self.apply_1q(q, &ry_matrix(t)),
            Gate::RZ(q, t) => self.apply_rz(q, t),
            Gate::ROT(q, [phi, theta, omega]) => self.apply_1q(q, &rot_matrix(phi, theta, omega)),
            Gate::H(q) => self.apply_1q(q, &h_matrix()),
            Gate::CNOT { control, target } => self.apply_cnot(control, target),
            Gate::CZ(a, b) => self.apply_cz(a, b),
        }
    }

    /// Applies the inverse of a gate.
    pub(crate) fn apply_inverse_unchecked(&mut self, gate: &Gate) {
        match *gate {
            Gate::RX(q, t) => self.apply_1q(q, &rx_matrix(-t)),
            Gate::RY(q, t) => self.apply_1q(q, &ry_matrix(-t)),
            Gate::RZ(q, t) => self.apply_rz(q, -t),
            Gate::ROT(q, [phi, theta, omega]) => {
                self.apply_1q(q, &mat_mul(&rz_matrix(-phi), &mat_mul(&ry_matrix(-theta), &rz_matrix(-omega))))
            }
            Gate::H(_) | Gate::CNOT { .. } | Gate::CZ(..) => self.apply_unchecked(gate),
        }
    }

    fn apply_1q(&mut self, qubit: usize, m: &Mat2) {
        let stride = self.mask(qubit);
        let dim = self.amplitudes.len();
        let mut base = 0;
        while base < dim {
            for i in base..base + stride {
                let a = self.amplitudes[i];
                let b = self.amplitudes[i + stride];
                self.amplitudes[i] = m[0][0] * a + m[0][1] * b;
                self.amplitudes[i + stride] = m[1][0] * a + m[1][1] * b;
            }
            base += 2 * stride;
        }
    }

    fn apply_rz(&mut self, qubit: usize, theta: f64) {
        let mask = self.mask(qubit);
        let (s, c) = (theta / 2.0).sin_cos();
        let lo = C64::new(c, -s);
        let hi = C64::new(c, s);
        for (i, a) in self.amplitudes.iter_mut().enumerate() {
            *a *= if i & mask == 0 { lo } else { hi };
        }
    }

    fn apply_cnot(&mut self, control: usize, target: usize) {
        let cm = self.mask(control);
        let tm = self.mask(target);
        for i in 0..self.amplitudes.len() {
            if i & cm != 0 && i & tm == 0 {
                self.amplitudes.swap(i, i | tm);
            }
        }
    }

    fn apply_cz(&mut self, a: usize, b: usize) {
        let m = self.mask(a) | self.mask(b);
        for (i, amp) in self.amplitudes.iter_mut().enumerate() {
            if i & m == m {
                *amp = -*amp;
            }
        }
    }

    /// ⟨Z⟩ on one qubit: `1 − 2·P(qubit = 1)`.
    pub fn expval_z(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        let mask = self.mask(qubit);
        Ok(self
            .amplitudes
            .iter()
            .enumerate()
            .map(|(i, a)| if i & mask == 0 { a.norm_sqr() } else { -a.norm_sqr() })
            .sum())
    }

    /// ⟨Z_q⟩ for every qubit in one pass.
    pub fn expval_z_all(&self) -> Vec<f64> {
        let n = self.n_qubits;
        let mut out = vec![0.0; n];
        for (i, a) in self.amplitudes.iter().enumerate() {
            let p = a.norm_sqr();
            for (q, o) in out.iter_mut().enumerate() {
                if i & (1 << (n - 1 - q)) == 0 {
                    *o += p;
                } else {
                    *o -= p;
                }
            }
        }
        out
    }

    /// `⟨self| P_q |other⟩` for a single-qubit Pauli on `qubit`.
    pub(crate) fn pauli_element(&self, pauli: Pauli, qubit: usize, other: &State) -> C64 {
        let mask = self.mask(qubit);
        let bra = &self.amplitudes;
        let ket = &other.amplitudes;
        let mut acc = ZERO;
        match pauli {
            Pauli::Z => {
                for i in 0..bra.len() {
                    let t = bra[i].conj() * ket[i];
                    if i & mask == 0 {
                        acc += t;
                    } else {
                        acc -= t;
                    }
                }
            }
            Pauli::X => {
                for i in 0..bra.len() {
                    acc += bra[i].conj() * ket[i ^ mask];
                }
            }
            Pauli::Y => {
                // Y|0⟩ = i|1⟩, Y|1⟩ = −i|0⟩
                for i in 0..bra.len() {
                    let k = ket[i ^ mask];
                    let yk = if i & mask == 0 { C64::new(k.im, -k.re) } else { C64::new(-k.im, k.re) };
                    acc += bra[i].conj() * yk;
                }
            }
        }
        acc
    }
}

fn check_register(n_qubits: usize) -> Result<()> {
    if n_qubits == 0 || n_qubits > MAX_QUBITS {
        return Err(Error::config(format!(
            "register size {n_qubits} outside supported range 1..={MAX_QUBITS}"
        )));
    }
    Ok(())
}

const NORM_SLACK: f64 = 1e-12;

/// Writes a real feature vector into the amplitudes of a fresh register,
/// zero-padded to `2^n_qubits` and divided by its Euclidean norm.
pub fn amplitude_encode(features: &[f64], n_qubits: usize) -> Result<State> {
    check_register(n_qubits)?;
    let dim = 1usize << n_qubits;
    if features.is_empty() || features.len() > dim {
        return Err(Error::config(format!(
            "amplitude encoding takes 1..={dim} features on {n_qubits} qubits, got {}",
            features.len()
        )));
    }
    let norm = features.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Encoding(format!(
            "cannot amplitude-encode a feature vector with norm {norm}"
        )));
    }
    // already-normalized input is stored verbatim so re-encoding is exact
    let norm = if (norm - 1.0).abs() <= NORM_SLACK { 1.0 } else { norm };
    let mut amplitudes = vec![ZERO; dim];
    for (a, &x) in amplitudes.iter_mut().zip(features) {
        *a = C64::new(x / norm, 0.0);
    }
    Ok(State {
        n_qubits,
        amplitudes,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn close(a: C64, b: C64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn new_state_is_ground() {
        let s = State::new(1).unwrap();
        assert_eq!(s.amplitudes(), &[ONE, ZERO]);
        let s = State::new(3).unwrap();
        assert_eq!(s.amplitudes().len(), 8);
        assert_eq!(s.amplitudes()[0], ONE);
        assert!(State::new(0).is_err());
        assert!(State::new(MAX_QUBITS + 1).is_err());
    }

    #[test]
    fn rx_zero_is_identity() {
        let mut s = amplitude_encode(&[0.3, -0.1, 0.7, 0.2], 2).unwrap();
        let before = s.clone();
        s.apply(&Gate::RX(1, 0.0)).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn rx_pi_flips() {
        let mut s = State::new(1).unwrap();
        s.apply(&Gate::RX(0, PI)).unwrap();
        assert!(close(s.amplitudes()[0], ZERO));
        assert!(close(s.amplitudes()[1], C64::new(0.0, -1.0)));
        assert!((s.expval_z(0).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cnot_on_10() {
        let mut s = State::new(2).unwrap();
        s.apply(&Gate::RX(0, PI)).unwrap();
        s.apply(&Gate::CNOT { control: 0, target: 1 }).unwrap();
        // |11⟩ up to the global phase picked up from RX(π)
        assert!((s.amplitudes()[3].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_wires_rejected() {
        let mut s = State::new(2).unwrap();
        assert!(matches!(s.apply(&Gate::RX(2, 0.1)), Err(Error::Config(_))));
        assert!(s.apply(&Gate::CZ(1, 1)).is_err());
        assert!(s.expval_z(5).is_err());
    }

    #[test]
    fn expval_basis_and_superposition() {
        let mut s = State::new(1).unwrap();
        assert_eq!(s.expval_z(0).unwrap(), 1.0);
        s.apply(&Gate::RY(0, PI / 2.0)).unwrap();
        assert!(s.expval_z(0).unwrap().abs() < 1e-10);
        let one = State::from_amplitudes(1, vec![ZERO, ONE]).unwrap();
        assert_eq!(one.expval_z(0).unwrap(), -1.0);
    }

    #[test]
    fn amplitude_encoding_examples() {
        let s = amplitude_encode(&[1.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(s.amplitudes()[0], ONE);
        let s = amplitude_encode(&[1.0, 1.0], 1).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!(close(s.amplitudes()[0], C64::new(r, 0.0)));
        assert!(close(s.amplitudes()[1], C64::new(r, 0.0)));
        let s = amplitude_encode(&[3.0, 4.0], 2).unwrap();
        let want = [0.6, 0.8, 0.0, 0.0];
        for (a, w) in s.amplitudes().iter().zip(want) {
            assert!(close(*a, C64::new(w, 0.0)));
        }
        assert!(matches!(amplitude_encode(&[0.0, 0.0], 1), Err(Error::Encoding(_))));
        assert!(matches!(amplitude_encode(&[1.0; 5], 2), Err(Error::Config(_))));
    }

    #[test]
    fn reencoding_is_exact() {
        let s = amplitude_encode(&[0.2, -1.5, 3.0], 2).unwrap();
        let re: Vec<f64> = s.amplitudes().iter().map(|a| a.re).collect();
        let again = amplitude_encode(&re, 2).unwrap();
        let re2: Vec<f64> = again.amplitudes().iter().map(|a| a.re).collect();
        for (a, b) in re.iter().zip(&re2) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn inverse_undoes_gate() {
        let gates = [
            Gate::RX(0, 0.4),
            Gate::RY(1, -1.2),
            Gate::RZ(2, 2.2),
            Gate::ROT(1, [0.3, 0.7, -0.2]),
            Gate::H(0),
            Gate::CNOT { control: 2, target: 0 },
            Gate::CZ(0, 1),
        ];
        let start = amplitude_encode(&[0.1, 0.5, -0.3, 0.2, 0.9, 0.0, 0.4, -0.6], 3).unwrap();
        for g in &gates {
            let mut s = start.clone();
            s.apply(g).unwrap();
            s.apply_inverse_unchecked(g);
            for (a, b) in s.amplitudes().iter().zip(start.amplitudes()) {
                assert!(close(*a, *b), "{g}");
            }
        }
    }

    #[test]
    fn pauli_elements_match_explicit_application() {
        let a = amplitude_encode(&[0.1, 0.5, -0.3, 0.2], 2).unwrap();
        let mut b = a.clone();
        b.apply(&Gate::ROT(0, [0.3, 1.1, -0.4])).unwrap();
        b.apply(&Gate::ROT(1, [1.3, 0.2, 0.9])).unwrap();
        // ⟨a|X_q|b⟩ via RX(π) = −iX, RY(π) = −iY, RZ(π) = −iZ
        for q in 0..2 {
            for (p, g) in [(Pauli::X, Gate::RX(q, PI)), (Pauli::Y, Gate::RY(q, PI)), (Pauli::Z, Gate::RZ(q, PI))] {
                let mut pb = b.clone();
                pb.apply(&g).unwrap();
                let want = a.inner(&pb) * C64::new(0.0, 1.0);
                assert!(close(a.pauli_element(p, q, &b), want), "{p:?} on {q}");
            }
        }
    }
}
