//! Layer vocabulary: data-loading embeddings and variational templates.
//!
//! Variational templates are looked up by name in a process-wide registry,
//! so new templates can be added with [`register_template`] without touching
//! the circuit or search code. Templates emit gates whose angles are slot
//! indices into the op's own parameter vector.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{amplitude_encode, Gate, State};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LoadKind {
    AngleX,
    AngleY,
    AngleZ,
    Amplitude,
    IdentityLoad,
}

impl LoadKind {
    pub const ALL: [LoadKind; 5] = [
        LoadKind::AngleX,
        LoadKind::AngleY,
        LoadKind::AngleZ,
        LoadKind::Amplitude,
        LoadKind::IdentityLoad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoadKind::AngleX => "AngleX",
            LoadKind::AngleY => "AngleY",
            LoadKind::AngleZ => "AngleZ",
            LoadKind::Amplitude => "Amplitude",
            LoadKind::IdentityLoad => "IdentityLoad",
        }
    }

    pub fn is_angle(self) -> bool {
        matches!(self, LoadKind::AngleX | LoadKind::AngleY | LoadKind::AngleZ)
    }

    /// Largest input vector this load accepts on `n_qubits` qubits.
    pub fn capacity(self, n_qubits: usize) -> usize {
        match self {
            LoadKind::AngleX | LoadKind::AngleY | LoadKind::AngleZ => n_qubits,
            LoadKind::Amplitude => 1 << n_qubits,
            LoadKind::IdentityLoad => usize::MAX,
        }
    }
}

impl fmt::Display for LoadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown load op `{s}`")))
    }
}

/// Registry name of a variational template.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VarKind(Cow<'static, str>);

impl VarKind {
    /// BasicEntangler: RX on every qubit, then a CNOT ring.
    pub const BEL: VarKind = VarKind(Cow::Borrowed("BEL"));
    /// StronglyEntangling: ROT on every qubit, then a ranged CNOT ring.
    pub const SEL: VarKind = VarKind(Cow::Borrowed("SEL"));
    pub const SIMPLIFIED_TWO_DESIGN: VarKind = VarKind(Cow::Borrowed("SimplifiedTwoDesign"));
    pub const BELL_LAYER: VarKind = VarKind(Cow::Borrowed("BellLayer"));
    pub const IDENTITY: VarKind = VarKind(Cow::Borrowed("IdentityVar"));

    pub fn new(name: impl Into<String>) -> Self {
        VarKind(Cow::Owned(name.into()))
    }

    pub fn name(&self) -> &str {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0 == "IdentityVar"
    }
}

impl fmt::Display for VarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VarOpSpec {
    pub kind: VarKind,
    /// Repetition count; 0 for the identity op.
    pub layers: usize,
}

impl VarOpSpec {
    pub fn new(kind: VarKind, layers: usize) -> Self {
        VarOpSpec { kind, layers }
    }

    pub fn identity() -> Self {
        VarOpSpec {
            kind: VarKind::IDENTITY,
            layers: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind.is_identity()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_identity() {
            if self.layers != 0 {
                return Err(Error::validation("IdentityVar takes no repetition count"));
            }
            return Ok(());
        }
        if self.layers == 0 {
            return Err(Error::validation(format!("{} needs at least one layer", self.kind)));
        }
        template(self.kind.name())?;
        Ok(())
    }
}

impl fmt::Display for VarOpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_identity() {
            write!(f, "{}", self.kind)
        } else {
            write!(f, "{}({})", self.kind, self.layers)
        }
    }
}

/// A variational template. `gates` must consume every slot in
/// `0..param_count(layers, n_qubits)` exactly once.
pub trait VarTemplate: Send + Sync {
    fn name(&self) -> &str;

    fn param_count(&self, layers: usize, n_qubits: usize) -> usize;

    fn gates(&self, layers: usize, n_qubits: usize) -> Vec<Gate<usize>>;
}

/// CNOT ring used by BEL: none on one qubit, a single CNOT on two.
fn basic_ring(n: usize) -> Vec<Gate<usize>> {
    match n {
        0 | 1 => Vec::new(),
        2 => vec![Gate::CNOT { control: 0, target: 1 }],
        _ => (0..n)
            .map(|i| Gate::CNOT {
                control: i,
                target: (i + 1) % n,
            })
            .collect(),
    }
}

struct BasicEntangler;

impl VarTemplate for BasicEntangler {
    fn name(&self) -> &str {
        "BEL"
    }

    fn param_count(&self, layers: usize, n: usize) -> usize {
        layers * n
    }

    fn gates(&self, layers: usize, n: usize) -> Vec<Gate<usize>> {
        let mut out = Vec::new();
        for l in 0..layers {
            out.extend((0..n).map(|q| Gate::RX(q, l * n + q)));
            out.extend(basic_ring(n));
        }
        out
    }
}

struct StronglyEntangling;

impl VarTemplate for StronglyEntangling {
    fn name(&self) -> &str {
        "SEL"
    }

    fn param_count(&self, layers: usize, n: usize) -> usize {
        layers * n * 3
    }

    fn gates(&self, layers: usize, n: usize) -> Vec<Gate<usize>> {
        let mut out = Vec::new();
        for l in 0..layers {
            for q in 0..n {
                let base = (l * n + q) * 3;
                out.push(Gate::ROT(q, [base, base + 1, base + 2]));
            }
            if n > 1 {
                let range = 1 + l % (n - 1);
                out.extend((0..n).map(|i| Gate::CNOT {
                    control: i,
                    target: (i + range) % n,
                }));
            }
        }
        out
    }
}

struct SimplifiedTwoDesign;

impl VarTemplate for SimplifiedTwoDesign {
    fn name(&self) -> &str {
        "SimplifiedTwoDesign"
    }

    fn param_count(&self, layers: usize, n: usize) -> usize {
        if n < 2 {
            n
        } else {
            n + layers * (n - 1) * 2
        }
    }

    fn gates(&self, layers: usize, n: usize) -> Vec<Gate<usize>> {
        let mut out: Vec<Gate<usize>> = (0..n).map(|q| Gate::RY(q, q)).collect();
        if n < 2 {
            return out;
        }
        let mut slot = n;
        for _ in 0..layers {
            for start in [0, 1] {
                let mut a = start;
                while a + 1 < n {
                    out.push(Gate::CZ(a, a + 1));
                    out.push(Gate::RY(a, slot));
                    out.push(Gate::RY(a + 1, slot + 1));
                    slot += 2;
                    a += 2;
                }
            }
        }
        out
    }
}

/// Stand-in for the "BellmanLayer" template: Bell-pair preparation on
/// (0,1), (2,3), … followed by one RY per qubit. An odd trailing qubit only
/// gets its RY.
struct BellLayer;

impl VarTemplate for BellLayer {
    fn name(&self) -> &str {
        "BellLayer"
    }

    fn param_count(&self, layers: usize, n: usize) -> usize {
        layers * n
    }

    fn gates(&self, layers: usize, n: usize) -> Vec<Gate<usize>> {
        let mut out = Vec::new();
        for l in 0..layers {
            let mut a = 0;
            while a + 1 < n {
                out.push(Gate::H(a));
                out.push(Gate::CNOT { control: a, target: a + 1 });
                a += 2;
            }
            out.extend((0..n).map(|q| Gate::RY(q, l * n + q)));
        }
        out
    }
}

struct IdentityVar;

impl VarTemplate for IdentityVar {
    fn name(&self) -> &str {
        "IdentityVar"
    }

    fn param_count(&self, _layers: usize, _n: usize) -> usize {
        0
    }

    fn gates(&self, _layers: usize, _n: usize) -> Vec<Gate<usize>> {
        Vec::new()
    }
}

type Registry = BTreeMap<String, Arc<dyn VarTemplate>>;

fn registry() -> &'static RwLock<Registry> {
    static REGISTRY: OnceLock<RwLock<Registry>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let builtins: [Arc<dyn VarTemplate>; 5] = [
            Arc::new(BasicEntangler),
            Arc::new(StronglyEntangling),
            Arc::new(SimplifiedTwoDesign),
            Arc::new(BellLayer),
            Arc::new(IdentityVar),
        ];
        RwLock::new(builtins.into_iter().map(|t| (t.name().to_string(), t)).collect())
    })
}

/// Adds a template to the registry. Names must be unique and must not
/// collide with load-op names.
pub fn register_template(template: Arc<dyn VarTemplate>) -> Result<()> {
    let name = template.name().to_string();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(Error::validation(format!("invalid template name `{name}`")));
    }
    if name.parse::<LoadKind>().is_ok() {
        return Err(Error::validation(format!("`{name}` is a load op name")));
    }
    let mut reg = registry().write().expect("layer registry poisoned");
    if reg.contains_key(&name) {
        return Err(Error::validation(format!("template `{name}` already registered")));
    }
    reg.insert(name, template);
    Ok(())
}

pub fn template(name: &str) -> Result<Arc<dyn VarTemplate>> {
    registry()
        .read()
        .expect("layer registry poisoned")
        .get(name)
        .cloned()
        .ok_or_else(|| Error::validation(format!("unknown variational template `{name}`")))
}

pub fn template_names() -> Vec<String> {
    registry().read().expect("layer registry poisoned").keys().cloned().collect()
}

/// Trainable parameters consumed by a variational op on `n_qubits` qubits.
pub fn var_param_count(spec: &VarOpSpec, n_qubits: usize) -> Result<usize> {
    Ok(template(spec.kind.name())?.param_count(spec.layers, n_qubits))
}

/// Symbolic gate list of a variational op; angles are slots into its
/// parameter vector.
pub fn var_gates(spec: &VarOpSpec, n_qubits: usize) -> Result<Vec<Gate<usize>>> {
    spec.validate()?;
    Ok(template(spec.kind.name())?.gates(spec.layers, n_qubits))
}

/// Symbolic gate list of an angle load; angles are feature indices.
/// Qubits beyond the feature count receive no rotation.
pub fn load_gates(kind: LoadKind, n_features: usize, n_qubits: usize) -> Result<Vec<Gate<usize>>> {
    if kind.is_angle() && n_features > n_qubits {
        return Err(Error::validation(format!(
            "{kind} takes at most {n_qubits} features on {n_qubits} qubits, got {n_features}"
        )));
    }
    Ok(match kind {
        LoadKind::AngleX => (0..n_features).map(|i| Gate::RX(i, i)).collect(),
        LoadKind::AngleY => (0..n_features).map(|i| Gate::RY(i, i)).collect(),
        LoadKind::AngleZ => (0..n_features).map(|i| Gate::RZ(i, i)).collect(),
        LoadKind::Amplitude | LoadKind::IdentityLoad => Vec::new(),
    })
}

/// Uploads `features` into `state` with the given load op.
pub fn expand_load(kind: LoadKind, features: &[f64], state: &mut State) -> Result<()> {
    let n = state.n_qubits();
    match kind {
        LoadKind::IdentityLoad => Ok(()),
        LoadKind::Amplitude => {
            let fresh = state.amplitudes()[0] == 1.0.into()
                && state.amplitudes()[1..].iter().all(|a| *a == 0.0.into());
            if !fresh {
                return Err(Error::validation(
                    "Amplitude load must be the first operation on a fresh register",
                ));
            }
            *state = amplitude_encode(features, n)?;
            Ok(())
        }
        _ => {
            for g in load_gates(kind, features.len(), n)? {
                state.apply(&g.map_angles(|i| features[i]))?;
            }
            Ok(())
        }
    }
}

/// Applies a variational op with concrete parameters.
pub fn expand_var(spec: &VarOpSpec, params: &[f64], state: &mut State) -> Result<()> {
    let n = state.n_qubits();
    let want = var_param_count(spec, n)?;
    if params.len() != want {
        return Err(Error::validation(format!(
            "{spec} on {n} qubits takes {want} parameters, got {}",
            params.len()
        )));
    }
    for g in var_gates(spec, n)? {
        state.apply(&g.map_angles(|i| params[i]))?;
    }
    Ok(())
}

/// One QML block: a data (re-)uploading op followed by a variational op.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    pub load: LoadKind,
    pub var: VarOpSpec,
}

impl Block {
    pub fn new(load: LoadKind, var: VarOpSpec) -> Self {
        Block { load, var }
    }
}

/// Ordered list of QML blocks, written in text as ops separated by `>`,
/// e.g. `Amplitude > SEL(1) > AngleY > SEL(2)`.
///
/// Identity ops are omitted where that is unambiguous and spelled out as
/// `IdentityLoad` / `IdentityVar` otherwise, so rendering always parses
/// back to the same blocks.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Architecture(pub Vec<Block>);

impl Architecture {
    pub fn blocks(&self) -> &[Block] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn block_starts_with_load(b: &Block) -> bool {
    b.load != LoadKind::IdentityLoad || b.var.is_identity()
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut tokens: Vec<String> = Vec::new();
        for (i, b) in self.0.iter().enumerate() {
            let both_identity = b.load == LoadKind::IdentityLoad && b.var.is_identity();
            if b.load != LoadKind::IdentityLoad || both_identity {
                tokens.push(b.load.to_string());
            }
            let next_starts_with_load = self.0.get(i + 1).is_none_or(block_starts_with_load);
            let omit_var = b.var.is_identity() && b.load != LoadKind::IdentityLoad && next_starts_with_load;
            if !omit_var {
                tokens.push(b.var.to_string());
            }
        }
        f.write_str(&tokens.join(" > "))
    }
}

enum Token {
    Load(LoadKind),
    Var(VarOpSpec),
}

fn parse_token(raw: &str) -> Result<Token> {
    let tok = raw.trim();
    if let Ok(kind) = tok.parse::<LoadKind>() {
        return Ok(Token::Load(kind));
    }
    if tok == "IdentityVar" {
        return Ok(Token::Var(VarOpSpec::identity()));
    }
    let (name, layers) = match tok.split_once('(') {
        Some((name, rest)) => {
            let digits = rest
                .strip_suffix(')')
                .ok_or_else(|| Error::validation(format!("unbalanced parentheses in `{tok}`")))?;
            let layers: usize = digits
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("bad repetition count in `{tok}`")))?;
            (name.trim(), layers)
        }
        None => {
            return Err(Error::validation(format!(
                "`{tok}` is neither a load op nor a variational op with a repetition count"
            )))
        }
    };
    template(name)?;
    let spec = VarOpSpec::new(VarKind::new(name), layers);
    spec.validate()?;
    Ok(Token::Var(spec))
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Err(Error::validation("empty architecture"));
        }
        let tokens = s.split('>').map(parse_token).collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::new();
        let mut it = tokens.into_iter().peekable();
        while let Some(tok) = it.next() {
            match tok {
                Token::Load(load) => {
                    let var = match it.peek() {
                        Some(Token::Var(_)) => match it.next() {
                            Some(Token::Var(v)) => v,
                            _ => unreachable!(),
                        },
                        _ => VarOpSpec::identity(),
                    };
                    blocks.push(Block::new(load, var));
                }
                Token::Var(var) => blocks.push(Block::new(LoadKind::IdentityLoad, var)),
            }
        }
        Ok(Architecture(blocks))
    }
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
