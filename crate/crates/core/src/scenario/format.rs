//! On-disk scenario document. Field names follow the domain vocabulary;
//! every struct rejects unknown keys.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{DeathCause, Gradient, Lifetime};

pub const FORMAT_VERSION: u32 = 1;

/// A number, or a `$name` reference into the scenario's `parameters`.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Lit(f64),
    Param(String),
}

impl Value {
    pub fn lit(v: f64) -> Self {
        Value::Lit(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Lit(v)
    }
}

impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Lit(v) if v.fract() == 0.0 && v.abs() < 1e15 => s.serialize_i64(*v as i64),
            Value::Lit(v) => s.serialize_f64(*v),
            Value::Param(p) => s.serialize_str(&format!("${p}")),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Value::Lit(v)),
            Raw::Text(t) => match t.strip_prefix('$') {
                Some(name) if !name.is_empty() => Ok(Value::Param(name.to_string())),
                _ => Err(serde::de::Error::custom(format!(
                    "expected a number or a $parameter reference, got {t:?}"
                ))),
            },
        }
    }
}

fn one() -> Value {
    Value::Lit(1.0)
}
fn is_one(v: &Value) -> bool {
    *v == Value::Lit(1.0)
}
fn zero() -> Value {
    Value::Lit(0.0)
}
fn is_zero(v: &Value) -> bool {
    *v == Value::Lit(0.0)
}
fn is_false(b: &bool) -> bool {
    !*b
}
fn infinite() -> Lifetime {
    Lifetime::Infinite
}
fn is_infinite(l: &Lifetime) -> bool {
    *l == Lifetime::Infinite
}
fn unit_size() -> u32 {
    1
}
fn is_unit(v: &u32) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub epitopes: EpitopeSpec,
    #[serde(default)]
    pub affinity: Vec<AffinityEntry>,
    #[serde(default)]
    pub molecules: Vec<MoleculeSpec>,
    #[serde(default)]
    pub cells: Vec<CellSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mechanism_library: Vec<MechanismSpec>,
    pub compartments: Vec<CompartmentSpec>,
    #[serde(default)]
    pub transfers: Vec<TransferSpec>,
    #[serde(default)]
    pub schedule: Vec<ScheduledInjection>,
    pub run: RunSpec,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpitopeSpec {
    pub universe: u32,
    /// Optional readable names for fixed epitopes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub names: BTreeMap<String, u32>,
}

/// Either a raw id or a name from `epitopes.names`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpitopeRef {
    Id(u32),
    Name(String),
}

/// One epitope, a list, or a half-open id range `{"range": [low, high]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpitopeSet {
    One(EpitopeRef),
    List(Vec<EpitopeRef>),
    Range { range: [u32; 2] },
}

/// Every epitope in `a` pairs with every epitope in `b` at the given rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffinityEntry {
    pub a: EpitopeSet,
    pub b: EpitopeSet,
    pub bind: Value,
    pub unbind: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoleculeSpec {
    pub name: String,
    #[serde(default)]
    pub epitopes: Vec<EpitopeRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub binding_sites: Vec<Vec<EpitopeRef>>,
    #[serde(default = "infinite", skip_serializing_if = "is_infinite")]
    pub mean_lifetime: Lifetime,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fragments: Vec<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub presentation_slot: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub clonal_site: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSite {
    pub arity: usize,
    /// Draw range `[low, high)`; defaults to the whole universe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    #[serde(default = "infinite", skip_serializing_if = "is_infinite")]
    pub mean_lifetime: Lifetime,
    #[serde(default = "unit_size", skip_serializing_if = "is_unit")]
    pub size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_site: Option<RandomSite>,
    #[serde(default)]
    pub mechanisms: Vec<MechanismSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismSpec {
    pub name: String,
    #[serde(default)]
    pub conditions: Vec<ConditionSpec>,
    pub actions: Vec<ActionSpec>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub rate: Value,
    #[serde(default = "zero", skip_serializing_if = "is_zero")]
    pub delay: Value,
    /// Defaults to logging only mechanisms with at least one condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditionSpec {
    SurfaceComplex {
        pattern: String,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        threshold: Value,
        #[serde(default, skip_serializing_if = "is_false")]
        side_scoped: bool,
        #[serde(default, skip_serializing_if = "is_false")]
        negated: bool,
    },
    SurfaceCountAtLeast {
        pattern: String,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        threshold: Value,
        #[serde(default, skip_serializing_if = "is_false")]
        side_scoped: bool,
        #[serde(default, skip_serializing_if = "is_false")]
        negated: bool,
    },
    SurfaceCountAtMost {
        pattern: String,
        threshold: Value,
        #[serde(default, skip_serializing_if = "is_false")]
        side_scoped: bool,
        #[serde(default, skip_serializing_if = "is_false")]
        negated: bool,
    },
    ContactCellType {
        cell_type: String,
        #[serde(default, skip_serializing_if = "is_false")]
        side_scoped: bool,
        #[serde(default, skip_serializing_if = "is_false")]
        negated: bool,
    },
    SiteMoleculeAtLeast {
        molecule: String,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        threshold: Value,
        /// Also count the six neighbouring sites.
        #[serde(default, skip_serializing_if = "is_false")]
        neighborhood: bool,
        #[serde(default, skip_serializing_if = "is_false")]
        side_scoped: bool,
        #[serde(default, skip_serializing_if = "is_false")]
        negated: bool,
    },
}

impl ConditionSpec {
    pub fn side_scoped(&self) -> bool {
        match self {
            ConditionSpec::SurfaceComplex { side_scoped, .. }
            | ConditionSpec::SurfaceCountAtLeast { side_scoped, .. }
            | ConditionSpec::SurfaceCountAtMost { side_scoped, .. }
            | ConditionSpec::ContactCellType { side_scoped, .. }
            | ConditionSpec::SiteMoleculeAtLeast { side_scoped, .. } => *side_scoped,
        }
    }

    pub fn negated(&self) -> bool {
        match self {
            ConditionSpec::SurfaceComplex { negated, .. }
            | ConditionSpec::SurfaceCountAtLeast { negated, .. }
            | ConditionSpec::SurfaceCountAtMost { negated, .. }
            | ConditionSpec::ContactCellType { negated, .. }
            | ConditionSpec::SiteMoleculeAtLeast { negated, .. } => *negated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionSpec {
    Express {
        molecule: String,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        count: Value,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<Value>,
        #[serde(default, skip_serializing_if = "is_false")]
        each_side: bool,
    },
    Secrete {
        molecule: String,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        count: Value,
    },
    Ingest {
        pattern: String,
    },
    KillContact {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cell_type: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pattern: Option<String>,
    },
    MoveRandom {},
    MoveGradient {
        molecule: String,
        direction: Gradient,
    },
    Divide {},
    Differentiate {
        cell_type: String,
    },
    Die {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cause: Option<DeathCause>,
    },
    AddMechanism {
        mechanism: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    RemoveMechanism {
        mechanism: String,
    },
    Present {
        molecule: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<Value>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompartmentSpec {
    pub name: String,
    pub dims: [u32; 3],
    #[serde(default)]
    pub molecular_diffusion: BTreeMap<String, Value>,
    #[serde(default)]
    pub cellular_diffusion: BTreeMap<String, Value>,
    /// Agent name to mean number per site (cells: Bernoulli occupancy, molecules: Poisson).
    #[serde(default)]
    pub initial_concentrations: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    pub from: String,
    pub to: String,
    /// Cell type, cell label or molecule type name.
    pub agent: String,
    pub rate: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    Uniform {},
    Wall { axis: Axis, face: Face },
    Point { x: u32, y: u32, z: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectSpec {
    pub compartment: String,
    pub agent: String,
    pub placement: Placement,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledInjection {
    pub tick: u64,
    pub compartment: String,
    pub agent: String,
    pub placement: Placement,
    pub count: u64,
}

impl ScheduledInjection {
    pub fn inject_spec(&self) -> InjectSpec {
        InjectSpec {
            compartment: self.compartment.clone(),
            agent: self.agent.clone(),
            placement: self.placement.clone(),
            count: self.count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub ticks: u64,
    pub seed: u64,
    /// Record bind/unbind/decay events in the event log.
    #[serde(default, skip_serializing_if = "is_false")]
    pub log_bonds: bool,
}
