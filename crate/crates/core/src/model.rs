//! Domain vocabulary shared by the whole engine: epitopes, the affinity
//! relation, molecule and cell types, and the condition/action language
//! that cellular mechanisms are written in.
//!
//! Everything here is the *compiled* form of a scenario: names have been
//! resolved to dense indices and parameter references to numbers. The
//! name-based, serializable form lives in [`crate::scenario`].

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

/// Errors raised by model-level operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("epitope {id} outside universe of size {universe}")]
    EpitopeOutOfUniverse { id: u32, universe: u32 },
    #[error("binding site of arity {site} cannot be matched against {targets} target epitopes")]
    ArityMismatch { site: usize, targets: usize },
    #[error("binding site arity must be 1 or 2, got {0}")]
    BadArity(usize),
    #[error("epitope universe is empty")]
    EmptyUniverse,
    #[error("probability {value} for {what} is outside [0, 1]")]
    Probability { what: String, value: f64 },
    #[error("complex is not connected")]
    Disconnected,
    #[error("complex has no members")]
    EmptyComplex,
}

/// Integer label of a binding surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Epitope(pub u32);

impl fmt::Display for Epitope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// Per-tick Bernoulli rates for one unordered epitope pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRates {
    pub bind: f64,
    pub unbind: f64,
}

/// The symmetric relation of which epitope pairs can bind.
///
/// Stored both as an ordered map (for serialization and iteration) and as
/// a dense `U x U` lookup (for the chemistry hot path).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityTable {
    universe: u32,
    pairs: BTreeMap<(u32, u32), PairRates>,
    dense: Vec<Option<PairRates>>,
}

impl AffinityTable {
    pub fn new(universe: u32) -> Result<Self, ModelError> {
        if universe == 0 {
            return Err(ModelError::EmptyUniverse);
        }
        Ok(Self {
            universe,
            pairs: BTreeMap::new(),
            dense: vec![None; (universe as usize) * (universe as usize)],
        })
    }

    pub fn universe(&self) -> u32 {
        self.universe
    }

    fn check(&self, e: Epitope) -> Result<(), ModelError> {
        if e.0 >= self.universe {
            Err(ModelError::EpitopeOutOfUniverse {
                id: e.0,
                universe: self.universe,
            })
        } else {
            Ok(())
        }
    }

    /// Inserts (or replaces) the unordered pair `{a, b}`.
    pub fn insert(&mut self, a: Epitope, b: Epitope, rates: PairRates) -> Result<(), ModelError> {
        self.check(a)?;
        self.check(b)?;
        for (what, value) in [("bind", rates.bind), ("unbind", rates.unbind)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ModelError::Probability {
                    what: format!("{what} of pair ({}, {})", a.0, b.0),
                    value,
                });
            }
        }
        let key = (a.0.min(b.0), a.0.max(b.0));
        self.pairs.insert(key, rates);
        let u = self.universe as usize;
        self.dense[a.0 as usize * u + b.0 as usize] = Some(rates);
        self.dense[b.0 as usize * u + a.0 as usize] = Some(rates);
        Ok(())
    }

    /// Rates for the pair, if it can bind. Ids outside the universe never bind.
    #[inline]
    pub fn rates(&self, a: Epitope, b: Epitope) -> Option<PairRates> {
        let u = self.universe as usize;
        if a.0 as usize >= u || b.0 as usize >= u {
            return None;
        }
        self.dense[a.0 as usize * u + b.0 as usize]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (Epitope, Epitope, PairRates)> + '_ {
        self.pairs
            .iter()
            .map(|(&(a, b), &r)| (Epitope(a), Epitope(b), r))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `true` iff `{a, b}` is listed in the table.
pub fn epitope_can_bind(table: &AffinityTable, a: Epitope, b: Epitope) -> Result<bool, ModelError> {
    table.check(a)?;
    table.check(b)?;
    Ok(table.rates(a, b).is_some())
}

/// An ordered list of one or two epitopes that must all match positionally.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BindingSite(pub SmallVec<[Epitope; 2]>);

impl BindingSite {
    pub fn new(epitopes: &[Epitope]) -> Result<Self, ModelError> {
        if !(1..=2).contains(&epitopes.len()) {
            return Err(ModelError::BadArity(epitopes.len()));
        }
        Ok(Self(epitopes.iter().copied().collect()))
    }

    pub fn epitopes(&self) -> &[Epitope] {
        &self.0
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }
}

/// `true` iff every positional pair of `site` and `targets` binds.
pub fn site_binds_target(
    table: &AffinityTable,
    site: &BindingSite,
    targets: &[Epitope],
) -> Result<bool, ModelError> {
    if site.arity() != targets.len() {
        return Err(ModelError::ArityMismatch {
            site: site.arity(),
            targets: targets.len(),
        });
    }
    for (&s, &t) in site.epitopes().iter().zip(targets) {
        if !epitope_can_bind(table, s, t)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Combined rates of a multi-epitope surface contact. Every positional
/// contact must form for the bond to form, and the bond breaks as soon as
/// any contact breaks.
pub fn surface_rates(table: &AffinityTable, a: &[Epitope], b: &[Epitope]) -> Option<PairRates> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let mut bind = 1.0;
    let mut hold = 1.0;
    for (&x, &y) in a.iter().zip(b) {
        let r = table.rates(x, y)?;
        bind *= r.bind;
        hold *= 1.0 - r.unbind;
    }
    Some(PairRates {
        bind,
        unbind: 1.0 - hold,
    })
}

/// Draws a binding site uniformly (with replacement) from `[0, universe)`.
pub fn sample_random_binding_site<R: Rng + ?Sized>(
    rng: &mut R,
    universe: u32,
    arity: usize,
) -> Result<BindingSite, ModelError> {
    sample_random_binding_site_in(rng, 0..universe, arity)
}

/// Like [`sample_random_binding_site`] but over an explicit id range.
pub fn sample_random_binding_site_in<R: Rng + ?Sized>(
    rng: &mut R,
    range: std::ops::Range<u32>,
    arity: usize,
) -> Result<BindingSite, ModelError> {
    if range.is_empty() {
        return Err(ModelError::EmptyUniverse);
    }
    if !(1..=2).contains(&arity) {
        return Err(ModelError::BadArity(arity));
    }
    let eps: SmallVec<[Epitope; 2]> = (0..arity)
        .map(|_| Epitope(rng.random_range(range.clone())))
        .collect();
    Ok(BindingSite(eps))
}

/// Mean lifetime in ticks; `Infinite` never decays or dies naturally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lifetime {
    Finite(f64),
    Infinite,
}

impl Lifetime {
    /// Per-tick hazard `1 / mean`.
    #[inline]
    pub fn hazard(self) -> f64 {
        match self {
            Lifetime::Finite(m) => (1.0 / m).min(1.0),
            Lifetime::Infinite => 0.0,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Lifetime::Finite(_))
    }
}

impl Serialize for Lifetime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Lifetime::Finite(v) => s.serialize_f64(*v),
            Lifetime::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Lifetime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Lifetime::Finite(v)),
            Raw::Text(t) if t == "inf" || t == "infinite" => Ok(Lifetime::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "lifetime must be a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

macro_rules! index_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u16);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

index_type!(
    /// Index of a molecule type within a compiled model.
    MoleculeTypeId
);
index_type!(
    /// Index of a cell type within a compiled model.
    CellTypeId
);
index_type!(
    /// Index of a display label (cell type names plus infection-style relabels).
    LabelId
);
index_type!(
    /// Index of a compartment.
    CompartmentId
);

/// Index of a mechanism in the model's global mechanism table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MechanismId(pub u32);

#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeType {
    pub name: String,
    pub epitopes: Vec<Epitope>,
    pub binding_sites: Vec<BindingSite>,
    pub mean_lifetime: Lifetime,
    pub fragments: Vec<MoleculeTypeId>,
    /// Carries one presented foreign epitope next to its own first epitope.
    pub presentation_slot: bool,
    /// Gains an extra binding site made of the producing cell's random epitopes.
    pub clonal_site: bool,
}

/// A canonical complex pattern: member molecule types as a sorted multiset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pattern(pub SmallVec<[MoleculeTypeId; 4]>);

impl Pattern {
    pub fn new(mut members: SmallVec<[MoleculeTypeId; 4]>, names: &[MoleculeType]) -> Self {
        members.sort_by(|a, b| names[a.index()].name.cmp(&names[b.index()].name));
        Pattern(members)
    }

    pub fn matches(&self, sorted_members: &[MoleculeTypeId]) -> bool {
        self.0.as_slice() == sorted_members
    }
}

/// Canonical label of a complex: member type names sorted and joined by `:`.
///
/// `bonds` are pairs of member indices; the bond graph must be connected.
pub fn complex_pattern(members: &[&str], bonds: &[(usize, usize)]) -> Result<String, ModelError> {
    if members.is_empty() {
        return Err(ModelError::EmptyComplex);
    }
    let mut parent: Vec<usize> = (0..members.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in bonds {
        if a >= members.len() || b >= members.len() {
            return Err(ModelError::Disconnected);
        }
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let root = find(&mut parent, 0);
    if (0..members.len()).any(|i| find(&mut parent, i) != root) {
        return Err(ModelError::Disconnected);
    }
    let mut names: Vec<&str> = members.to_vec();
    names.sort_unstable();
    Ok(names.join(":"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gradient {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConditionKind {
    /// Some side carries at least `threshold` complexes with this pattern.
    SurfaceComplex { pattern: Pattern, threshold: u32 },
    /// Total complexes with this pattern (whole membrane, or the scoped side) ≥ threshold.
    SurfaceCountAtLeast { pattern: Pattern, threshold: u32 },
    /// Total complexes with this pattern ≤ threshold.
    SurfaceCountAtMost { pattern: Pattern, threshold: u32 },
    /// Some 6-neighbour holds a cell of this type.
    ContactCellType { cell_type: CellTypeId },
    /// Free soluble count of the molecule type at the cell's own site
    /// (plus its six neighbours when `neighborhood`) ≥ threshold.
    SiteMoleculeAtLeast {
        molecule: MoleculeTypeId,
        threshold: u32,
        neighborhood: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub kind: ConditionKind,
    pub side_scoped: bool,
    pub negated: bool,
}

impl Condition {
    pub fn reads_surface(&self) -> bool {
        matches!(
            self.kind,
            ConditionKind::SurfaceComplex { .. }
                | ConditionKind::SurfaceCountAtLeast { .. }
                | ConditionKind::SurfaceCountAtMost { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeathCause {
    Killed,
    Suicide,
    Natural,
    Burst,
}

impl DeathCause {
    pub fn as_str(self) -> &'static str {
        match self {
            DeathCause::Killed => "killed",
            DeathCause::Suicide => "suicide",
            DeathCause::Natural => "natural",
            DeathCause::Burst => "burst",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KillTarget {
    CellType(CellTypeId),
    Pattern(Pattern),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Express {
        molecule: MoleculeTypeId,
        count: u32,
        limit: Option<u32>,
        each_side: bool,
    },
    Secrete {
        molecule: MoleculeTypeId,
        count: u32,
    },
    Ingest {
        pattern: Pattern,
    },
    KillContact {
        target: KillTarget,
    },
    MoveRandom,
    MoveGradient {
        molecule: MoleculeTypeId,
        direction: Gradient,
    },
    Divide,
    Differentiate {
        cell_type: CellTypeId,
    },
    Die {
        cause: DeathCause,
    },
    AddMechanism {
        mechanism: MechanismId,
        label: Option<LabelId>,
    },
    /// Drops every instance mechanism with this name.
    RemoveMechanism {
        name: String,
    },
    Present {
        molecule: MoleculeTypeId,
        limit: Option<u32>,
    },
}

/// Action kinds as they appear in logs and tick reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Express,
    Secrete,
    Ingest,
    KillContact,
    MoveRandom,
    MoveGradient,
    Divide,
    Differentiate,
    Die,
    AddMechanism,
    RemoveMechanism,
    Present,
}

impl ActionKind {
    pub const ALL: [ActionKind; 12] = [
        ActionKind::Express,
        ActionKind::Secrete,
        ActionKind::Ingest,
        ActionKind::KillContact,
        ActionKind::MoveRandom,
        ActionKind::MoveGradient,
        ActionKind::Divide,
        ActionKind::Differentiate,
        ActionKind::Die,
        ActionKind::AddMechanism,
        ActionKind::RemoveMechanism,
        ActionKind::Present,
    ];

    /// Short verb used in event labels such as `TK.kill`.
    pub fn verb(self) -> &'static str {
        match self {
            ActionKind::Express => "express",
            ActionKind::Secrete => "secrete",
            ActionKind::Ingest => "ingest",
            ActionKind::KillContact => "kill",
            ActionKind::MoveRandom => "move",
            ActionKind::MoveGradient => "move_gradient",
            ActionKind::Divide => "divide",
            ActionKind::Differentiate => "differentiate",
            ActionKind::Die => "die",
            ActionKind::AddMechanism => "add_mechanism",
            ActionKind::RemoveMechanism => "remove_mechanism",
            ActionKind::Present => "present",
        }
    }
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Express { .. } => ActionKind::Express,
            Action::Secrete { .. } => ActionKind::Secrete,
            Action::Ingest { .. } => ActionKind::Ingest,
            Action::KillContact { .. } => ActionKind::KillContact,
            Action::MoveRandom => ActionKind::MoveRandom,
            Action::MoveGradient { .. } => ActionKind::MoveGradient,
            Action::Divide => ActionKind::Divide,
            Action::Differentiate { .. } => ActionKind::Differentiate,
            Action::Die { .. } => ActionKind::Die,
            Action::AddMechanism { .. } => ActionKind::AddMechanism,
            Action::RemoveMechanism { .. } => ActionKind::RemoveMechanism,
            Action::Present { .. } => ActionKind::Present,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism {
    pub name: String,
    /// Empty means constitutive.
    pub conditions: Vec<Condition>,
    pub actions: Vec<Action>,
    /// Probability of firing in a tick where all conditions hold.
    pub rate: f64,
    /// Ticks the mechanism must have been held before it can fire.
    pub delay: u64,
    /// Whether executed actions go to the event log.
    pub logged: bool,
}

impl Mechanism {
    pub fn is_constitutive(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn reads_surface(&self) -> bool {
        self.conditions.iter().any(Condition::reads_surface)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomSiteSpec {
    pub arity: usize,
    pub low: u32,
    pub high: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellType {
    pub name: String,
    pub label: LabelId,
    pub mechanisms: Vec<MechanismId>,
    pub mean_lifetime: Lifetime,
    pub size: u32,
    pub random_site: Option<RandomSiteSpec>,
}
