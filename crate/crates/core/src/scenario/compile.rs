//! Name resolution: turns a [`Scenario`] document into the indexed [`Model`]
//! the engine runs, collecting every problem instead of stopping at the first.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use smallvec::SmallVec;

use super::format::*;
use super::ValidationReport;
use crate::model::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentRef {
    Molecule(MoleculeTypeId),
    Cell(CellTypeId),
}

/// What a transfer rule lets through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentFilter {
    Molecule(MoleculeTypeId),
    CellType(CellTypeId),
    Label(LabelId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompartmentModel {
    pub name: String,
    pub dims: [u32; 3],
    /// Hop probability per molecule type.
    pub molecular_diffusion: Vec<f64>,
    /// Hop probability per cell type.
    pub cellular_diffusion: Vec<f64>,
    pub initial_molecules: Vec<(MoleculeTypeId, f64)>,
    pub initial_cells: Vec<(CellTypeId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub from: CompartmentId,
    pub to: CompartmentId,
    pub agent: AgentFilter,
    pub rate: f64,
}

/// A resolved injection request.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub compartment: CompartmentId,
    pub agent: AgentRef,
    pub placement: Placement,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub affinity: AffinityTable,
    pub molecules: Vec<MoleculeType>,
    pub cell_types: Vec<CellType>,
    pub mechanisms: Vec<Mechanism>,
    /// Display labels; the first `cell_types.len()` are the type names.
    pub labels: Vec<String>,
    pub compartments: Vec<CompartmentModel>,
    pub transfers: Vec<Transfer>,
    pub schedule: Vec<(u64, Injection)>,
    pub ticks: u64,
    pub seed: u64,
    pub log_bonds: bool,
    pub parameters: BTreeMap<String, f64>,
    library: BTreeMap<String, MechanismId>,
}

impl Model {
    pub fn molecule(&self, name: &str) -> Option<MoleculeTypeId> {
        self.molecules
            .iter()
            .position(|m| m.name == name)
            .map(|i| MoleculeTypeId(i as u16))
    }

    pub fn cell_type(&self, name: &str) -> Option<CellTypeId> {
        self.cell_types
            .iter()
            .position(|c| c.name == name)
            .map(|i| CellTypeId(i as u16))
    }

    pub fn label(&self, name: &str) -> Option<LabelId> {
        self.labels
            .iter()
            .position(|l| l == name)
            .map(|i| LabelId(i as u16))
    }

    pub fn compartment(&self, name: &str) -> Option<CompartmentId> {
        self.compartments
            .iter()
            .position(|c| c.name == name)
            .map(|i| CompartmentId(i as u16))
    }

    pub fn library_mechanism(&self, name: &str) -> Option<MechanismId> {
        self.library.get(name).copied()
    }

    pub fn agent(&self, name: &str) -> Option<AgentRef> {
        self.molecule(name)
            .map(AgentRef::Molecule)
            .or_else(|| self.cell_type(name).map(AgentRef::Cell))
    }

    pub fn agent_name(&self, a: AgentRef) -> &str {
        match a {
            AgentRef::Molecule(m) => &self.molecules[m.index()].name,
            AgentRef::Cell(c) => &self.cell_types[c.index()].name,
        }
    }

    /// Resolves a live or scheduled injection request against this model.
    pub fn resolve_injection(&self, spec: &InjectSpec) -> Result<Injection, String> {
        let compartment = self
            .compartment(&spec.compartment)
            .ok_or_else(|| format!("unknown compartment {:?}", spec.compartment))?;
        let agent = self
            .agent(&spec.agent)
            .ok_or_else(|| format!("unknown agent type {:?}", spec.agent))?;
        if spec.count == 0 {
            return Err("injection count must be at least 1".into());
        }
        if let Placement::Point { x, y, z } = spec.placement {
            let d = self.compartments[compartment.index()].dims;
            if x >= d[0] || y >= d[1] || z >= d[2] {
                return Err(format!(
                    "point ({x}, {y}, {z}) outside compartment {:?} of dims {:?}",
                    spec.compartment, d
                ));
            }
        }
        Ok(Injection {
            compartment,
            agent,
            placement: spec.placement.clone(),
            count: spec.count,
        })
    }
}

struct Ctx<'a> {
    sc: &'a Scenario,
    report: ValidationReport,
    used_params: BTreeSet<String>,
}

impl<'a> Ctx<'a> {
    fn err(&mut self, msg: impl Into<String>) {
        self.report.errors.push(msg.into());
    }

    fn warn(&mut self, msg: impl Into<String>) {
        self.report.warnings.push(msg.into());
    }

    fn value(&mut self, v: &Value, what: &str) -> f64 {
        match v {
            Value::Lit(x) => *x,
            Value::Param(p) => {
                self.used_params.insert(p.clone());
                match self.sc.parameters.get(p) {
                    Some(x) => *x,
                    None => {
                        self.err(format!("{what} references undeclared parameter \"${p}\""));
                        0.0
                    }
                }
            }
        }
    }

    fn prob(&mut self, v: &Value, what: &str) -> f64 {
        let x = self.value(v, what);
        if !(0.0..=1.0).contains(&x) {
            self.err(format!("{what} = {x} is outside [0, 1]"));
        }
        x.clamp(0.0, 1.0)
    }

    fn count(&mut self, v: &Value, what: &str, min: u32) -> u32 {
        let x = self.value(v, what);
        if x.fract() != 0.0 || x < min as f64 || x > u32::MAX as f64 {
            self.err(format!("{what} = {x} must be an integer ≥ {min}"));
            return min;
        }
        x as u32
    }

    fn epitope(&mut self, r: &EpitopeRef, what: &str) -> Epitope {
        let u = self.sc.epitopes.universe;
        match r {
            EpitopeRef::Id(id) => {
                if *id >= u {
                    self.err(format!("{what}: epitope {id} outside universe of size {u}"));
                }
                Epitope(*id)
            }
            EpitopeRef::Name(n) => match self.sc.epitopes.names.get(n) {
                Some(&id) => Epitope(id),
                None => {
                    self.err(format!("{what} references undeclared epitope \"{n}\""));
                    Epitope(0)
                }
            },
        }
    }

    fn epitope_set(&mut self, s: &EpitopeSet, what: &str) -> Vec<Epitope> {
        match s {
            EpitopeSet::One(r) => vec![self.epitope(r, what)],
            EpitopeSet::List(v) => v.iter().map(|r| self.epitope(r, what)).collect(),
            EpitopeSet::Range { range: [lo, hi] } => {
                let u = self.sc.epitopes.universe;
                if lo >= hi || *hi > u {
                    self.err(format!("{what}: epitope range [{lo}, {hi}) is empty or exceeds universe {u}"));
                    return Vec::new();
                }
                (*lo..*hi).map(Epitope).collect()
            }
        }
    }

    fn lifetime(&mut self, l: Lifetime, what: &str) -> Lifetime {
        if let Lifetime::Finite(m) = l {
            if !(m > 0.0) || !m.is_finite() {
                self.err(format!("{what}: mean_lifetime must be > 0, got {m}"));
                return Lifetime::Infinite;
            }
        }
        l
    }
}

struct Names {
    molecules: HashMap<String, MoleculeTypeId>,
    cells: HashMap<String, CellTypeId>,
}

impl Names {
    fn molecule(&self, ctx: &mut Ctx, name: &str, owner: &str) -> Option<MoleculeTypeId> {
        let id = self.molecules.get(name).copied();
        if id.is_none() {
            ctx.err(format!("{owner} references undeclared molecule \"{name}\""));
        }
        id
    }

    fn cell(&self, ctx: &mut Ctx, name: &str, owner: &str) -> Option<CellTypeId> {
        let id = self.cells.get(name).copied();
        if id.is_none() {
            ctx.err(format!("{owner} references undeclared cell type \"{name}\""));
        }
        id
    }

    fn pattern(&self, ctx: &mut Ctx, text: &str, owner: &str, mols: &[MoleculeType]) -> Option<Pattern> {
        let mut members: SmallVec<[MoleculeTypeId; 4]> = SmallVec::new();
        let mut ok = true;
        if text.trim().is_empty() {
            ctx.err(format!("{owner}: empty complex pattern"));
            return None;
        }
        for part in text.split(':') {
            match self.molecule(ctx, part.trim(), &format!("{owner} (pattern \"{text}\")")) {
                Some(m) => members.push(m),
                None => ok = false,
            }
        }
        ok.then(|| Pattern::new(members, mols))
    }
}

/// Compiles a document, returning the model only when the report has no errors.
pub fn compile(sc: &Scenario) -> (Option<Model>, ValidationReport) {
    let mut ctx = Ctx {
        sc,
        report: ValidationReport::default(),
        used_params: BTreeSet::new(),
    };
    if sc.format_version != FORMAT_VERSION {
        ctx.err(format!(
            "unsupported format_version {} (this build reads version {FORMAT_VERSION})",
            sc.format_version
        ));
    }
    let universe = sc.epitopes.universe;
    if universe == 0 {
        ctx.err("epitope universe must be at least 1");
    }
    for (n, &id) in &sc.epitopes.names {
        if id >= universe {
            ctx.err(format!("epitope name \"{n}\" maps to {id}, outside universe {universe}"));
        }
    }
    let mut affinity = AffinityTable::new(universe.max(1)).expect("non-empty");
    for (i, row) in sc.affinity.iter().enumerate() {
        let what = format!("affinity row {i}");
        let a = ctx.epitope_set(&row.a, &what);
        let b = ctx.epitope_set(&row.b, &what);
        let bind = ctx.prob(&row.bind, &format!("{what} bind"));
        let unbind = ctx.prob(&row.unbind, &format!("{what} unbind"));
        for &x in &a {
            for &y in &b {
                if x.0 < universe && y.0 < universe {
                    affinity.insert(x, y, PairRates { bind, unbind }).expect("checked");
                }
            }
        }
    }

    // names
    let mut names = Names {
        molecules: HashMap::new(),
        cells: HashMap::new(),
    };
    for (i, m) in sc.molecules.iter().enumerate() {
        if names.molecules.insert(m.name.clone(), MoleculeTypeId(i as u16)).is_some() {
            ctx.err(format!("molecule \"{}\" declared twice", m.name));
        }
        if m.name.contains(':') || m.name.is_empty() {
            ctx.err(format!("molecule name \"{}\" must be non-empty and free of ':'", m.name));
        }
    }
    for (i, c) in sc.cells.iter().enumerate() {
        if names.cells.insert(c.name.clone(), CellTypeId(i as u16)).is_some() {
            ctx.err(format!("cell type \"{}\" declared twice", c.name));
        }
        if names.molecules.contains_key(&c.name) {
            ctx.err(format!("\"{}\" is declared both as a molecule and a cell type", c.name));
        }
    }

    // molecules
    let mut molecules = Vec::with_capacity(sc.molecules.len());
    for m in &sc.molecules {
        let owner = format!("molecule \"{}\"", m.name);
        let epitopes: Vec<Epitope> = m.epitopes.iter().map(|e| ctx.epitope(e, &owner)).collect();
        let mut binding_sites = Vec::new();
        for s in &m.binding_sites {
            let eps: Vec<Epitope> = s.iter().map(|e| ctx.epitope(e, &owner)).collect();
            match BindingSite::new(&eps) {
                Ok(b) => binding_sites.push(b),
                Err(e) => ctx.err(format!("{owner}: {e}")),
            }
        }
        let mean_lifetime = ctx.lifetime(m.mean_lifetime, &owner);
        let mut fragments = Vec::new();
        for f in &m.fragments {
            if let Some(id) = names.molecule(&mut ctx, f, &format!("{owner} (fragments)")) {
                fragments.push(id);
            }
        }
        if m.presentation_slot && epitopes.is_empty() {
            ctx.err(format!("{owner}: a presentation slot needs at least one own epitope"));
        }
        let slots = epitopes.len()
            + binding_sites.iter().map(BindingSite::arity).sum::<usize>()
            + if m.presentation_slot { 1 } else { 0 }
            + if m.clonal_site { 2 } else { 0 };
        if slots > 16 {
            ctx.err(format!("{owner}: at most 16 epitope slots per molecule, got {slots}"));
        }
        molecules.push(MoleculeType {
            name: m.name.clone(),
            epitopes,
            binding_sites,
            mean_lifetime,
            fragments,
            presentation_slot: m.presentation_slot,
            clonal_site: m.clonal_site,
        });
    }

    // labels: type names first, then relabels
    let mut labels: Vec<String> = sc.cells.iter().map(|c| c.name.clone()).collect();
    let all_mech_specs = sc
        .cells
        .iter()
        .flat_map(|c| c.mechanisms.iter())
        .chain(sc.mechanism_library.iter());
    for m in all_mech_specs {
        for a in &m.actions {
            if let ActionSpec::AddMechanism { label: Some(l), .. } = a {
                if !labels.contains(l) {
                    if names.molecules.contains_key(l) {
                        ctx.err(format!("label \"{l}\" collides with a molecule name"));
                    }
                    labels.push(l.clone());
                }
            }
        }
    }

    // mechanisms: library first so add_mechanism can point at stable ids
    let mut library = BTreeMap::new();
    for (i, m) in sc.mechanism_library.iter().enumerate() {
        if library.insert(m.name.clone(), MechanismId(i as u32)).is_some() {
            ctx.err(format!("library mechanism \"{}\" declared twice", m.name));
        }
    }
    let mut mechanism_names: BTreeSet<&str> = sc.mechanism_library.iter().map(|m| m.name.as_str()).collect();
    for c in &sc.cells {
        for m in &c.mechanisms {
            mechanism_names.insert(&m.name);
        }
    }
    let mut mechanisms = Vec::new();
    for m in &sc.mechanism_library {
        let owner = format!("library mechanism \"{}\"", m.name);
        let mech = compile_mechanism(&mut ctx, &names, &molecules, &library, &mechanism_names, &labels, m, &owner, None);
        mechanisms.push(mech);
    }
    let mut cell_types = Vec::new();
    for (ci, c) in sc.cells.iter().enumerate() {
        let owner = format!("cell type \"{}\"", c.name);
        let mean_lifetime = ctx.lifetime(c.mean_lifetime, &owner);
        if c.size != 1 {
            ctx.err(format!("{owner}: size must be 1, got {}", c.size));
        }
        let random_site = c.random_site.as_ref().map(|r| {
            let low = r.low.unwrap_or(0);
            let high = r.high.unwrap_or(universe);
            if !(1..=2).contains(&r.arity) {
                ctx.err(format!("{owner}: random_site arity must be 1 or 2, got {}", r.arity));
            }
            if low >= high || high > universe {
                ctx.err(format!("{owner}: random_site range [{low}, {high}) is empty or exceeds universe {universe}"));
            }
            RandomSiteSpec {
                arity: r.arity,
                low,
                high,
            }
        });
        let mut seen = BTreeSet::new();
        let mut ids = Vec::new();
        for m in &c.mechanisms {
            if !seen.insert(m.name.as_str()) {
                ctx.err(format!("{owner}: mechanism \"{}\" declared twice", m.name));
            }
            let mowner = format!("mechanism \"{}\" of cell type \"{}\"", m.name, c.name);
            let mech = compile_mechanism(
                &mut ctx,
                &names,
                &molecules,
                &library,
                &mechanism_names,
                &labels,
                m,
                &mowner,
                Some(c),
            );
            ids.push(MechanismId(mechanisms.len() as u32));
            mechanisms.push(mech);
        }
        cell_types.push(CellType {
            name: c.name.clone(),
            label: LabelId(ci as u16),
            mechanisms: ids,
            mean_lifetime,
            size: 1,
            random_site,
        });
    }

    // compartments
    let mut compartments = Vec::new();
    let mut comp_names = HashMap::new();
    for (i, c) in sc.compartments.iter().enumerate() {
        let owner = format!("compartment \"{}\"", c.name);
        if comp_names.insert(c.name.clone(), CompartmentId(i as u16)).is_some() {
            ctx.err(format!("{owner} declared twice"));
        }
        if c.dims.iter().any(|&d| d == 0) {
            ctx.err(format!("{owner}: every dimension must be ≥ 1, got {:?}", c.dims));
        }
        let sites = c.dims.iter().map(|&d| d as u64).product::<u64>();
        if sites > u32::MAX as u64 / 2 {
            ctx.err(format!("{owner}: {sites} sites is too many"));
        }
        let mut md = vec![0.0; molecules.len()];
        for (name, v) in &c.molecular_diffusion {
            let p = ctx.prob(v, &format!("{owner} molecular_diffusion of \"{name}\""));
            if let Some(m) = names.molecule(&mut ctx, name, &format!("{owner} (molecular_diffusion)")) {
                md[m.index()] = p;
            }
        }
        let mut cd = vec![0.0; cell_types.len()];
        for (name, v) in &c.cellular_diffusion {
            let p = ctx.prob(v, &format!("{owner} cellular_diffusion of \"{name}\""));
            if let Some(t) = names.cell(&mut ctx, name, &format!("{owner} (cellular_diffusion)")) {
                cd[t.index()] = p;
            }
        }
        let mut im = Vec::new();
        let mut ic = Vec::new();
        for (name, v) in &c.initial_concentrations {
            let what = format!("{owner} initial concentration of \"{name}\"");
            let x = ctx.value(v, &what);
            if !(x >= 0.0) || !x.is_finite() {
                ctx.err(format!("{what} = {x} must be ≥ 0"));
                continue;
            }
            if let Some(&m) = names.molecules.get(name) {
                im.push((m, x));
            } else if let Some(&t) = names.cells.get(name) {
                ic.push((t, x));
            } else {
                ctx.err(format!("{owner} initial_concentrations references undeclared agent \"{name}\""));
            }
        }
        let total: f64 = ic.iter().map(|p| p.1).sum();
        if total > 1.0 + 1e-12 {
            ctx.err(format!("{owner}: initial cell concentrations sum to {total} > 1 cell per site"));
        }
        compartments.push(CompartmentModel {
            name: c.name.clone(),
            dims: c.dims,
            molecular_diffusion: md,
            cellular_diffusion: cd,
            initial_molecules: im,
            initial_cells: ic,
        });
    }
    if compartments.is_empty() {
        ctx.err("scenario declares no compartments");
    }

    let mut transfers = Vec::new();
    for (i, t) in sc.transfers.iter().enumerate() {
        let owner = format!("transfer rule {i}");
        let rate = ctx.prob(&t.rate, &format!("{owner} rate"));
        let from = comp_names.get(&t.from).copied();
        let to = comp_names.get(&t.to).copied();
        if from.is_none() {
            ctx.err(format!("{owner} references undeclared compartment \"{}\"", t.from));
        }
        if to.is_none() {
            ctx.err(format!("{owner} references undeclared compartment \"{}\"", t.to));
        }
        let agent = if let Some(&m) = names.molecules.get(&t.agent) {
            Some(AgentFilter::Molecule(m))
        } else if let Some(&c) = names.cells.get(&t.agent) {
            Some(AgentFilter::CellType(c))
        } else if let Some(l) = labels.iter().position(|l| *l == t.agent) {
            Some(AgentFilter::Label(LabelId(l as u16)))
        } else {
            ctx.err(format!("{owner} references undeclared agent \"{}\"", t.agent));
            None
        };
        if let (Some(from), Some(to), Some(agent)) = (from, to, agent) {
            transfers.push(Transfer { from, to, agent, rate });
        }
    }

    let mut model = Model {
        name: sc.name.clone(),
        affinity,
        molecules,
        cell_types,
        mechanisms,
        labels,
        compartments,
        transfers,
        schedule: Vec::new(),
        ticks: sc.run.ticks,
        seed: sc.run.seed,
        log_bonds: sc.run.log_bonds,
        parameters: sc.parameters.clone(),
        library,
    };
    for (i, s) in sc.schedule.iter().enumerate() {
        if s.tick >= sc.run.ticks {
            ctx.err(format!(
                "schedule entry {i} at tick {} is beyond the run length {}",
                s.tick, sc.run.ticks
            ));
        }
        match model.resolve_injection(&s.inject_spec()) {
            Ok(inj) => model.schedule.push((s.tick, inj)),
            Err(e) => ctx.err(format!("schedule entry {i}: {e}")),
        }
    }
    model.schedule.sort_by_key(|s| s.0);
    for p in sc.parameters.keys() {
        if !ctx.used_params.contains(p) {
            ctx.warn(format!("parameter \"{p}\" is never referenced"));
        }
    }
    reachability_warnings(&mut ctx, &model);
    let report = ctx.report;
    if report.errors.is_empty() {
        (Some(model), report)
    } else {
        (None, report)
    }
}

#[allow(clippy::too_many_arguments)]
fn compile_mechanism(
    ctx: &mut Ctx,
    names: &Names,
    mols: &[MoleculeType],
    library: &BTreeMap<String, MechanismId>,
    mechanism_names: &BTreeSet<&str>,
    labels: &[String],
    m: &MechanismSpec,
    owner: &str,
    cell: Option<&CellSpec>,
) -> Mechanism {
    if m.actions.is_empty() {
        ctx.err(format!("{owner} has an empty action list"));
    }
    let rate = ctx.prob(&m.rate, &format!("{owner} rate"));
    let delay = ctx.count(&m.delay, &format!("{owner} delay"), 0) as u64;
    let mut conditions = Vec::new();
    for c in &m.conditions {
        let (kind, surface) = match c {
            ConditionSpec::SurfaceComplex { pattern, threshold, .. } => {
                let t = ctx.count(threshold, &format!("{owner} threshold"), 1);
                (
                    names
                        .pattern(ctx, pattern, owner, mols)
                        .map(|p| ConditionKind::SurfaceComplex { pattern: p, threshold: t }),
                    true,
                )
            }
            ConditionSpec::SurfaceCountAtLeast { pattern, threshold, .. } => {
                let t = ctx.count(threshold, &format!("{owner} threshold"), 1);
                (
                    names
                        .pattern(ctx, pattern, owner, mols)
                        .map(|p| ConditionKind::SurfaceCountAtLeast { pattern: p, threshold: t }),
                    true,
                )
            }
            ConditionSpec::SurfaceCountAtMost { pattern, threshold, .. } => {
                let t = ctx.count(threshold, &format!("{owner} threshold"), 1);
                (
                    names
                        .pattern(ctx, pattern, owner, mols)
                        .map(|p| ConditionKind::SurfaceCountAtMost { pattern: p, threshold: t }),
                    true,
                )
            }
            ConditionSpec::ContactCellType { cell_type, .. } => (
                names
                    .cell(ctx, cell_type, owner)
                    .map(|t| ConditionKind::ContactCellType { cell_type: t }),
                false,
            ),
            ConditionSpec::SiteMoleculeAtLeast {
                molecule,
                threshold,
                neighborhood,
                ..
            } => {
                let t = ctx.count(threshold, &format!("{owner} threshold"), 1);
                (
                    names
                        .molecule(ctx, molecule, owner)
                        .map(|mol| ConditionKind::SiteMoleculeAtLeast {
                            molecule: mol,
                            threshold: t,
                            neighborhood: *neighborhood,
                        }),
                    false,
                )
            }
        };
        if c.side_scoped() && !surface {
            ctx.err(format!("{owner}: side_scoped is only valid for surface conditions"));
        }
        if let Some(kind) = kind {
            conditions.push(Condition {
                kind,
                side_scoped: c.side_scoped(),
                negated: c.negated(),
            });
        }
    }
    let mut actions = Vec::new();
    for a in &m.actions {
        let act = match a {
            ActionSpec::Express {
                molecule,
                count,
                limit,
                each_side,
            } => {
                let count = ctx.count(count, &format!("{owner} express count"), 1);
                let limit = limit.as_ref().map(|l| ctx.count(l, &format!("{owner} express limit"), 1));
                names.molecule(ctx, molecule, owner).map(|mid| {
                    if mols[mid.index()].clonal_site && cell.is_some_and(|c| c.random_site.is_none()) {
                        ctx.err(format!(
                            "{owner} expresses clonal molecule \"{molecule}\" but the cell type declares no random_site"
                        ));
                    }
                    Action::Express {
                        molecule: mid,
                        count,
                        limit,
                        each_side: *each_side,
                    }
                })
            }
            ActionSpec::Secrete { molecule, count } => {
                let count = ctx.count(count, &format!("{owner} secrete count"), 1);
                names.molecule(ctx, molecule, owner).map(|mid| {
                    if mols[mid.index()].clonal_site && cell.is_some_and(|c| c.random_site.is_none()) {
                        ctx.err(format!(
                            "{owner} secretes clonal molecule \"{molecule}\" but the cell type declares no random_site"
                        ));
                    }
                    Action::Secrete { molecule: mid, count }
                })
            }
            ActionSpec::Ingest { pattern } => names
                .pattern(ctx, pattern, owner, mols)
                .map(|p| Action::Ingest { pattern: p }),
            ActionSpec::KillContact { cell_type, pattern } => match (cell_type, pattern) {
                (Some(t), None) => names.cell(ctx, t, owner).map(|t| Action::KillContact {
                    target: KillTarget::CellType(t),
                }),
                (None, Some(p)) => names.pattern(ctx, p, owner, mols).map(|p| Action::KillContact {
                    target: KillTarget::Pattern(p),
                }),
                _ => {
                    ctx.err(format!("{owner}: kill_contact needs exactly one of cell_type or pattern"));
                    None
                }
            },
            ActionSpec::MoveRandom {} => Some(Action::MoveRandom),
            ActionSpec::MoveGradient { molecule, direction } => {
                names.molecule(ctx, molecule, owner).map(|mid| Action::MoveGradient {
                    molecule: mid,
                    direction: *direction,
                })
            }
            ActionSpec::Divide {} => Some(Action::Divide),
            ActionSpec::Differentiate { cell_type } => names
                .cell(ctx, cell_type, owner)
                .map(|t| Action::Differentiate { cell_type: t }),
            ActionSpec::Die { cause } => Some(Action::Die {
                cause: cause.unwrap_or(DeathCause::Suicide),
            }),
            ActionSpec::AddMechanism { mechanism, label } => match library.get(mechanism) {
                Some(&id) => Some(Action::AddMechanism {
                    mechanism: id,
                    label: label
                        .as_ref()
                        .and_then(|l| labels.iter().position(|x| x == l))
                        .map(|i| LabelId(i as u16)),
                }),
                None => {
                    ctx.err(format!(
                        "{owner} references undeclared library mechanism \"{mechanism}\""
                    ));
                    None
                }
            },
            ActionSpec::RemoveMechanism { mechanism } => {
                if !mechanism_names.contains(mechanism.as_str()) {
                    ctx.err(format!("{owner} removes undeclared mechanism \"{mechanism}\""));
                }
                Some(Action::RemoveMechanism {
                    name: mechanism.clone(),
                })
            }
            ActionSpec::Present { molecule, limit } => {
                let limit = limit.as_ref().map(|l| ctx.count(l, &format!("{owner} present limit"), 1));
                names.molecule(ctx, molecule, owner).and_then(|mid| {
                    if !mols[mid.index()].presentation_slot {
                        ctx.err(format!(
                            "{owner} presents on \"{molecule}\", which has no presentation_slot"
                        ));
                        None
                    } else {
                        Some(Action::Present { molecule: mid, limit })
                    }
                })
            }
        };
        if let Some(act) = act {
            actions.push(act);
        }
    }
    Mechanism {
        name: m.name.clone(),
        logged: m.log.unwrap_or(!m.conditions.is_empty()),
        conditions,
        actions,
        rate,
        delay,
    }
}

/// Warns about conditions on molecules that nothing in the scenario can produce.
fn reachability_warnings(ctx: &mut Ctx, model: &Model) {
    let mut produced = vec![false; model.molecules.len()];
    for m in &model.mechanisms {
        for a in &m.actions {
            match a {
                Action::Express { molecule, .. }
                | Action::Secrete { molecule, .. }
                | Action::Present { molecule, .. } => produced[molecule.index()] = true,
                _ => {}
            }
        }
    }
    for c in &model.compartments {
        for (m, x) in &c.initial_molecules {
            if *x > 0.0 {
                produced[m.index()] = true;
            }
        }
    }
    for (_, inj) in &model.schedule {
        if let AgentRef::Molecule(m) = inj.agent {
            produced[m.index()] = true;
        }
    }
    // fragments of producible molecules, to a fixed point
    loop {
        let mut changed = false;
        for (i, m) in model.molecules.iter().enumerate() {
            if produced[i] {
                for f in &m.fragments {
                    if !produced[f.index()] {
                        produced[f.index()] = true;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    for c in &model.cell_types {
        for &mid in &c.mechanisms {
            warn_mechanism(ctx, model, &produced, mid, &format!("cell type \"{}\"", c.name));
        }
    }
    for &mid in model.library.values() {
        warn_mechanism(ctx, model, &produced, mid, "the mechanism library");
    }
}

fn warn_mechanism(ctx: &mut Ctx, model: &Model, produced: &[bool], mid: MechanismId, owner: &str) {
    let m = &model.mechanisms[mid.0 as usize];
    for c in &m.conditions {
        if c.negated {
            continue;
        }
        let needed: Vec<MoleculeTypeId> = match &c.kind {
            ConditionKind::SurfaceComplex { pattern, .. } | ConditionKind::SurfaceCountAtLeast { pattern, .. } => {
                pattern.0.to_vec()
            }
            ConditionKind::SiteMoleculeAtLeast { molecule, .. } => vec![*molecule],
            _ => Vec::new(),
        };
        for mol in needed {
            if !produced[mol.index()] {
                ctx.warn(format!(
                    "mechanism \"{}\" of {owner} can never fire: no rule produces molecule \"{}\"",
                    m.name, model.molecules[mol.index()].name
                ));
            }
        }
    }
}
