//! The world and its tick: diffusion, chemistry, mechanism evaluation against
//! a start-of-phase view, commit, decay and death, transfers, census.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smallvec::SmallVec;
use thiserror::Error;

use crate::chemistry::{find_lid, Agent, MassLedger, Molecule, Peer, Species, SpeciesId, SpeciesTable, SurfaceSummary};
use crate::lattice::{binomial, poisson, Grid, LatticeError, Pool, Slice};
use crate::model::*;
use crate::scenario::{AgentFilter, AgentRef, Axis, InjectSpec, Injection, Model};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("{0}")]
    Injection(String),
    #[error("unknown compartment {0:?}")]
    UnknownCompartment(String),
    #[error("unknown agent type {0:?}")]
    UnknownAgent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechSlot {
    pub id: MechanismId,
    /// Tick the mechanism was acquired.
    pub since: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: u64,
    pub ctype: CellTypeId,
    pub label: LabelId,
    /// Id of the founder cell.
    pub clone: u64,
    pub random_site: Option<BindingSite>,
    pub born: u64,
    pub comp: u16,
    pub site: u32,
    pub mechs: SmallVec<[MechSlot; 6]>,
    pub membrane: Vec<Molecule>,
    pub next_lid: u32,
    pub ingested: Vec<Epitope>,
}

#[derive(Debug, Clone)]
pub struct Compartment {
    pub grid: Grid,
    /// Slab slot + 1 of the resident cell, 0 when free.
    pub occ: Vec<u32>,
    pub pools: Vec<Option<Pool>>,
    pub agents: Vec<Agent>,
}

impl Compartment {
    pub(crate) fn pool_mut(&mut self, sp: SpeciesId) -> &mut Pool {
        let i = sp as usize;
        if self.pools.len() <= i {
            self.pools.resize(i + 1, None);
        }
        let n = self.grid.len();
        self.pools[i].get_or_insert_with(|| Pool::new(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRef {
    pub comp: u16,
    pub pos: [u32; 3],
    pub cell: u64,
    pub clone: u64,
    pub label: LabelId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BondEventKind {
    Bind,
    Unbind,
    Decay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BondEvent {
    pub kind: BondEventKind,
    pub comp: u16,
    pub pos: [u32; 3],
    pub a: MoleculeTypeId,
    pub b: Option<MoleculeTypeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventBody {
    Action {
        who: CellRef,
        action: ActionKind,
        target: Option<LabelId>,
    },
    Birth {
        who: CellRef,
        parent: Option<u64>,
    },
    Death {
        who: CellRef,
        cause: DeathCause,
    },
    Differentiate {
        who: CellRef,
        from: LabelId,
    },
    Relabel {
        who: CellRef,
        from: LabelId,
    },
    DivisionBlocked {
        who: CellRef,
    },
    Transfer {
        who: CellRef,
        from: u16,
    },
    Bond(BondEvent),
    Inject {
        spec: InjectSpec,
        placed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub seq: u32,
    pub body: EventBody,
}

/// Per-compartment counts: cells by label, soluble or captured molecules by type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompartmentCensus {
    pub cells: Vec<u64>,
    pub molecules: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub compartments: Vec<CompartmentCensus>,
}

impl Census {
    pub fn cells(&self, comp: usize, label: LabelId) -> u64 {
        self.compartments[comp].cells[label.index()]
    }

    pub fn molecules(&self, comp: usize, t: MoleculeTypeId) -> u64 {
        self.compartments[comp].molecules[t.index()]
    }

    pub fn total_cells(&self, label: LabelId) -> u64 {
        self.compartments.iter().map(|c| c.cells[label.index()]).sum()
    }

    pub fn total_molecules(&self, t: MoleculeTypeId) -> u64 {
        self.compartments.iter().map(|c| c.molecules[t.index()]).sum()
    }

    /// `{compartment: {name: count}}` with zero entries dropped.
    pub fn named(&self, model: &Model) -> BTreeMap<String, BTreeMap<String, u64>> {
        let mut out = BTreeMap::new();
        for (ci, c) in self.compartments.iter().enumerate() {
            let mut m = BTreeMap::new();
            for (l, &n) in c.cells.iter().enumerate() {
                if n > 0 {
                    m.insert(model.labels[l].clone(), n);
                }
            }
            for (t, &n) in c.molecules.iter().enumerate() {
                if n > 0 {
                    m.insert(model.molecules[t].name.clone(), n);
                }
            }
            out.insert(model.compartments[ci].name.clone(), m);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub tick: u64,
    pub actions: BTreeMap<ActionKind, u64>,
    pub events: Vec<Event>,
    pub census: Census,
    pub ledger: MassLedger,
}

#[derive(Debug, Clone, Copy)]
struct Proposal {
    slot: u32,
    cell: u64,
    mech: MechanismId,
    side: Option<u8>,
}

pub struct World {
    pub(crate) model: Arc<Model>,
    pub(crate) species: SpeciesTable,
    pub(crate) comps: Vec<Compartment>,
    pub(crate) cells: Vec<Option<Cell>>,
    free_slots: Vec<u32>,
    next_cell_id: u64,
    pub(crate) next_agent_uid: u64,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) tick: u64,
    pub(crate) seq: u32,
    stepping: bool,
    pub(crate) events: Vec<Event>,
    pub(crate) ledger: MassLedger,
    pub(crate) type_rank: Vec<u16>,
    pub(crate) log_bonds: bool,
    seed: u64,
    schedule_pos: usize,
    actions: BTreeMap<ActionKind, u64>,
}

impl World {
    /// Builds tick 0: cells by per-site Bernoulli draws, molecules by Poisson.
    pub fn new(model: Arc<Model>, seed: u64) -> Self {
        let mut species = SpeciesTable::new(&model);
        for t in 0..model.molecules.len() {
            species.intern(Species::plain(MoleculeTypeId(t as u16)), &model);
        }
        let mut order: Vec<usize> = (0..model.molecules.len()).collect();
        order.sort_by(|&a, &b| model.molecules[a].name.cmp(&model.molecules[b].name));
        let mut type_rank = vec![0u16; order.len()];
        for (r, &t) in order.iter().enumerate() {
            type_rank[t] = r as u16;
        }
        let comps = model
            .compartments
            .iter()
            .map(|c| {
                let grid = Grid::new(c.dims);
                Compartment {
                    grid,
                    occ: vec![0; grid.len()],
                    pools: Vec::new(),
                    agents: Vec::new(),
                }
            })
            .collect();
        let mut w = World {
            species,
            comps,
            cells: Vec::new(),
            free_slots: Vec::new(),
            next_cell_id: 1,
            next_agent_uid: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tick: 0,
            seq: 0,
            stepping: false,
            events: Vec::new(),
            ledger: MassLedger::new(model.molecules.len()),
            type_rank,
            log_bonds: model.log_bonds,
            seed,
            schedule_pos: 0,
            actions: BTreeMap::new(),
            model,
        };
        let model = w.model.clone();
        for (ci, cm) in model.compartments.iter().enumerate() {
            if !cm.initial_cells.is_empty() {
                for site in 0..w.comps[ci].grid.len() as u32 {
                    let u: f64 = w.rng.random();
                    let mut acc = 0.0;
                    for &(ct, conc) in &cm.initial_cells {
                        acc += conc;
                        if u < acc {
                            w.spawn_founder(ci as u16, site, ct);
                            break;
                        }
                    }
                }
            }
            for &(t, conc) in &cm.initial_molecules {
                let sp = w.species.intern(Species::plain(t), &model);
                for site in 0..w.comps[ci].grid.len() as u32 {
                    let n = poisson(&mut w.rng, conc);
                    w.add_soluble(ci as u16, site, sp, n);
                }
            }
        }
        w.events.clear();
        w.ledger.reset();
        w
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn species(&self) -> &SpeciesTable {
        &self.species
    }

    pub fn compartments(&self) -> &[Compartment] {
        &self.comps
    }

    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().flatten()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len() - self.free_slots.len()
    }

    pub fn cell_at(&self, comp: usize, pos: [u32; 3]) -> Option<&Cell> {
        let c = &self.comps[comp];
        let occ = c.occ[c.grid.index(pos) as usize];
        (occ > 0).then(|| self.cells[occ as usize - 1].as_ref().expect("occupant"))
    }

    pub(crate) fn slot_at(&self, comp: u16, site: u32) -> Option<u32> {
        let occ = self.comps[comp as usize].occ[site as usize];
        (occ > 0).then_some(occ - 1)
    }

    /// Surface summary of the cell at a position.
    pub fn surface_at(&self, comp: usize, pos: [u32; 3]) -> SurfaceSummary {
        let site = self.comps[comp].grid.index(pos);
        match self.slot_at(comp as u16, site) {
            Some(s) => self.surface_summary(s),
            None => SurfaceSummary::default(),
        }
    }

    pub(crate) fn event_tick(&self) -> u64 {
        if self.stepping {
            self.tick + 1
        } else {
            self.tick
        }
    }

    fn cell_ref(&self, slot: u32) -> CellRef {
        let c = self.cells[slot as usize].as_ref().expect("live cell");
        CellRef {
            comp: c.comp,
            pos: self.comps[c.comp as usize].grid.coords(c.site),
            cell: c.id,
            clone: c.clone,
            label: c.label,
        }
    }

    fn alloc_slot(&mut self, cell: Cell) -> u32 {
        let (comp, site) = (cell.comp, cell.site);
        let slot = match self.free_slots.pop() {
            Some(s) => {
                self.cells[s as usize] = Some(cell);
                s
            }
            None => {
                self.cells.push(Some(cell));
                self.cells.len() as u32 - 1
            }
        };
        self.comps[comp as usize].occ[site as usize] = slot + 1;
        slot
    }

    fn type_mechs(&self, ct: CellTypeId, since: u64) -> SmallVec<[MechSlot; 6]> {
        self.model.cell_types[ct.index()]
            .mechanisms
            .iter()
            .map(|&id| MechSlot { id, since })
            .collect()
    }

    fn spawn_founder(&mut self, comp: u16, site: u32, ct: CellTypeId) -> u32 {
        let t = &self.model.cell_types[ct.index()];
        let random_site = t.random_site.map(|rs| {
            sample_random_binding_site_in(&mut self.rng, rs.low..rs.high, rs.arity).expect("validated range")
        });
        let id = self.next_cell_id;
        self.next_cell_id += 1;
        let born = self.event_tick();
        let cell = Cell {
            id,
            ctype: ct,
            label: t.label,
            clone: id,
            random_site,
            born,
            comp,
            site,
            mechs: self.type_mechs(ct, born),
            membrane: Vec::new(),
            next_lid: 0,
            ingested: Vec::new(),
        };
        self.alloc_slot(cell)
    }

    /// Removes a cell; foreign molecules it carried are discarded.
    fn remove_cell(&mut self, slot: u32, cause: DeathCause) {
        let who = self.cell_ref(slot);
        self.break_contacts(slot);
        let cell = self.cells[slot as usize].take().expect("live cell");
        for m in cell.membrane.iter().filter(|m| !m.anchored) {
            let t = self.species.mtype(m.species);
            self.ledger.add(t, |r| r.discarded += 1);
        }
        self.comps[cell.comp as usize].occ[cell.site as usize] = 0;
        self.free_slots.push(slot);
        self.push_event(EventBody::Death { who, cause });
    }

    fn move_cell(&mut self, slot: u32, target: u32) -> bool {
        let c = self.cells[slot as usize].as_ref().expect("live cell");
        let comp = c.comp as usize;
        if self.comps[comp].occ[target as usize] != 0 {
            return false;
        }
        let from = c.site;
        self.break_contacts(slot);
        self.comps[comp].occ[from as usize] = 0;
        self.comps[comp].occ[target as usize] = slot + 1;
        self.cells[slot as usize].as_mut().expect("live cell").site = target;
        true
    }

    // ---- injection -------------------------------------------------------

    /// Resolves and applies an injection request between ticks, recording it
    /// in the event log so replays reproduce it.
    pub fn inject_live(&mut self, spec: &InjectSpec) -> Result<u64, EngineError> {
        let inj = self.model.resolve_injection(spec).map_err(EngineError::Injection)?;
        let placed = self.inject(&inj)?;
        self.push_event(EventBody::Inject {
            spec: spec.clone(),
            placed,
        });
        Ok(placed)
    }

    /// Places molecules at sampled sites or cells at free sites; returns how
    /// many were placed.
    pub fn inject(&mut self, inj: &Injection) -> Result<u64, EngineError> {
        let ci = inj.compartment.index();
        let sites = self.comps[ci].grid.placement_sites(&inj.placement)?;
        match inj.agent {
            AgentRef::Molecule(t) => {
                let model = self.model.clone();
                let sp = self.species.intern(Species::plain(t), &model);
                let mut per_site: BTreeMap<u32, u32> = BTreeMap::new();
                for _ in 0..inj.count {
                    let s = *sites.choose(&mut self.rng).expect("non-empty placement");
                    *per_site.entry(s).or_default() += 1;
                }
                for (s, n) in per_site {
                    self.add_soluble(ci as u16, s, sp, n);
                }
                self.ledger.add(t, |r| r.injected += inj.count);
                Ok(inj.count)
            }
            AgentRef::Cell(ct) => {
                let mut free: Vec<u32> = sites
                    .into_iter()
                    .filter(|&s| self.comps[ci].occ[s as usize] == 0)
                    .collect();
                let n = (inj.count as usize).min(free.len());
                let (chosen, _) = free.partial_shuffle(&mut self.rng, n);
                let chosen = chosen.to_vec();
                for s in chosen {
                    let slot = self.spawn_founder(ci as u16, s, ct);
                    let who = self.cell_ref(slot);
                    self.push_event(EventBody::Birth { who, parent: None });
                }
                Ok(n as u64)
            }
        }
    }

    // ---- the tick ----------------------------------------------------------

    pub fn step(&mut self) -> TickReport {
        self.stepping = true;
        self.seq = 0;
        self.ledger.reset();
        self.actions.clear();
        let next = self.tick + 1;
        while self.schedule_pos < self.model.schedule.len() && self.model.schedule[self.schedule_pos].0 < next {
            let inj = self.model.schedule[self.schedule_pos].1.clone();
            self.schedule_pos += 1;
            if let Err(e) = self.inject(&inj) {
                log::warn!("scheduled injection skipped: {e}");
            }
        }
        self.diffusion_phase();
        self.chemistry_phase();
        let proposals = self.evaluate_phase();
        self.commit_phase(proposals);
        self.decay_phase();
        self.natural_death_phase();
        self.transfer_phase();
        self.tick = next;
        self.stepping = false;
        TickReport {
            tick: self.tick,
            actions: std::mem::take(&mut self.actions),
            events: std::mem::take(&mut self.events),
            census: self.census(),
            ledger: self.ledger.clone(),
        }
    }

    /// Events recorded outside a step (live injections) since the last drain.
    pub fn drain_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    fn diffusion_phase(&mut self) {
        let model = self.model.clone();
        for ci in 0..self.comps.len() {
            let grid = self.comps[ci].grid;
            let rates = &model.compartments[ci].molecular_diffusion;
            for sp in 0..self.comps[ci].pools.len() {
                let p = rates[self.species.mtype(sp as SpeciesId).index()];
                if p <= 0.0 {
                    continue;
                }
                let Some(pool) = self.comps[ci].pools[sp].as_mut() else { continue };
                let sites = pool.active_sites().to_vec();
                let mut moves: Vec<(u32, u32)> = Vec::new();
                for s in sites {
                    let k = binomial(&mut self.rng, pool.get(s), p);
                    for _ in 0..k {
                        let d = self.rng.random_range(0..6);
                        if let Some(n) = grid.neighbor(s, d) {
                            moves.push((s, n));
                        }
                    }
                }
                for (s, n) in moves {
                    pool.remove(s, 1);
                    pool.add(n, 1);
                }
            }
            for ai in 0..self.comps[ci].agents.len() {
                let a = &self.comps[ci].agents[ai];
                let p = a
                    .mols
                    .iter()
                    .map(|m| rates[self.species.mtype(m.species).index()])
                    .fold(f64::INFINITY, f64::min);
                if p > 0.0 && self.rng.random::<f64>() < p {
                    let d = self.rng.random_range(0..6);
                    if let Some(n) = grid.neighbor(a.site, d) {
                        self.comps[ci].agents[ai].site = n;
                    }
                }
            }
        }
        let mut order: Vec<u32> = (0..self.cells.len() as u32)
            .filter(|&s| self.cells[s as usize].is_some())
            .collect();
        order.shuffle(&mut self.rng);
        for slot in order {
            let c = self.cells[slot as usize].as_ref().expect("live cell");
            let p = model.compartments[c.comp as usize].cellular_diffusion[c.ctype.index()];
            if p <= 0.0 || !(self.rng.random::<f64>() < p) {
                continue;
            }
            let d = self.rng.random_range(0..6);
            if let Some(n) = self.comps[c.comp as usize].grid.neighbor(c.site, d) {
                self.move_cell(slot, n);
            }
        }
    }

    /// Soluble count of a molecule type at one site (pools and free complexes).
    fn site_molecules(&self, comp: usize, site: u32, t: MoleculeTypeId, agent_sites: &HashMap<(u16, u32), u32>) -> u32 {
        let c = &self.comps[comp];
        let mut n = 0;
        for &sp in self.species.of_type(t) {
            if let Some(Some(p)) = c.pools.get(sp as usize) {
                n += p.get(site);
            }
        }
        n + agent_sites.get(&(comp as u16, site)).copied().unwrap_or(0)
    }

    fn evaluate_phase(&mut self) -> Vec<Proposal> {
        let model = self.model.clone();
        let mut order: Vec<u32> = (0..self.cells.len() as u32)
            .filter(|&s| self.cells[s as usize].is_some())
            .collect();
        order.shuffle(&mut self.rng);
        // soluble agents per (compartment, site) for the molecule types conditions read
        let mut watched: Vec<bool> = vec![false; model.molecules.len()];
        for m in &model.mechanisms {
            for c in &m.conditions {
                if let ConditionKind::SiteMoleculeAtLeast { molecule, .. } = c.kind {
                    watched[molecule.index()] = true;
                }
            }
        }
        let mut agent_counts: Vec<HashMap<(u16, u32), u32>> = vec![HashMap::new(); model.molecules.len()];
        if watched.iter().any(|&w| w) {
            for (ci, c) in self.comps.iter().enumerate() {
                for a in &c.agents {
                    for m in &a.mols {
                        let t = self.species.mtype(m.species);
                        if watched[t.index()] {
                            *agent_counts[t.index()].entry((ci as u16, a.site)).or_default() += 1;
                        }
                    }
                }
            }
        }
        let tick = self.tick + 1;
        let mut out = Vec::new();
        for slot in order {
            let cell = self.cells[slot as usize].as_ref().expect("live cell");
            let mut summary: Option<SurfaceSummary> = None;
            let mut neighbors: Option<[Option<CellTypeId>; 6]> = None;
            for ms in cell.mechs.iter() {
                let mech = &model.mechanisms[ms.id.0 as usize];
                if tick.saturating_sub(ms.since) < mech.delay {
                    continue;
                }
                let mut mask: u8 = 0b11_1111;
                let mut scoped = false;
                let mut ok = true;
                for cond in &mech.conditions {
                    let sides: u8 = match &cond.kind {
                        ConditionKind::SurfaceComplex { pattern, threshold } => {
                            let s = summary.get_or_insert_with(|| self.surface_summary(slot));
                            side_bits(|d| s.count_on(d, pattern) >= *threshold)
                        }
                        ConditionKind::SurfaceCountAtLeast { pattern, threshold } => {
                            let s = summary.get_or_insert_with(|| self.surface_summary(slot));
                            if cond.side_scoped {
                                side_bits(|d| s.count_on(d, pattern) >= *threshold)
                            } else if s.total(pattern) >= *threshold {
                                0b11_1111
                            } else {
                                0
                            }
                        }
                        ConditionKind::SurfaceCountAtMost { pattern, threshold } => {
                            let s = summary.get_or_insert_with(|| self.surface_summary(slot));
                            if cond.side_scoped {
                                side_bits(|d| s.count_on(d, pattern) <= *threshold)
                            } else if s.total(pattern) <= *threshold {
                                0b11_1111
                            } else {
                                0
                            }
                        }
                        ConditionKind::ContactCellType { cell_type } => {
                            let nb = neighbors.get_or_insert_with(|| self.neighbor_types(slot));
                            side_bits(|d| nb[d] == Some(*cell_type))
                        }
                        ConditionKind::SiteMoleculeAtLeast {
                            molecule,
                            threshold,
                            neighborhood,
                        } => {
                            let ac = &agent_counts[molecule.index()];
                            let mut n = self.site_molecules(cell.comp as usize, cell.site, *molecule, ac);
                            if *neighborhood {
                                let grid = self.comps[cell.comp as usize].grid;
                                for d in 0..6 {
                                    if let Some(s) = grid.neighbor(cell.site, d) {
                                        n += self.site_molecules(cell.comp as usize, s, *molecule, ac);
                                    }
                                }
                            }
                            if n >= *threshold {
                                0b11_1111
                            } else {
                                0
                            }
                        }
                    };
                    if cond.side_scoped {
                        scoped = true;
                        mask &= if cond.negated { !sides & 0b11_1111 } else { sides };
                        if mask == 0 {
                            ok = false;
                        }
                    } else {
                        let any = sides != 0;
                        if any == cond.negated {
                            ok = false;
                        }
                    }
                    if !ok {
                        break;
                    }
                }
                if !ok {
                    continue;
                }
                if mech.rate < 1.0 && !(self.rng.random::<f64>() < mech.rate) {
                    continue;
                }
                let side = if scoped {
                    let bits: SmallVec<[u8; 6]> = (0..6u8).filter(|d| mask & (1 << d) != 0).collect();
                    Some(*bits.choose(&mut self.rng).expect("non-empty mask"))
                } else {
                    None
                };
                out.push(Proposal {
                    slot,
                    cell: cell.id,
                    mech: ms.id,
                    side,
                });
            }
        }
        out
    }

    fn neighbor_types(&self, slot: u32) -> [Option<CellTypeId>; 6] {
        let c = self.cells[slot as usize].as_ref().expect("live cell");
        let comp = &self.comps[c.comp as usize];
        let mut out = [None; 6];
        for (d, o) in out.iter_mut().enumerate() {
            if let Some(n) = comp.grid.neighbor(c.site, d) {
                let occ = comp.occ[n as usize];
                if occ > 0 {
                    *o = self.cells[occ as usize - 1].as_ref().map(|x| x.ctype);
                }
            }
        }
        out
    }

    fn alive(&self, slot: u32, id: u64) -> bool {
        self.cells[slot as usize].as_ref().is_some_and(|c| c.id == id)
    }

    fn commit_phase(&mut self, proposals: Vec<Proposal>) {
        let model = self.model.clone();
        for p in proposals {
            if !self.alive(p.slot, p.cell) {
                continue;
            }
            // a mechanism lost earlier in this phase no longer acts
            if !self.cells[p.slot as usize]
                .as_ref()
                .expect("live cell")
                .mechs
                .iter()
                .any(|m| m.id == p.mech)
            {
                continue;
            }
            let mech = &model.mechanisms[p.mech.0 as usize];
            let label = self.cells[p.slot as usize].as_ref().expect("live").label;
            for action in &mech.actions {
                if !self.alive(p.slot, p.cell) {
                    break;
                }
                let done = self.execute(p.slot, p.side, action, mech.logged, label);
                if done {
                    *self.actions.entry(action.kind()).or_default() += 1;
                }
            }
        }
    }

    fn log_action(&mut self, slot: u32, label: LabelId, action: ActionKind, target: Option<LabelId>) {
        let mut who = self.cell_ref(slot);
        who.label = label;
        self.push_event(EventBody::Action { who, action, target });
    }

    /// Runs one action; returns whether it took effect.
    fn execute(&mut self, slot: u32, side: Option<u8>, action: &Action, logged: bool, label: LabelId) -> bool {
        let model = self.model.clone();
        let tick = self.tick + 1;
        let done = match action {
            Action::Express {
                molecule,
                count,
                limit,
                each_side,
            } => {
                let mt = &model.molecules[molecule.index()];
                let cell = self.cells[slot as usize].as_ref().expect("live");
                let sp = Species {
                    mtype: *molecule,
                    clonal: if mt.clonal_site { cell.random_site.clone() } else { None },
                    presented: None,
                };
                let sp = self.species.intern(sp, &model);
                let sides: SmallVec<[u8; 6]> = if *each_side {
                    (0..6).collect()
                } else {
                    SmallVec::from_slice(&[side.unwrap_or_else(|| self.rng.random_range(0..6))])
                };
                let mut added = 0;
                for s in sides {
                    let cell = self.cells[slot as usize].as_mut().expect("live");
                    let present = cell
                        .membrane
                        .iter()
                        .filter(|m| m.anchored && m.species == sp && (!*each_side || m.side == s))
                        .count() as u32;
                    let room = limit.map(|l| l.saturating_sub(present)).unwrap_or(u32::MAX);
                    for _ in 0..(*count).min(room) {
                        let lid = cell.next_lid;
                        cell.next_lid += 1;
                        cell.membrane.push(Molecule::new(lid, sp, s, true));
                        added += 1;
                    }
                }
                added > 0
            }
            Action::Secrete { molecule, count } => {
                let c = self.cells[slot as usize].as_ref().expect("live");
                let (comp, site) = (c.comp, c.site);
                let sp = Species {
                    mtype: *molecule,
                    clonal: if model.molecules[molecule.index()].clonal_site { c.random_site.clone() } else { None },
                    presented: None,
                };
                let sp = self.species.intern(sp, &model);
                self.add_soluble(comp, site, sp, *count);
                self.ledger.add(*molecule, |r| r.secreted += *count as u64);
                true
            }
            Action::Ingest { pattern } => self.ingest(slot, side, pattern),
            Action::Present { molecule, limit } => {
                let cell = self.cells[slot as usize].as_ref().expect("live");
                if cell.ingested.is_empty() {
                    false
                } else {
                    let have = cell
                        .membrane
                        .iter()
                        .filter(|m| {
                            m.anchored && self.species.get(m.species).mtype == *molecule && self.species.get(m.species).presented.is_some()
                        })
                        .count() as u32;
                    if limit.is_some_and(|l| have >= l) {
                        false
                    } else {
                        let e = *cell.ingested.choose(&mut self.rng).expect("non-empty");
                        let sp = self.species.intern(
                            Species {
                                mtype: *molecule,
                                clonal: None,
                                presented: Some(e),
                            },
                            &model,
                        );
                        let s = side.unwrap_or_else(|| self.rng.random_range(0..6));
                        let cell = self.cells[slot as usize].as_mut().expect("live");
                        let lid = cell.next_lid;
                        cell.next_lid += 1;
                        cell.membrane.push(Molecule::new(lid, sp, s, true));
                        true
                    }
                }
            }
            Action::KillContact { target } => {
                let victim = self.kill_target(slot, side, target);
                if let Some(v) = victim {
                    let vlabel = self.cells[v as usize].as_ref().expect("live").label;
                    self.log_action(slot, label, ActionKind::KillContact, Some(vlabel));
                    self.remove_cell(v, DeathCause::Killed);
                    return true;
                }
                false
            }
            Action::MoveRandom => {
                let (comp, site) = self.pos_of(slot);
                let d = self.rng.random_range(0..6);
                match self.comps[comp as usize].grid.neighbor(site, d) {
                    Some(n) => self.move_cell(slot, n),
                    None => false,
                }
            }
            Action::MoveGradient { molecule, direction } => {
                let (comp, site) = self.pos_of(slot);
                let grid = self.comps[comp as usize].grid;
                let empty = HashMap::new();
                let mut best: SmallVec<[u32; 6]> = SmallVec::new();
                let mut best_v: i64 = 0;
                for d in 0..6 {
                    let Some(n) = grid.neighbor(site, d) else { continue };
                    let v = self.site_molecules(comp as usize, n, *molecule, &empty) as i64;
                    let v = if *direction == Gradient::Up { v } else { -v };
                    if best.is_empty() || v > best_v {
                        best.clear();
                        best.push(n);
                        best_v = v;
                    } else if v == best_v {
                        best.push(n);
                    }
                }
                match best.choose(&mut self.rng) {
                    Some(&n) => self.move_cell(slot, n),
                    None => false,
                }
            }
            Action::Divide => {
                let (comp, site) = self.pos_of(slot);
                let grid = self.comps[comp as usize].grid;
                let free: SmallVec<[u32; 6]> = (0..6)
                    .filter_map(|d| grid.neighbor(site, d))
                    .filter(|&n| self.comps[comp as usize].occ[n as usize] == 0)
                    .collect();
                match free.choose(&mut self.rng) {
                    Some(&n) => {
                        let parent = self.cells[slot as usize].as_ref().expect("live");
                        let id = self.next_cell_id;
                        self.next_cell_id += 1;
                        let daughter = Cell {
                            id,
                            ctype: parent.ctype,
                            label: parent.label,
                            clone: parent.clone,
                            random_site: parent.random_site.clone(),
                            born: tick,
                            comp,
                            site: n,
                            mechs: parent.mechs.iter().map(|m| MechSlot { id: m.id, since: tick }).collect(),
                            membrane: Vec::new(),
                            next_lid: 0,
                            ingested: Vec::new(),
                        };
                        let pid = parent.id;
                        let ds = self.alloc_slot(daughter);
                        if logged {
                            self.log_action(slot, label, ActionKind::Divide, None);
                        }
                        let who = self.cell_ref(ds);
                        self.push_event(EventBody::Birth { who, parent: Some(pid) });
                        return true;
                    }
                    None => {
                        let who = self.cell_ref(slot);
                        self.push_event(EventBody::DivisionBlocked { who });
                        false
                    }
                }
            }
            Action::Differentiate { cell_type } => {
                let mechs = self.type_mechs(*cell_type, tick);
                let new_label = model.cell_types[cell_type.index()].label;
                let cell = self.cells[slot as usize].as_mut().expect("live");
                let from = cell.label;
                cell.ctype = *cell_type;
                cell.label = new_label;
                cell.mechs = mechs;
                let who = self.cell_ref(slot);
                self.push_event(EventBody::Differentiate { who, from });
                return true;
            }
            Action::Die { cause } => {
                if logged {
                    self.log_action(slot, label, ActionKind::Die, None);
                }
                self.remove_cell(slot, *cause);
                return true;
            }
            Action::AddMechanism { mechanism, label: relabel } => {
                let cell = self.cells[slot as usize].as_mut().expect("live");
                cell.mechs.push(MechSlot {
                    id: *mechanism,
                    since: tick,
                });
                if let Some(l) = relabel {
                    if cell.label != *l {
                        let from = cell.label;
                        cell.label = *l;
                        let who = self.cell_ref(slot);
                        self.push_event(EventBody::Relabel { who, from });
                    }
                }
                true
            }
            Action::RemoveMechanism { name } => {
                let cell = self.cells[slot as usize].as_mut().expect("live");
                let before = cell.mechs.len();
                cell.mechs.retain(|m| model.mechanisms[m.id.0 as usize].name != *name);
                cell.mechs.len() != before
            }
        };
        if done && logged {
            self.log_action(slot, label, action.kind(), None);
        }
        done
    }

    fn pos_of(&self, slot: u32) -> (u16, u32) {
        let c = self.cells[slot as usize].as_ref().expect("live");
        (c.comp, c.site)
    }

    fn kill_target(&mut self, slot: u32, side: Option<u8>, target: &KillTarget) -> Option<u32> {
        let (comp, site) = self.pos_of(slot);
        let grid = self.comps[comp as usize].grid;
        let sides: SmallVec<[usize; 6]> = match target {
            KillTarget::CellType(ct) => {
                let nb = self.neighbor_types(slot);
                (0..6)
                    .filter(|&d| nb[d] == Some(*ct) && side.is_none_or(|s| s as usize == d))
                    .collect()
            }
            KillTarget::Pattern(p) => {
                let s = self.surface_summary(slot);
                (0..6)
                    .filter(|&d| s.count_on(d, p) > 0 && side.is_none_or(|x| x as usize == d))
                    .filter(|&d| grid.neighbor(site, d).is_some_and(|n| self.comps[comp as usize].occ[n as usize] != 0))
                    .collect()
            }
        };
        let d = *sides.choose(&mut self.rng)?;
        let n = grid.neighbor(site, d)?;
        self.slot_at(comp, n)
    }

    /// Takes in the foreign members of one complex matching `pattern`.
    fn ingest(&mut self, slot: u32, side: Option<u8>, pattern: &Pattern) -> bool {
        let cell = self.cells[slot as usize].as_ref().expect("live");
        // candidate complexes: components over local bonds holding a foreign member
        let comps = crate::chemistry::local_components(&cell.membrane);
        let rank = &self.type_rank;
        let mut hits: SmallVec<[usize; 4]> = SmallVec::new();
        for (k, c) in comps.iter().enumerate() {
            if !c.iter().any(|&i| !cell.membrane[i].anchored) {
                continue;
            }
            let s = cell.membrane[c[0]].side;
            if side.is_some_and(|x| x != s) {
                continue;
            }
            let mut members: SmallVec<[MoleculeTypeId; 4]> =
                c.iter().map(|&i| self.species.mtype(cell.membrane[i].species)).collect();
            members.sort_by_key(|t| (rank[t.index()], t.0));
            if pattern.matches(&members) {
                hits.push(k);
            }
        }
        let Some(&k) = hits.choose(&mut self.rng) else {
            return false;
        };
        let lids: SmallVec<[u32; 4]> = comps[k]
            .iter()
            .filter(|&&i| !cell.membrane[i].anchored)
            .map(|&i| cell.membrane[i].lid)
            .collect();
        let model = self.model.clone();
        for lid in lids {
            let cell = self.cells[slot as usize].as_mut().expect("live");
            let i = find_lid(&cell.membrane, lid).expect("present");
            let sp = cell.membrane[i].species;
            let t = self.species.mtype(sp);
            cell.ingested.extend(model.molecules[t.index()].epitopes.iter().copied());
            crate::chemistry::remove_molecule(&mut cell.membrane, lid, &self.species);
            self.ledger.add(t, |r| r.ingested += 1);
        }
        self.release_foreign(slot);
        true
    }

    fn natural_death_phase(&mut self) {
        for slot in 0..self.cells.len() as u32 {
            let Some(c) = self.cells[slot as usize].as_ref() else { continue };
            let h = self.model.cell_types[c.ctype.index()].mean_lifetime.hazard();
            if h > 0.0 && self.rng.random::<f64>() < h {
                self.remove_cell(slot, DeathCause::Natural);
            }
        }
    }

    fn transfer_phase(&mut self) {
        let model = self.model.clone();
        for rule in &model.transfers {
            let (from, to) = (rule.from.0, rule.to.0);
            match rule.agent {
                AgentFilter::Molecule(t) => {
                    let grid_to = self.comps[to as usize].grid;
                    for &sp in self.species.of_type(t).to_vec().iter() {
                        let Some(Some(pool)) = self.comps[from as usize].pools.get_mut(sp as usize) else { continue };
                        let mut moved: Vec<u32> = Vec::new();
                        for s in pool.active_sites().to_vec() {
                            let k = binomial(&mut self.rng, pool.get(s), rule.rate);
                            pool.remove(s, k);
                            for _ in 0..k {
                                moved.push(self.rng.random_range(0..grid_to.len() as u32));
                            }
                        }
                        for s in moved {
                            self.comps[to as usize].pool_mut(sp).add(s, 1);
                        }
                    }
                    let mut ai = 0;
                    while ai < self.comps[from as usize].agents.len() {
                        let a = &self.comps[from as usize].agents[ai];
                        let hit = a.mols.iter().any(|m| self.species.mtype(m.species) == t);
                        if hit && self.rng.random::<f64>() < rule.rate {
                            let mut a = self.comps[from as usize].agents.remove(ai);
                            a.site = self.rng.random_range(0..grid_to.len() as u32);
                            self.comps[to as usize].agents.push(a);
                        } else {
                            ai += 1;
                        }
                    }
                }
                _ => {
                    for slot in 0..self.cells.len() as u32 {
                        let Some(c) = self.cells[slot as usize].as_ref() else { continue };
                        if c.comp != from {
                            continue;
                        }
                        let hit = match rule.agent {
                            AgentFilter::CellType(ct) => c.ctype == ct,
                            AgentFilter::Label(l) => c.label == l,
                            AgentFilter::Molecule(_) => false,
                        };
                        if !hit || !(self.rng.random::<f64>() < rule.rate) {
                            continue;
                        }
                        let Some(target) = self.random_free_site(to) else { continue };
                        self.break_contacts(slot);
                        let c = self.cells[slot as usize].as_mut().expect("live");
                        let old = c.site;
                        c.comp = to;
                        c.site = target;
                        self.comps[from as usize].occ[old as usize] = 0;
                        self.comps[to as usize].occ[target as usize] = slot + 1;
                        let who = self.cell_ref(slot);
                        self.push_event(EventBody::Transfer { who, from });
                    }
                }
            }
        }
    }

    fn random_free_site(&mut self, comp: u16) -> Option<u32> {
        let c = &self.comps[comp as usize];
        let n = c.grid.len() as u32;
        for _ in 0..32 {
            let s = self.rng.random_range(0..n);
            if c.occ[s as usize] == 0 {
                return Some(s);
            }
        }
        let free: Vec<u32> = (0..n).filter(|&s| c.occ[s as usize] == 0).collect();
        free.choose(&mut self.rng).copied()
    }

    // ---- observation -------------------------------------------------------

    pub fn census(&self) -> Census {
        let nl = self.model.labels.len();
        let nt = self.model.molecules.len();
        let mut comps: Vec<CompartmentCensus> = (0..self.comps.len())
            .map(|_| CompartmentCensus {
                cells: vec![0; nl],
                molecules: vec![0; nt],
            })
            .collect();
        for c in self.cells.iter().flatten() {
            let cc = &mut comps[c.comp as usize];
            cc.cells[c.label.index()] += 1;
            for m in c.membrane.iter().filter(|m| !m.anchored) {
                cc.molecules[self.species.mtype(m.species).index()] += 1;
            }
        }
        for (ci, c) in self.comps.iter().enumerate() {
            for (sp, p) in c.pools.iter().enumerate() {
                if let Some(p) = p {
                    comps[ci].molecules[self.species.mtype(sp as SpeciesId).index()] += p.total();
                }
            }
            for a in &c.agents {
                for m in &a.mols {
                    comps[ci].molecules[self.species.mtype(m.species).index()] += 1;
                }
            }
        }
        Census { compartments: comps }
    }

    /// Per-site count of a molecule type, including instances captured on membranes.
    pub fn molecule_field(&self, comp: usize, t: MoleculeTypeId) -> Vec<u32> {
        let c = &self.comps[comp];
        let mut f = vec![0u32; c.grid.len()];
        for &sp in self.species.of_type(t) {
            if let Some(Some(p)) = c.pools.get(sp as usize) {
                for (s, v) in f.iter_mut().enumerate() {
                    *v += p.get(s as u32);
                }
            }
        }
        for a in &c.agents {
            f[a.site as usize] += a.mols.iter().filter(|m| self.species.mtype(m.species) == t).count() as u32;
        }
        for cell in self.cells.iter().flatten().filter(|x| x.comp as usize == comp) {
            f[cell.site as usize] += cell
                .membrane
                .iter()
                .filter(|m| !m.anchored && self.species.mtype(m.species) == t)
                .count() as u32;
        }
        f
    }

    fn agent_field(&self, comp: usize, agent: AgentRef) -> Vec<u32> {
        match agent {
            AgentRef::Molecule(t) => self.molecule_field(comp, t),
            AgentRef::Cell(ct) => {
                let c = &self.comps[comp];
                (0..c.grid.len())
                    .map(|s| {
                        let occ = c.occ[s];
                        (occ > 0 && self.cells[occ as usize - 1].as_ref().is_some_and(|x| x.ctype == ct)) as u32
                    })
                    .collect()
            }
        }
    }

    /// Dense per-site counts of an agent type on one slice.
    pub fn slice(&self, comp: usize, agent: AgentRef, axis: Axis, index: u32) -> Result<Slice, EngineError> {
        let f = self.agent_field(comp, agent);
        Ok(self.comps[comp].grid.slice(axis, index, |s| f[s as usize] as f64)?)
    }

    /// Per-slice agent total divided by the number of cells in the slice
    /// (0 where a slice holds no cell).
    pub fn profile_along(&self, comp: usize, agent: AgentRef, axis: Axis) -> Vec<f64> {
        let c = &self.comps[comp];
        let a = axis.index();
        let n = c.grid.dims[a] as usize;
        let f = self.agent_field(comp, agent);
        let mut tot = vec![0f64; n];
        let mut cells = vec![0f64; n];
        for s in 0..c.grid.len() as u32 {
            let k = c.grid.coords(s)[a] as usize;
            tot[k] += f[s as usize] as f64;
            if c.occ[s as usize] > 0 {
                cells[k] += 1.0;
            }
        }
        tot.iter().zip(&cells).map(|(t, n)| if *n > 0.0 { t / n } else { 0.0 }).collect()
    }

    /// SHA-256 over the full dynamic state, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.tick.to_le_bytes());
        h.update(self.rng.get_word_pos().to_le_bytes());
        h.update(self.next_cell_id.to_le_bytes());
        h.update(self.next_agent_uid.to_le_bytes());
        for (slot, c) in self.cells.iter().enumerate() {
            let Some(c) = c else { continue };
            h.update((slot as u32).to_le_bytes());
            h.update(c.id.to_le_bytes());
            h.update(c.ctype.0.to_le_bytes());
            h.update(c.label.0.to_le_bytes());
            h.update(c.clone.to_le_bytes());
            h.update(c.comp.to_le_bytes());
            h.update(c.site.to_le_bytes());
            if let Some(rs) = &c.random_site {
                for e in rs.epitopes() {
                    h.update(e.0.to_le_bytes());
                }
            }
            for m in &c.mechs {
                h.update(m.id.0.to_le_bytes());
                h.update(m.since.to_le_bytes());
            }
            hash_mols(&mut h, &c.membrane, &self.species);
            for e in &c.ingested {
                h.update(e.0.to_le_bytes());
            }
        }
        for c in &self.comps {
            for (sp, p) in c.pools.iter().enumerate() {
                let Some(p) = p else { continue };
                let key = self.species.get(sp as SpeciesId);
                h.update(format!("{key:?}").as_bytes());
                for s in 0..c.grid.len() as u32 {
                    let n = p.get(s);
                    if n > 0 {
                        h.update(s.to_le_bytes());
                        h.update(n.to_le_bytes());
                    }
                }
            }
            for a in &c.agents {
                h.update(a.uid.to_le_bytes());
                h.update(a.site.to_le_bytes());
                hash_mols(&mut h, &a.mols, &self.species);
            }
        }
        hex::encode(h.finalize())
    }

    /// Cells and their surface state for invariant checks.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = vec![Vec::new(); self.comps.len()];
        for (ci, c) in self.comps.iter().enumerate() {
            seen[ci] = vec![false; c.grid.len()];
        }
        for (slot, c) in self.cells.iter().enumerate() {
            let Some(c) = c else { continue };
            let comp = &self.comps[c.comp as usize];
            if c.site as usize >= comp.grid.len() {
                return Err(format!("cell {} outside its compartment", c.id));
            }
            if comp.occ[c.site as usize] != slot as u32 + 1 {
                return Err(format!("cell {} not registered at its site", c.id));
            }
            if std::mem::replace(&mut seen[c.comp as usize][c.site as usize], true) {
                return Err(format!("two cells at site {}", c.site));
            }
            for m in &c.membrane {
                let surfaces = self.species.surfaces(m.species);
                let mut occ = 0u16;
                for b in &m.bonds {
                    let mask = surfaces[b.surface as usize].mask;
                    if occ & mask != 0 {
                        return Err(format!("epitope in two bonds on cell {}", c.id));
                    }
                    occ |= mask;
                    let ok = match b.peer {
                        Peer::Local(l) => find_lid(&c.membrane, l).is_some_and(|j| {
                            c.membrane[j].bonds.iter().any(|x| x.peer == Peer::Local(m.lid) && x.surface == b.peer_surface)
                        }),
                        Peer::Contact { slot: t, lid } => self.cells[t as usize].as_ref().is_some_and(|o| {
                            find_lid(&o.membrane, lid).is_some_and(|j| {
                                o.membrane[j].bonds.iter().any(|x| {
                                    x.peer == Peer::Contact { slot: slot as u32, lid: m.lid } && x.surface == b.peer_surface
                                })
                            }) && comp.grid.neighbor(c.site, m.side as usize) == Some(o.site)
                                && o.comp == c.comp
                        }),
                    };
                    if !ok {
                        return Err(format!("dangling bond on cell {}", c.id));
                    }
                }
                if occ != m.occupied {
                    return Err(format!("occupancy mask out of sync on cell {}", c.id));
                }
            }
        }
        for (ci, c) in self.comps.iter().enumerate() {
            for (s, &o) in c.occ.iter().enumerate() {
                if o != 0 && !seen[ci][s] {
                    return Err(format!("stale occupancy at site {s}"));
                }
            }
        }
        Ok(())
    }
}

fn hash_mols(h: &mut Sha256, mols: &[Molecule], species: &SpeciesTable) {
    for m in mols {
        h.update(m.lid.to_le_bytes());
        h.update(format!("{:?}", species.get(m.species)).as_bytes());
        h.update([m.side, m.anchored as u8]);
        h.update(m.occupied.to_le_bytes());
        for b in &m.bonds {
            h.update([b.surface, b.peer_surface]);
            match b.peer {
                Peer::Local(l) => h.update(l.to_le_bytes()),
                Peer::Contact { slot, lid } => {
                    h.update(slot.to_le_bytes());
                    h.update(lid.to_le_bytes());
                }
            }
            h.update(b.since.to_le_bytes());
        }
    }
}

#[inline]
fn side_bits(mut f: impl FnMut(usize) -> bool) -> u8 {
    let mut b = 0;
    for d in 0..6 {
        if f(d) {
            b |= 1 << d;
        }
    }
    b
}
