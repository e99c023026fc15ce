//! Molecular species, explicit molecule instances and their bonds, plus the
//! per-tick binding, unbinding and decay passes over the world.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::engine::{BondEvent, BondEventKind, Event, EventBody, World};
use crate::lattice::{binomial, opposite};
use crate::model::*;
use crate::scenario::Model;

pub type SpeciesId = u32;

/// A molecule type plus the per-instance epitopes that make otherwise equal
/// molecules behave differently.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Species {
    pub mtype: MoleculeTypeId,
    pub clonal: Option<BindingSite>,
    pub presented: Option<Epitope>,
}

impl Species {
    pub fn plain(mtype: MoleculeTypeId) -> Self {
        Self {
            mtype,
            clonal: None,
            presented: None,
        }
    }
}

/// A set of epitope slots that binds as one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub mask: u16,
    pub epitopes: SmallVec<[Epitope; 2]>,
}

/// One way two species can bind: surface `a` of the first with surface `b`
/// of the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: u8,
    pub b: u8,
    pub rates: PairRates,
}

#[derive(Debug, Clone)]
pub struct SpeciesTable {
    list: Vec<Species>,
    index: HashMap<Species, SpeciesId>,
    surfaces: Vec<Vec<Surface>>,
    reactive: Vec<bool>,
    hazard: Vec<f64>,
    by_type: Vec<Vec<SpeciesId>>,
    cache: Vec<Vec<Option<Arc<[Match]>>>>,
    has_partner: Vec<bool>,
}

impl SpeciesTable {
    pub fn new(model: &Model) -> Self {
        let u = model.affinity.universe() as usize;
        let mut has_partner = vec![false; u];
        for (a, b, _) in model.affinity.pairs() {
            has_partner[a.0 as usize] = true;
            has_partner[b.0 as usize] = true;
        }
        Self {
            list: Vec::new(),
            index: HashMap::new(),
            surfaces: Vec::new(),
            reactive: Vec::new(),
            hazard: Vec::new(),
            by_type: vec![Vec::new(); model.molecules.len()],
            cache: Vec::new(),
            has_partner,
        }
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn get(&self, id: SpeciesId) -> &Species {
        &self.list[id as usize]
    }

    pub fn of_type(&self, t: MoleculeTypeId) -> &[SpeciesId] {
        &self.by_type[t.index()]
    }

    #[inline]
    pub fn mtype(&self, id: SpeciesId) -> MoleculeTypeId {
        self.list[id as usize].mtype
    }

    /// Reactive species are tracked as explicit instances; the rest as counts.
    #[inline]
    pub fn reactive(&self, id: SpeciesId) -> bool {
        self.reactive[id as usize]
    }

    #[inline]
    pub fn hazard(&self, id: SpeciesId) -> f64 {
        self.hazard[id as usize]
    }

    #[inline]
    pub fn surfaces(&self, id: SpeciesId) -> &[Surface] {
        &self.surfaces[id as usize]
    }

    pub fn intern(&mut self, sp: Species, model: &Model) -> SpeciesId {
        if let Some(&id) = self.index.get(&sp) {
            return id;
        }
        let t = &model.molecules[sp.mtype.index()];
        let mut surfaces = Vec::new();
        let mut slot = 0u32;
        for &e in &t.epitopes {
            surfaces.push(Surface {
                mask: 1 << slot,
                epitopes: SmallVec::from_slice(&[e]),
            });
            slot += 1;
        }
        for site in &t.binding_sites {
            let mut mask = 0u16;
            for _ in 0..site.arity() {
                mask |= 1 << slot;
                slot += 1;
            }
            surfaces.push(Surface {
                mask,
                epitopes: site.0.clone(),
            });
        }
        if t.presentation_slot {
            if let (Some(p), Some(&own)) = (sp.presented, t.epitopes.first()) {
                surfaces.push(Surface {
                    mask: 1 | (1 << slot),
                    epitopes: SmallVec::from_slice(&[own, p]),
                });
            }
            slot += 1;
        }
        if t.clonal_site {
            if let Some(site) = &sp.clonal {
                let mut mask = 0u16;
                for _ in 0..site.arity() {
                    mask |= 1 << slot;
                    slot += 1;
                }
                surfaces.push(Surface {
                    mask,
                    epitopes: site.0.clone(),
                });
            }
        }
        debug_assert!(slot <= 16);
        let reactive = surfaces.iter().any(|s| {
            s.epitopes
                .iter()
                .all(|e| self.has_partner.get(e.0 as usize).copied().unwrap_or(false))
        });
        let id = self.list.len() as SpeciesId;
        self.by_type[sp.mtype.index()].push(id);
        self.index.insert(sp.clone(), id);
        self.list.push(sp);
        self.surfaces.push(surfaces);
        self.reactive.push(reactive);
        self.hazard.push(t.mean_lifetime.hazard());
        id
    }

    /// All surface pairings between two species, cached.
    pub fn matches(&mut self, a: SpeciesId, b: SpeciesId, table: &AffinityTable) -> Arc<[Match]> {
        let (ai, bi) = (a as usize, b as usize);
        if self.cache.len() <= ai {
            self.cache.resize(ai + 1, Vec::new());
        }
        if self.cache[ai].len() <= bi {
            self.cache[ai].resize(bi + 1, None);
        }
        if let Some(m) = &self.cache[ai][bi] {
            return m.clone();
        }
        let mut out = Vec::new();
        for (i, sa) in self.surfaces[ai].iter().enumerate() {
            for (j, sb) in self.surfaces[bi].iter().enumerate() {
                if let Some(rates) = surface_rates(table, &sa.epitopes, &sb.epitopes) {
                    out.push(Match {
                        a: i as u8,
                        b: j as u8,
                        rates,
                    });
                }
            }
        }
        let arc: Arc<[Match]> = out.into();
        self.cache[ai][bi] = Some(arc.clone());
        arc
    }
}

/// Where the other end of a bond lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Peer {
    /// Same membrane or same soluble complex.
    Local(u32),
    /// Membrane of the adjacent cell in slab slot `slot`.
    Contact { slot: u32, lid: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub surface: u8,
    pub peer: Peer,
    pub peer_surface: u8,
    pub since: u64,
    pub unbind: f64,
}

/// One explicit molecule instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    pub lid: u32,
    pub species: SpeciesId,
    /// Membrane side (0..6); unused inside soluble complexes.
    pub side: u8,
    /// Expressed by the cell it sits on, as opposed to captured from the milieu.
    pub anchored: bool,
    pub occupied: u16,
    pub bonds: SmallVec<[Bond; 2]>,
}

impl Molecule {
    pub fn new(lid: u32, species: SpeciesId, side: u8, anchored: bool) -> Self {
        Self {
            lid,
            species,
            side,
            anchored,
            occupied: 0,
            bonds: SmallVec::new(),
        }
    }

    #[inline]
    pub fn is_free(&self, mask: u16) -> bool {
        self.occupied & mask == 0
    }
}

#[inline]
pub(crate) fn find_lid(mols: &[Molecule], lid: u32) -> Option<usize> {
    mols.iter().position(|m| m.lid == lid)
}

/// Soluble molecule or complex tracked explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub uid: u64,
    pub site: u32,
    pub mols: SmallVec<[Molecule; 2]>,
    pub next_lid: u32,
}

/// Connected components over local bonds, as index lists in first-seen order.
pub fn local_components(mols: &[Molecule]) -> Vec<Vec<usize>> {
    let n = mols.len();
    let mut comp = vec![usize::MAX; n];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut k = 0;
        while k < members.len() {
            let i = members[k];
            k += 1;
            for b in &mols[i].bonds {
                if let Peer::Local(l) = b.peer {
                    if let Some(j) = find_lid(mols, l) {
                        if comp[j] == usize::MAX {
                            comp[j] = id;
                            members.push(j);
                        }
                    }
                }
            }
        }
        out.push(members);
    }
    out
}

/// Pattern counts for one membrane side, keyed by the name-sorted member types.
pub type SideSummary = SmallVec<[(SmallVec<[MoleculeTypeId; 4]>, u32); 4]>;

/// Per-side complex counts of a cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceSummary {
    pub sides: [SideSummary; 6],
}

impl SurfaceSummary {
    pub fn count_on(&self, side: usize, p: &Pattern) -> u32 {
        self.sides[side]
            .iter()
            .find(|(k, _)| p.matches(k))
            .map(|e| e.1)
            .unwrap_or(0)
    }

    pub fn total(&self, p: &Pattern) -> u32 {
        (0..6).map(|s| self.count_on(s, p)).sum()
    }

    /// Readable `pattern -> count` map for one side.
    pub fn named(&self, side: usize, model: &Model) -> std::collections::BTreeMap<String, u32> {
        self.sides[side]
            .iter()
            .map(|(k, c)| {
                let names: Vec<&str> = k.iter().map(|t| model.molecules[t.index()].name.as_str()).collect();
                (names.join(":"), *c)
            })
            .collect()
    }
}

/// Reference to a molecule during the chemistry pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Holder {
    Cell(u32),
    Agent(u16, u64),
}

#[derive(Debug, Clone, Copy)]
struct Opportunity {
    a: (Holder, u32),
    b: (Holder, u32),
    m: Match,
}

impl World {
    /// Every maximal complex touching each side of the cell in `slot`,
    /// following contact bonds into neighbouring membranes.
    pub fn surface_summary(&self, slot: u32) -> SurfaceSummary {
        let mut out = SurfaceSummary::default();
        let Some(cell) = self.cells[slot as usize].as_ref() else {
            return out;
        };
        let mut seen: SmallVec<[(u32, u32); 16]> = SmallVec::new();
        let mut queue: SmallVec<[(u32, u32); 8]> = SmallVec::new();
        for m in &cell.membrane {
            if seen.contains(&(slot, m.lid)) {
                continue;
            }
            let mut members: SmallVec<[MoleculeTypeId; 4]> = SmallVec::new();
            queue.clear();
            queue.push((slot, m.lid));
            seen.push((slot, m.lid));
            while let Some((s, lid)) = queue.pop() {
                let Some(c) = self.cells[s as usize].as_ref() else { continue };
                let Some(i) = find_lid(&c.membrane, lid) else { continue };
                let mol = &c.membrane[i];
                members.push(self.species.mtype(mol.species));
                for b in &mol.bonds {
                    let next = match b.peer {
                        Peer::Local(l) => (s, l),
                        Peer::Contact { slot, lid } => (slot, lid),
                    };
                    if !seen.contains(&next) {
                        seen.push(next);
                        queue.push(next);
                    }
                }
            }
            let rank = &self.type_rank;
            members.sort_by_key(|t| (rank[t.index()], t.0));
            let side = &mut out.sides[m.side as usize];
            match side.iter_mut().find(|(k, _)| *k == members) {
                Some(e) => e.1 += 1,
                None => side.push((members, 1)),
            }
        }
        out
    }

    /// Soluble molecules on `side` bonded to at least two receptors of `receptor`.
    pub fn detect_crosslinks(&self, slot: u32, receptor: MoleculeTypeId, side: usize) -> u32 {
        let Some(cell) = self.cells[slot as usize].as_ref() else {
            return 0;
        };
        let mut n = 0;
        for m in cell.membrane.iter().filter(|m| !m.anchored && m.side as usize == side) {
            let partners = m
                .bonds
                .iter()
                .filter(|b| match b.peer {
                    Peer::Local(l) => find_lid(&cell.membrane, l)
                        .map(|j| {
                            let p = &cell.membrane[j];
                            p.anchored && self.species.mtype(p.species) == receptor
                        })
                        .unwrap_or(false),
                    Peer::Contact { .. } => false,
                })
                .count();
            if partners >= 2 {
                n += 1;
            }
        }
        n
    }

    /// Bind then unbind on every site, against the start-of-pass state.
    pub(crate) fn chemistry_phase(&mut self) {
        let opps = self.collect_opportunities();
        if !opps.is_empty() {
            self.bind_pass(opps);
        }
        self.unbind_pass();
    }

    fn collect_opportunities(&mut self) -> Vec<Opportunity> {
        let mut opps = Vec::new();
        let model = self.model.clone();
        let table = &model.affinity;
        for ci in 0..self.comps.len() {
            // agents grouped by site, in agent order
            let mut by_site: Vec<(u32, usize)> = self.comps[ci]
                .agents
                .iter()
                .enumerate()
                .map(|(i, a)| (a.site, i))
                .collect();
            by_site.sort_unstable();
            let mut k = 0;
            while k < by_site.len() {
                let site = by_site[k].0;
                let mut e = k;
                while e < by_site.len() && by_site[e].0 == site {
                    e += 1;
                }
                let group: SmallVec<[usize; 8]> = by_site[k..e].iter().map(|p| p.1).collect();
                k = e;
                // soluble with soluble
                for x in 0..group.len() {
                    for y in x + 1..group.len() {
                        let (ax, ay) = (&self.comps[ci].agents[group[x]], &self.comps[ci].agents[group[y]]);
                        for ma in &ax.mols {
                            for mb in &ay.mols {
                                for m in self.species.matches(ma.species, mb.species, table).iter() {
                                    if self.surface_free(ma, m.a) && self.surface_free(mb, m.b) {
                                        opps.push(Opportunity {
                                            a: (Holder::Agent(ci as u16, ax.uid), ma.lid),
                                            b: (Holder::Agent(ci as u16, ay.uid), mb.lid),
                                            m: *m,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
                // soluble with the resident membrane, one random side per agent
                let occ = self.comps[ci].occ[site as usize];
                if occ == 0 {
                    continue;
                }
                let slot = occ - 1;
                for &gi in &group {
                    let side = self.rng.random_range(0..6u8);
                    let agent = &self.comps[ci].agents[gi];
                    let cell = self.cells[slot as usize].as_ref().expect("occupant");
                    for ma in &agent.mols {
                        for mb in cell.membrane.iter().filter(|m| m.side == side) {
                            for m in self.species.matches(ma.species, mb.species, table).iter() {
                                if self.surface_free(ma, m.a) && self.surface_free(mb, m.b) {
                                    opps.push(Opportunity {
                                        a: (Holder::Agent(ci as u16, agent.uid), ma.lid),
                                        b: (Holder::Cell(slot), mb.lid),
                                        m: *m,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        // membranes: within a side, and across facing sides of adjacent cells
        for slot in 0..self.cells.len() as u32 {
            let Some(cell) = self.cells[slot as usize].as_ref() else { continue };
            if cell.membrane.is_empty() {
                continue;
            }
            let mem = &cell.membrane;
            for i in 0..mem.len() {
                for j in i + 1..mem.len() {
                    let (x, y) = (&mem[i], &mem[j]);
                    if x.side != y.side || (x.anchored && y.anchored) {
                        continue;
                    }
                    for m in self.species.matches(x.species, y.species, table).iter() {
                        if self.surface_free(x, m.a) && self.surface_free(y, m.b) {
                            opps.push(Opportunity {
                                a: (Holder::Cell(slot), x.lid),
                                b: (Holder::Cell(slot), y.lid),
                                m: *m,
                            });
                        }
                    }
                }
            }
            let grid = self.comps[cell.comp as usize].grid;
            for d in [0usize, 2, 4] {
                let Some(n) = grid.neighbor(cell.site, d) else { continue };
                let occ = self.comps[cell.comp as usize].occ[n as usize];
                if occ == 0 {
                    continue;
                }
                let other_slot = occ - 1;
                let other = self.cells[other_slot as usize].as_ref().expect("occupant");
                for x in mem.iter().filter(|m| m.anchored && m.side as usize == d) {
                    for y in other
                        .membrane
                        .iter()
                        .filter(|m| m.anchored && m.side as usize == opposite(d))
                    {
                        for m in self.species.matches(x.species, y.species, table).iter() {
                            if self.surface_free(x, m.a) && self.surface_free(y, m.b) {
                                opps.push(Opportunity {
                                    a: (Holder::Cell(slot), x.lid),
                                    b: (Holder::Cell(other_slot), y.lid),
                                    m: *m,
                                });
                            }
                        }
                    }
                }
            }
        }
        opps
    }

    #[inline]
    fn surface_free(&self, m: &Molecule, surface: u8) -> bool {
        m.is_free(self.species.surfaces(m.species)[surface as usize].mask)
    }

    fn bind_pass(&mut self, mut opps: Vec<Opportunity>) {
        opps.shuffle(&mut self.rng);
        // agent uid -> index, per compartment
        let mut agent_index: Vec<HashMap<u64, usize>> = self
            .comps
            .iter()
            .map(|c| c.agents.iter().enumerate().map(|(i, a)| (a.uid, i)).collect())
            .collect();
        // merged agents: uid -> (new holder, lid offset)
        let mut moved: HashMap<(u16, u64), (Holder, u32)> = HashMap::new();
        let mut dead: Vec<Vec<usize>> = vec![Vec::new(); self.comps.len()];
        let resolve = |moved: &HashMap<(u16, u64), (Holder, u32)>, mut h: Holder, mut lid: u32| loop {
            match h {
                Holder::Agent(c, uid) => match moved.get(&(c, uid)) {
                    Some(&(nh, off)) => {
                        h = nh;
                        lid += off;
                    }
                    None => return (h, lid),
                },
                Holder::Cell(_) => return (h, lid),
            }
        };
        for op in opps {
            let (ha, la) = resolve(&moved, op.a.0, op.a.1);
            let (hb, lb) = resolve(&moved, op.b.0, op.b.1);
            if ha == hb && la == lb {
                continue;
            }
            let (Some(sa), Some(sb)) = (
                self.holder_species(&agent_index, ha, la),
                self.holder_species(&agent_index, hb, lb),
            ) else {
                continue;
            };
            let mask_a = self.species.surfaces(sa.0)[op.m.a as usize].mask;
            let mask_b = self.species.surfaces(sb.0)[op.m.b as usize].mask;
            if sa.1 & mask_a != 0 || sb.1 & mask_b != 0 {
                continue;
            }
            if !(self.rng.random::<f64>() < op.m.rates.bind) {
                continue;
            }
            // bring both molecules into one holder unless this is a cell-cell contact
            let (ha, la, hb, lb) = match (ha, hb) {
                (Holder::Agent(..), Holder::Cell(_)) => {
                    let side = self.holder_side(&agent_index, hb, lb);
                    let off = self.merge_agent_into_cell(&agent_index, ha, hb, side, &mut dead);
                    moved.insert(agent_key(ha), (hb, off));
                    (hb, la + off, hb, lb)
                }
                (Holder::Cell(_), Holder::Agent(..)) => {
                    let side = self.holder_side(&agent_index, ha, la);
                    let off = self.merge_agent_into_cell(&agent_index, hb, ha, side, &mut dead);
                    moved.insert(agent_key(hb), (ha, off));
                    (ha, la, ha, lb + off)
                }
                (Holder::Agent(..), Holder::Agent(..)) if ha != hb => {
                    let off = self.merge_agent_into_agent(&mut agent_index, hb, ha, &mut dead);
                    moved.insert(agent_key(hb), (ha, off));
                    (ha, la, ha, lb + off)
                }
                _ => (ha, la, hb, lb),
            };
            let peer_of = |h: Holder, other: Holder, lid: u32| -> Peer {
                match (h, other) {
                    (Holder::Cell(s), Holder::Cell(t)) if s != t => Peer::Contact { slot: t, lid },
                    _ => Peer::Local(lid),
                }
            };
            let unbind = op.m.rates.unbind;
            let tick = self.tick;
            let ba = Bond {
                surface: op.m.a,
                peer: peer_of(ha, hb, lb),
                peer_surface: op.m.b,
                since: tick,
                unbind,
            };
            let bb = Bond {
                surface: op.m.b,
                peer: peer_of(hb, ha, la),
                peer_surface: op.m.a,
                since: tick,
                unbind,
            };
            self.with_molecule(&agent_index, ha, la, |m| {
                m.occupied |= mask_a;
                m.bonds.push(ba);
            });
            self.with_molecule(&agent_index, hb, lb, |m| {
                m.occupied |= mask_b;
                m.bonds.push(bb);
            });
            if self.log_bonds {
                let (ta, tb) = (self.species.mtype(sa.0), self.species.mtype(sb.0));
                self.emit_bond(BondEventKind::Bind, ha, ta, Some(tb), &agent_index);
            }
        }
        for (ci, mut d) in dead.into_iter().enumerate() {
            if d.is_empty() {
                continue;
            }
            d.sort_unstable();
            d.dedup();
            let agents = &mut self.comps[ci].agents;
            for &i in d.iter().rev() {
                agents.remove(i);
            }
        }
    }

    fn holder_species(&self, idx: &[HashMap<u64, usize>], h: Holder, lid: u32) -> Option<(SpeciesId, u16)> {
        let mols: &[Molecule] = match h {
            Holder::Cell(s) => &self.cells[s as usize].as_ref()?.membrane,
            Holder::Agent(c, uid) => &self.comps[c as usize].agents[*idx[c as usize].get(&uid)?].mols,
        };
        let i = find_lid(mols, lid)?;
        Some((mols[i].species, mols[i].occupied))
    }

    fn holder_side(&self, idx: &[HashMap<u64, usize>], h: Holder, lid: u32) -> u8 {
        self.holder_species(idx, h, lid)
            .and_then(|_| match h {
                Holder::Cell(s) => {
                    let c = self.cells[s as usize].as_ref()?;
                    Some(c.membrane[find_lid(&c.membrane, lid)?].side)
                }
                Holder::Agent(..) => None,
            })
            .unwrap_or(0)
    }

    fn with_molecule(&mut self, idx: &[HashMap<u64, usize>], h: Holder, lid: u32, f: impl FnOnce(&mut Molecule)) {
        let mols: &mut [Molecule] = match h {
            Holder::Cell(s) => &mut self.cells[s as usize].as_mut().expect("live cell").membrane,
            Holder::Agent(c, uid) => &mut self.comps[c as usize].agents[idx[c as usize][&uid]].mols,
        };
        let i = find_lid(mols, lid).expect("molecule present");
        f(&mut mols[i]);
    }

    /// Moves an agent's molecules onto a membrane side; returns the lid offset.
    fn merge_agent_into_cell(
        &mut self,
        idx: &[HashMap<u64, usize>],
        agent: Holder,
        cell: Holder,
        side: u8,
        dead: &mut [Vec<usize>],
    ) -> u32 {
        let (Holder::Agent(c, uid), Holder::Cell(slot)) = (agent, cell) else {
            unreachable!()
        };
        let ai = idx[c as usize][&uid];
        let mols = std::mem::take(&mut self.comps[c as usize].agents[ai].mols);
        let span = self.comps[c as usize].agents[ai].next_lid;
        dead[c as usize].push(ai);
        let cellref = self.cells[slot as usize].as_mut().expect("live cell");
        let off = cellref.next_lid;
        cellref.next_lid += span;
        for mut m in mols {
            m.lid += off;
            m.side = side;
            m.anchored = false;
            for b in m.bonds.iter_mut() {
                if let Peer::Local(l) = &mut b.peer {
                    *l += off;
                }
            }
            cellref.membrane.push(m);
        }
        off
    }

    fn merge_agent_into_agent(
        &mut self,
        idx: &mut [HashMap<u64, usize>],
        from: Holder,
        into: Holder,
        dead: &mut [Vec<usize>],
    ) -> u32 {
        let (Holder::Agent(c, uf), Holder::Agent(_, ui)) = (from, into) else {
            unreachable!()
        };
        let fi = idx[c as usize][&uf];
        let ii = idx[c as usize][&ui];
        let mols = std::mem::take(&mut self.comps[c as usize].agents[fi].mols);
        let span = self.comps[c as usize].agents[fi].next_lid;
        dead[c as usize].push(fi);
        let target = &mut self.comps[c as usize].agents[ii];
        let off = target.next_lid;
        target.next_lid += span;
        for mut m in mols {
            m.lid += off;
            for b in m.bonds.iter_mut() {
                if let Peer::Local(l) = &mut b.peer {
                    *l += off;
                }
            }
            target.mols.push(m);
        }
        off
    }

    fn emit_bond(
        &mut self,
        kind: BondEventKind,
        h: Holder,
        a: MoleculeTypeId,
        b: Option<MoleculeTypeId>,
        _idx: &[HashMap<u64, usize>],
    ) {
        let (comp, site) = match h {
            Holder::Cell(s) => {
                let c = self.cells[s as usize].as_ref().expect("live cell");
                (c.comp, c.site)
            }
            Holder::Agent(c, uid) => {
                let site = self.comps[c as usize]
                    .agents
                    .iter()
                    .find(|x| x.uid == uid)
                    .map(|x| x.site)
                    .unwrap_or(0);
                (c, site)
            }
        };
        self.bond_event(kind, comp, site, a, b);
    }

    pub(crate) fn bond_event(&mut self, kind: BondEventKind, comp: u16, site: u32, a: MoleculeTypeId, b: Option<MoleculeTypeId>) {
        if !self.log_bonds {
            return;
        }
        let pos = self.comps[comp as usize].grid.coords(site);
        self.push_event(EventBody::Bond(BondEvent {
            kind,
            comp,
            pos,
            a,
            b,
        }));
    }

    fn unbind_pass(&mut self) {
        let tick = self.tick;
        // membranes
        let mut touched: Vec<u32> = Vec::new();
        let mut breaks: Vec<(u32, u32, Bond)> = Vec::new();
        for slot in 0..self.cells.len() as u32 {
            let Some(cell) = self.cells[slot as usize].as_ref() else { continue };
            for m in &cell.membrane {
                for b in &m.bonds {
                    if b.since >= tick {
                        continue;
                    }
                    let owner = match b.peer {
                        Peer::Local(l) => m.lid < l,
                        Peer::Contact { slot: t, .. } => slot < t,
                    };
                    if owner {
                        breaks.push((slot, m.lid, *b));
                    }
                }
            }
        }
        for (slot, lid, b) in breaks {
            if !(self.rng.random::<f64>() < b.unbind) {
                continue;
            }
            let types = self.break_cell_bond(slot, lid, &b);
            touched.push(slot);
            if let Peer::Contact { slot: t, .. } = b.peer {
                touched.push(t);
            }
            if self.log_bonds {
                let c = self.cells[slot as usize].as_ref().expect("live");
                let (comp, site) = (c.comp, c.site);
                self.bond_event(BondEventKind::Unbind, comp, site, types.0, Some(types.1));
            }
        }
        touched.sort_unstable();
        touched.dedup();
        for slot in touched {
            self.release_foreign(slot);
        }
        // soluble complexes
        for ci in 0..self.comps.len() {
            let mut split: Vec<usize> = Vec::new();
            for ai in 0..self.comps[ci].agents.len() {
                if self.comps[ci].agents[ai].mols.len() < 2 {
                    continue;
                }
                let mut todo: SmallVec<[(u32, Bond); 4]> = SmallVec::new();
                for m in &self.comps[ci].agents[ai].mols {
                    for b in &m.bonds {
                        if let Peer::Local(l) = b.peer {
                            if b.since < tick && m.lid < l {
                                todo.push((m.lid, *b));
                            }
                        }
                    }
                }
                let mut any = false;
                for (lid, b) in todo {
                    if self.rng.random::<f64>() < b.unbind {
                        let site = self.comps[ci].agents[ai].site;
                        let mols = &mut self.comps[ci].agents[ai].mols;
                        let (ta, tb) = break_local(mols, lid, &b, &self.species);
                        any = true;
                        if self.log_bonds {
                            self.bond_event(BondEventKind::Unbind, ci as u16, site, ta, Some(tb));
                        }
                    }
                }
                if any {
                    split.push(ai);
                }
            }
            for ai in split.into_iter().rev() {
                self.split_agent(ci, ai);
            }
        }
    }

    /// Removes one bond (both ends). Returns the two molecule types.
    fn break_cell_bond(&mut self, slot: u32, lid: u32, b: &Bond) -> (MoleculeTypeId, MoleculeTypeId) {
        match b.peer {
            Peer::Local(_) => {
                let cell = self.cells[slot as usize].as_mut().expect("live");
                break_local(&mut cell.membrane, lid, b, &self.species)
            }
            Peer::Contact { slot: t, lid: plid } => {
                let ta = clear_bond(
                    &mut self.cells[slot as usize].as_mut().expect("live").membrane,
                    lid,
                    b.surface,
                    &self.species,
                );
                let tb = clear_bond(
                    &mut self.cells[t as usize].as_mut().expect("live").membrane,
                    plid,
                    b.peer_surface,
                    &self.species,
                );
                (ta, tb)
            }
        }
    }

    /// Drops every contact bond of the cell in `slot` (it moved or died).
    pub(crate) fn break_contacts(&mut self, slot: u32) {
        let Some(cell) = self.cells[slot as usize].as_mut() else { return };
        let mut remote: SmallVec<[(u32, u32, u8); 8]> = SmallVec::new();
        for m in cell.membrane.iter_mut() {
            let species = &self.species;
            m.bonds.retain(|b| match b.peer {
                Peer::Contact { slot: t, lid } => {
                    remote.push((t, lid, b.peer_surface));
                    false
                }
                Peer::Local(_) => true,
            });
            let mut occ = 0u16;
            for b in &m.bonds {
                occ |= species.surfaces(m.species)[b.surface as usize].mask;
            }
            m.occupied = occ;
        }
        for (t, lid, surface) in remote {
            if let Some(other) = self.cells[t as usize].as_mut() {
                clear_bond(&mut other.membrane, lid, surface, &self.species);
            }
        }
    }

    /// Foreign molecules no longer tied to an expressed one leave the membrane
    /// as soluble agents at the cell's site.
    pub(crate) fn release_foreign(&mut self, slot: u32) {
        let Some(cell) = self.cells[slot as usize].as_mut() else { return };
        if cell.membrane.iter().all(|m| m.anchored) {
            return;
        }
        let comps = local_components(&cell.membrane);
        let mut release: Vec<Vec<usize>> = Vec::new();
        for c in comps {
            if c.iter().all(|&i| !cell.membrane[i].anchored) {
                release.push(c);
            }
        }
        if release.is_empty() {
            return;
        }
        let (comp, site) = (cell.comp, cell.site);
        let mut taken: Vec<Option<Molecule>> = cell.membrane.drain(..).map(Some).collect();
        let mut groups: Vec<SmallVec<[Molecule; 2]>> = Vec::new();
        for c in &release {
            groups.push(c.iter().map(|&i| taken[i].take().expect("once")).collect());
        }
        cell.membrane = taken.into_iter().flatten().collect();
        for g in groups {
            self.push_agent(comp, site, g);
        }
    }

    /// New soluble agent from already-bonded molecules (lids renumbered).
    pub(crate) fn push_agent(&mut self, comp: u16, site: u32, mut mols: SmallVec<[Molecule; 2]>) {
        let mut map: SmallVec<[(u32, u32); 4]> = SmallVec::new();
        for (i, m) in mols.iter_mut().enumerate() {
            map.push((m.lid, i as u32));
            m.lid = i as u32;
            m.side = 0;
        }
        for m in mols.iter_mut() {
            for b in m.bonds.iter_mut() {
                if let Peer::Local(l) = &mut b.peer {
                    *l = map.iter().find(|p| p.0 == *l).map(|p| p.1).expect("closed component");
                }
            }
        }
        let uid = self.next_agent_uid;
        self.next_agent_uid += 1;
        let n = mols.len() as u32;
        self.comps[comp as usize].agents.push(Agent {
            uid,
            site,
            mols,
            next_lid: n,
        });
    }

    /// Splits a soluble complex into its connected parts.
    fn split_agent(&mut self, ci: usize, ai: usize) {
        let comps = local_components(&self.comps[ci].agents[ai].mols);
        if comps.len() < 2 {
            return;
        }
        let agent = self.comps[ci].agents.remove(ai);
        let mut taken: Vec<Option<Molecule>> = agent.mols.into_iter().map(Some).collect();
        for c in comps {
            let g: SmallVec<[Molecule; 2]> = c.iter().map(|&i| taken[i].take().expect("once")).collect();
            self.push_agent(ci as u16, agent.site, g);
        }
    }

    /// Adds fresh soluble molecules of one species at a site.
    pub(crate) fn add_soluble(&mut self, comp: u16, site: u32, species: SpeciesId, n: u32) {
        if n == 0 {
            return;
        }
        if self.species.reactive(species) {
            for _ in 0..n {
                let mut v = SmallVec::new();
                v.push(Molecule::new(0, species, 0, false));
                self.push_agent(comp, site, v);
            }
        } else {
            self.comps[comp as usize].pool_mut(species).add(site, n);
        }
    }

    fn add_fragments(&mut self, comp: u16, site: u32, t: MoleculeTypeId, n: u32) {
        let model = self.model.clone();
        for &f in &model.molecules[t.index()].fragments {
            let sp = self.species.intern(Species::plain(f), &model);
            self.add_soluble(comp, site, sp, n);
            self.ledger.add(f, |r| r.fragments += n as u64);
        }
    }

    /// Molecule decay: pools, soluble agents and membranes.
    pub(crate) fn decay_phase(&mut self) {
        let model = self.model.clone();
        for ci in 0..self.comps.len() {
            for sp in 0..self.comps[ci].pools.len() {
                let h = self.species.hazard(sp as SpeciesId);
                if h <= 0.0 || self.comps[ci].pools[sp].is_none() {
                    continue;
                }
                let t = self.species.mtype(sp as SpeciesId);
                let sites = self.comps[ci].pools[sp].as_mut().expect("pool").active_sites().to_vec();
                let mut decayed: Vec<(u32, u32)> = Vec::new();
                {
                    let pool = self.comps[ci].pools[sp].as_mut().expect("pool");
                    for s in sites {
                        let k = binomial(&mut self.rng, pool.get(s), h);
                        if k > 0 {
                            pool.remove(s, k);
                            decayed.push((s, k));
                        }
                    }
                }
                for (s, k) in decayed {
                    self.ledger.add(t, |r| r.decayed += k as u64);
                    if !model.molecules[t.index()].fragments.is_empty() {
                        self.add_fragments(ci as u16, s, t, k);
                    }
                    if self.log_bonds {
                        for _ in 0..k {
                            self.bond_event(BondEventKind::Decay, ci as u16, s, t, None);
                        }
                    }
                }
            }
            // soluble agents
            let mut ai = 0;
            while ai < self.comps[ci].agents.len() {
                let mut victims: SmallVec<[u32; 2]> = SmallVec::new();
                for m in &self.comps[ci].agents[ai].mols {
                    let h = self.species.hazard(m.species);
                    if h > 0.0 && self.rng.random::<f64>() < h {
                        victims.push(m.lid);
                    }
                }
                if victims.is_empty() {
                    ai += 1;
                    continue;
                }
                let site = self.comps[ci].agents[ai].site;
                for lid in victims {
                    let t = remove_molecule(&mut self.comps[ci].agents[ai].mols, lid, &self.species);
                    self.ledger.add(t, |r| r.decayed += 1);
                    self.add_fragments(ci as u16, site, t, 1);
                    self.bond_event(BondEventKind::Decay, ci as u16, site, t, None);
                }
                if self.comps[ci].agents[ai].mols.is_empty() {
                    self.comps[ci].agents.remove(ai);
                } else {
                    let before = self.comps[ci].agents.len();
                    self.split_agent(ci, ai);
                    if self.comps[ci].agents.len() == before {
                        ai += 1;
                    }
                }
            }
        }
        // membranes
        for slot in 0..self.cells.len() as u32 {
            let Some(cell) = self.cells[slot as usize].as_ref() else { continue };
            let mut victims: SmallVec<[u32; 2]> = SmallVec::new();
            for m in &cell.membrane {
                let h = self.species.hazard(m.species);
                if h > 0.0 && self.rng.random::<f64>() < h {
                    victims.push(m.lid);
                }
            }
            if victims.is_empty() {
                continue;
            }
            let (comp, site) = (cell.comp, cell.site);
            for lid in victims {
                // contact bonds first, they reach into the neighbour
                let contacts: SmallVec<[Bond; 2]> = {
                    let c = self.cells[slot as usize].as_ref().expect("live");
                    let i = find_lid(&c.membrane, lid).expect("present");
                    c.membrane[i]
                        .bonds
                        .iter()
                        .filter(|b| matches!(b.peer, Peer::Contact { .. }))
                        .copied()
                        .collect()
                };
                for b in contacts {
                    self.break_cell_bond(slot, lid, &b);
                }
                let c = self.cells[slot as usize].as_mut().expect("live");
                let anchored = c.membrane[find_lid(&c.membrane, lid).expect("present")].anchored;
                let t = remove_molecule(&mut c.membrane, lid, &self.species);
                if !anchored {
                    self.ledger.add(t, |r| r.decayed += 1);
                }
                self.add_fragments(comp, site, t, 1);
                self.bond_event(BondEventKind::Decay, comp, site, t, None);
            }
            self.release_foreign(slot);
        }
    }

    pub(crate) fn push_event(&mut self, body: EventBody) {
        let seq = self.seq;
        self.seq += 1;
        self.events.push(Event {
            tick: self.event_tick(),
            seq,
            body,
        });
    }
}

fn agent_key(h: Holder) -> (u16, u64) {
    match h {
        Holder::Agent(c, u) => (c, u),
        Holder::Cell(_) => unreachable!(),
    }
}

/// Clears the bond on `surface` of molecule `lid`; returns the molecule's type.
fn clear_bond(mols: &mut [Molecule], lid: u32, surface: u8, species: &SpeciesTable) -> MoleculeTypeId {
    let i = find_lid(mols, lid).expect("bond end present");
    let m = &mut mols[i];
    m.bonds.retain(|b| b.surface != surface);
    m.occupied &= !species.surfaces(m.species)[surface as usize].mask;
    species.mtype(m.species)
}

fn break_local(mols: &mut [Molecule], lid: u32, b: &Bond, species: &SpeciesTable) -> (MoleculeTypeId, MoleculeTypeId) {
    let Peer::Local(plid) = b.peer else { unreachable!() };
    let ta = clear_bond(mols, lid, b.surface, species);
    let tb = clear_bond(mols, plid, b.peer_surface, species);
    (ta, tb)
}

/// Removes a molecule and every local bond pointing at it.
pub(crate) fn remove_molecule(mols: &mut SmallVecOrVec, lid: u32, species: &SpeciesTable) -> MoleculeTypeId {
    let i = find_lid(mols.as_slice(), lid).expect("present");
    let m = mols.remove_at(i);
    for b in &m.bonds {
        if let Peer::Local(l) = b.peer {
            clear_bond(mols.as_mut_slice(), l, b.peer_surface, species);
        }
    }
    species.mtype(m.species)
}

/// Common surface of the two molecule containers.
pub(crate) trait MolVec {
    fn as_slice(&self) -> &[Molecule];
    fn as_mut_slice(&mut self) -> &mut [Molecule];
    fn remove_at(&mut self, i: usize) -> Molecule;
}

impl MolVec for Vec<Molecule> {
    fn as_slice(&self) -> &[Molecule] {
        self
    }
    fn as_mut_slice(&mut self) -> &mut [Molecule] {
        self
    }
    fn remove_at(&mut self, i: usize) -> Molecule {
        self.remove(i)
    }
}

impl MolVec for SmallVec<[Molecule; 2]> {
    fn as_slice(&self) -> &[Molecule] {
        self
    }
    fn as_mut_slice(&mut self) -> &mut [Molecule] {
        self
    }
    fn remove_at(&mut self, i: usize) -> Molecule {
        self.remove(i)
    }
}

pub(crate) type SmallVecOrVec = dyn MolVec;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub injected: u64,
    pub secreted: u64,
    pub fragments: u64,
    pub decayed: u64,
    pub ingested: u64,
    pub discarded: u64,
}

impl LedgerRow {
    /// Expected change in the soluble instance count.
    pub fn net(&self) -> i64 {
        (self.injected + self.secreted + self.fragments) as i64
            - (self.decayed + self.ingested + self.discarded) as i64
    }
}

/// Per molecule type sources and sinks of soluble instances within one tick.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MassLedger {
    pub rows: Vec<LedgerRow>,
}

impl MassLedger {
    pub fn new(types: usize) -> Self {
        Self {
            rows: vec![LedgerRow::default(); types],
        }
    }

    #[inline]
    pub fn add(&mut self, t: MoleculeTypeId, f: impl FnOnce(&mut LedgerRow)) {
        f(&mut self.rows[t.index()]);
    }

    pub fn reset(&mut self) {
        for r in &mut self.rows {
            *r = LedgerRow::default();
        }
    }
}
