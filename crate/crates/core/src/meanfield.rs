//! Mass-action translation of restricted agent networks.
//!
//! Concentrations are agents per lattice site. Contact terms carry the
//! coordination number `z`; crowded proliferation is scaled by the vacant
//! fraction of sites.

use thiserror::Error;

use crate::model::{Action, ConditionKind, KillTarget, Lifetime};
use crate::ode::OdeSystem;
use crate::scalar::Real;
use crate::scenario::Model;

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    /// `+rate` into `target`.
    Source { target: usize, rate: f64 },
    /// `-rate·x`.
    Decay { species: usize, rate: f64 },
    /// `+rate·producer` into `product`.
    Secretion { producer: usize, product: usize, rate: f64 },
    /// `+rate·z·cell·partner`, times the vacant fraction when `crowding`.
    ContactProliferation {
        cell: usize,
        partner: usize,
        rate: f64,
        crowding: bool,
    },
    /// `-rate·z·killer·victim`.
    ContactKill { killer: usize, victim: usize, rate: f64 },
    /// `rate·z·from·partner` moved from `from` to `to`.
    ContactConversion {
        from: usize,
        to: usize,
        partner: usize,
        rate: f64,
    },
    /// `rate·from·signal^order/order!` moved from `from` to `to`.
    SignalConversion {
        from: usize,
        to: usize,
        signal: usize,
        order: u32,
        rate: f64,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeanFieldError {
    #[error("mechanism {mechanism:?} is not mean-field translatable: {reason}")]
    NotTranslatable { mechanism: String, reason: String },
    #[error("rule {rule} references species index {index} of {len}")]
    BadIndex { rule: usize, index: usize, len: usize },
    #[error("negative rate in rule {0}")]
    NegativeRate(usize),
    #[error("Newton iteration did not converge (residual {0:e})")]
    NoConvergence(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub species: Vec<String>,
    /// Species that occupy lattice sites (enter the vacancy).
    pub is_cell: Vec<bool>,
    /// Species held constant.
    pub fixed: Vec<bool>,
    /// Neighbours per site.
    pub z: f64,
    pub rules: Vec<Rule>,
}

impl Network {
    pub fn new(z: f64) -> Self {
        Self {
            species: Vec::new(),
            is_cell: Vec::new(),
            fixed: Vec::new(),
            z,
            rules: Vec::new(),
        }
    }

    pub fn add_species(&mut self, name: &str, is_cell: bool, fixed: bool) -> usize {
        self.species.push(name.to_string());
        self.is_cell.push(is_cell);
        self.fixed.push(fixed);
        self.species.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s == name)
    }

    /// Checks indices and rates and returns the derivative function.
    pub fn translate(&self) -> Result<MeanField, MeanFieldError> {
        let n = self.species.len();
        for (i, r) in self.rules.iter().enumerate() {
            let (idx, rate): (Vec<usize>, f64) = match *r {
                Rule::Source { target, rate } => (vec![target], rate),
                Rule::Decay { species, rate } => (vec![species], rate),
                Rule::Secretion { producer, product, rate } => (vec![producer, product], rate),
                Rule::ContactProliferation { cell, partner, rate, .. } => (vec![cell, partner], rate),
                Rule::ContactKill { killer, victim, rate } => (vec![killer, victim], rate),
                Rule::ContactConversion { from, to, partner, rate } => (vec![from, to, partner], rate),
                Rule::SignalConversion { from, to, signal, rate, .. } => (vec![from, to, signal], rate),
            };
            if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
                return Err(MeanFieldError::BadIndex {
                    rule: i,
                    index: bad,
                    len: n,
                });
            }
            if !(rate >= 0.0) {
                return Err(MeanFieldError::NegativeRate(i));
            }
        }
        Ok(MeanField { net: self.clone() })
    }

    /// Reads a compiled model whose mechanisms use only contact proliferation,
    /// contact killing, signal-induced differentiation and secretion.
    pub fn from_model(model: &Model, z: f64) -> Result<Network, MeanFieldError> {
        let mut net = Network::new(z);
        for c in &model.cell_types {
            net.add_species(&c.name, true, false);
        }
        let off = model.cell_types.len();
        for m in &model.molecules {
            net.add_species(&m.name, false, false);
        }
        for (ci, ct) in model.cell_types.iter().enumerate() {
            if let Lifetime::Finite(l) = ct.mean_lifetime {
                net.rules.push(Rule::Decay { species: ci, rate: 1.0 / l });
            }
            for &mid in &ct.mechanisms {
                let mech = &model.mechanisms[mid.0 as usize];
                let fail = |reason: &str| MeanFieldError::NotTranslatable {
                    mechanism: mech.name.clone(),
                    reason: reason.to_string(),
                };
                if mech.conditions.iter().any(|c| c.negated || c.side_scoped) {
                    return Err(fail("negated or side-scoped condition"));
                }
                if mech.delay > 0 {
                    return Err(fail("delayed mechanism"));
                }
                let rate = mech.rate;
                match (mech.conditions.as_slice(), mech.actions.as_slice()) {
                    ([], [Action::Secrete { molecule, count }]) => net.rules.push(Rule::Secretion {
                        producer: ci,
                        product: off + molecule.index(),
                        rate: rate * *count as f64,
                    }),
                    ([c], [Action::Divide]) => match c.kind {
                        ConditionKind::ContactCellType { cell_type } => net.rules.push(Rule::ContactProliferation {
                            cell: ci,
                            partner: cell_type.index(),
                            rate,
                            crowding: true,
                        }),
                        _ => return Err(fail("division needs a contact condition")),
                    },
                    ([c], [Action::KillContact { target: KillTarget::CellType(v) }]) => match c.kind {
                        ConditionKind::ContactCellType { cell_type } if cell_type == *v => net.rules.push(Rule::ContactKill {
                            killer: ci,
                            victim: v.index(),
                            rate,
                        }),
                        _ => return Err(fail("kill needs a contact condition on its target")),
                    },
                    ([c], [Action::Differentiate { cell_type }]) => match c.kind {
                        ConditionKind::SiteMoleculeAtLeast { molecule, threshold, .. } => {
                            net.rules.push(Rule::SignalConversion {
                                from: ci,
                                to: cell_type.index(),
                                signal: off + molecule.index(),
                                order: threshold,
                                rate,
                            })
                        }
                        ConditionKind::ContactCellType { cell_type: p } => net.rules.push(Rule::ContactConversion {
                            from: ci,
                            to: cell_type.index(),
                            partner: p.index(),
                            rate,
                        }),
                        _ => return Err(fail("differentiation needs a contact or signal condition")),
                    },
                    _ => return Err(fail("condition/action combination outside the mass-action vocabulary")),
                }
            }
        }
        for (mi, m) in model.molecules.iter().enumerate() {
            if let Lifetime::Finite(l) = m.mean_lifetime {
                net.rules.push(Rule::Decay {
                    species: off + mi,
                    rate: 1.0 / l,
                });
            }
        }
        Ok(net)
    }
}

/// The derivative function of a translated network.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanField {
    pub net: Network,
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

impl<T: Real> OdeSystem<T> for MeanField {
    fn dim(&self) -> usize {
        self.net.species.len()
    }

    fn rhs(&self, y: &[T], dy: &mut [T]) {
        let net = &self.net;
        let z = T::lit(net.z);
        dy.iter_mut().for_each(|v| *v = T::zero());
        let occupied = y
            .iter()
            .zip(&net.is_cell)
            .filter(|(_, &c)| c)
            .fold(T::zero(), |a, (v, _)| a + *v);
        let vac = (T::one() - occupied).max(T::zero());
        for r in &net.rules {
            match *r {
                Rule::Source { target, rate } => dy[target] = dy[target] + T::lit(rate),
                Rule::Decay { species, rate } => dy[species] = dy[species] - T::lit(rate) * y[species],
                Rule::Secretion { producer, product, rate } => dy[product] = dy[product] + T::lit(rate) * y[producer],
                Rule::ContactProliferation {
                    cell,
                    partner,
                    rate,
                    crowding,
                } => {
                    let mut f = T::lit(rate) * z * y[cell] * y[partner];
                    if crowding {
                        f = f * vac;
                    }
                    dy[cell] = dy[cell] + f;
                }
                Rule::ContactKill { killer, victim, rate } => {
                    dy[victim] = dy[victim] - T::lit(rate) * z * y[killer] * y[victim];
                }
                Rule::ContactConversion { from, to, partner, rate } => {
                    let f = T::lit(rate) * z * y[from] * y[partner];
                    dy[from] = dy[from] - f;
                    dy[to] = dy[to] + f;
                }
                Rule::SignalConversion {
                    from,
                    to,
                    signal,
                    order,
                    rate,
                } => {
                    let f = T::lit(rate / factorial(order)) * y[from] * y[signal].powi(order as i32);
                    dy[from] = dy[from] - f;
                    dy[to] = dy[to] + f;
                }
            }
        }
        for (i, &fx) in net.fixed.iter().enumerate() {
            if fx {
                dy[i] = T::zero();
            }
        }
    }
}

/// Newton iteration on `f(y) = 0` with a central-difference Jacobian.
pub fn equilibrium<S: OdeSystem<f64> + ?Sized>(sys: &S, guess: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, MeanFieldError> {
    let n = sys.dim();
    let mut y = guess.to_vec();
    let mut f = vec![0.0; n];
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for _ in 0..max_iter {
        sys.rhs(&y, &mut f);
        let res = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if res < tol {
            return Ok(y);
        }
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let h = 1e-7 * y[j].abs().max(1e-6);
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[j] += h;
            ym[j] -= h;
            sys.rhs(&yp, &mut fp);
            sys.rhs(&ym, &mut fm);
            for i in 0..n {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        // held species have identically zero rows; pin them
        for i in 0..n {
            if f[i] == 0.0 && jac[i].iter().all(|&v| v == 0.0) {
                jac[i][i] = 1.0;
            }
        }
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let Some(dx) = gauss_solve(jac, rhs) else {
            return Err(MeanFieldError::NoConvergence(res));
        };
        for i in 0..n {
            y[i] += dx[i];
        }
    }
    sys.rhs(&y, &mut f);
    let res = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if res < tol {
        Ok(y)
    } else {
        Err(MeanFieldError::NoConvergence(res))
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let k = a[r][c] / a[c][c];
            if k != 0.0 {
                for j in c..n {
                    a[r][j] -= k * a[c][j];
                }
                b[r] -= k * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| a[r][j] * x[j]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Parameters of the two-cytokine feedback network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackParams {
    pub oc: f64,
    pub aid: f64,
    pub z: f64,
    pub p_prolif: f64,
    pub p_kill: f64,
    pub p_diff: f64,
    pub secretion: f64,
    pub cytokine_lifetime: f64,
}

impl Default for FeedbackParams {
    fn default() -> Self {
        Self {
            oc: 0.05,
            aid: 0.01,
            z: 6.0,
            p_prolif: 0.05,
            p_kill: 0.1,
            p_diff: 0.01,
            secretion: 5.0,
            cytokine_lifetime: 100.0,
        }
    }
}

/// Species order: OC, AID, ID0, ID1, ID2, C1, C2 (OC and AID held fixed).
pub fn feedback_network(p: &FeedbackParams) -> Network {
    let mut n = Network::new(p.z);
    let oc = n.add_species("OC", true, true);
    let aid = n.add_species("AID", true, true);
    let id0 = n.add_species("ID0", true, false);
    let id1 = n.add_species("ID1", true, false);
    let id2 = n.add_species("ID2", true, false);
    let c1 = n.add_species("C1", false, false);
    let c2 = n.add_species("C2", false, false);
    n.rules.push(Rule::ContactProliferation {
        cell: id0,
        partner: oc,
        rate: p.p_prolif,
        crowding: true,
    });
    for (id, c) in [(id1, c1), (id2, c2)] {
        n.rules.push(Rule::SignalConversion {
            from: id0,
            to: id,
            signal: c,
            order: 2,
            rate: p.p_diff,
        });
        n.rules.push(Rule::Secretion {
            producer: id,
            product: c,
            rate: p.secretion,
        });
        n.rules.push(Rule::Decay {
            species: c,
            rate: 1.0 / p.cytokine_lifetime,
        });
    }
    for v in [id0, id1, id2] {
        n.rules.push(Rule::ContactKill {
            killer: aid,
            victim: v,
            rate: p.p_kill,
        });
    }
    n
}

/// Initial state with the fixed densities filled in.
pub fn feedback_state(p: &FeedbackParams, id0: f64, id1: f64, id2: f64, c1: f64, c2: f64) -> Vec<f64> {
    vec![p.oc, p.aid, id0, id1, id2, c1, c2]
}

/// The interior equilibrium with ID1 = ID2. Newton starts from the
/// closed form that ignores crowding by the ID cells themselves.
pub fn feedback_symmetric_equilibrium(p: &FeedbackParams) -> Result<Vec<f64>, MeanFieldError> {
    let k = p.p_kill * p.z * p.aid;
    let g = p.p_prolif * p.z * p.oc * (1.0 - p.oc - p.aid);
    let c_per_cell = p.secretion * p.cytokine_lifetime;
    let a = 0.5 * p.p_diff * c_per_cell * c_per_cell;
    if !(g > k) || !(a > 0.0) {
        return Err(MeanFieldError::NoConvergence(f64::NAN));
    }
    let x = ((g - k) / (2.0 * a)).sqrt();
    let y = k / (a * x);
    let guess = feedback_state(p, y, x, x, c_per_cell * x, c_per_cell * x);
    equilibrium(&feedback_network(p).translate()?, &guess, 1e-14, 100)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{derivatives, KineticsParams, KineticsState};
    use approx::assert_relative_eq;

    fn kinetics_network(p: &KineticsParams<f64>) -> Network {
        let mut n = Network::new(1.0);
        let i = n.add_species("I", false, false);
        let k = n.add_species("K", false, false);
        let c = n.add_species("C", false, false);
        n.rules = vec![
            Rule::ContactConversion {
                from: c,
                to: i,
                partner: i,
                rate: p.p_infect,
            },
            Rule::ContactKill {
                killer: k,
                victim: i,
                rate: p.p_kill,
            },
            Rule::ContactProliferation {
                cell: k,
                partner: i,
                rate: p.p_resp,
                crowding: false,
            },
            Rule::Source { target: c, rate: p.s },
            Rule::Decay { species: i, rate: p.d_i },
            Rule::Decay { species: k, rate: p.d_k },
            Rule::Decay { species: c, rate: p.d_c },
        ];
        n
    }

    #[test]
    fn kinetics_round_trip() {
        let p = KineticsParams {
            p_infect: 0.3,
            p_kill: 0.5,
            p_resp: 0.1,
            s: 0.01,
            d_i: 0.01,
            d_k: 0.01,
            d_c: 0.01,
        };
        let mf = kinetics_network(&p).translate().unwrap();
        for st in [[0.1, 0.1, 1.0], [0.3, 0.02, 0.5], [0.0, 0.0, 0.0]] {
            let mut dy = [0.0; 3];
            OdeSystem::<f64>::rhs(&mf, &st, &mut dy);
            let want = derivatives(&KineticsState::new(st[0], st[1], st[2]), &p);
            assert_relative_eq!(dy[0], want.i, epsilon = 1e-15);
            assert_relative_eq!(dy[1], want.k, epsilon = 1e-15);
            assert_relative_eq!(dy[2], want.c, epsilon = 1e-15);
        }
    }

    #[test]
    fn symmetric_state_has_symmetric_derivative() {
        let p = FeedbackParams::default();
        let mf = feedback_network(&p).translate().unwrap();
        let y = feedback_state(&p, 0.003, 0.002, 0.002, 1.0, 1.0);
        let mut dy = vec![0.0; 7];
        OdeSystem::<f64>::rhs(&mf, &y, &mut dy);
        assert_eq!(dy[3] - dy[4], 0.0);
        assert_eq!(dy[5] - dy[6], 0.0);
        assert_eq!(dy[0], 0.0);
    }

    #[test]
    fn bad_index_is_reported() {
        let mut n = Network::new(1.0);
        n.add_species("A", false, false);
        n.rules.push(Rule::Decay { species: 3, rate: 0.1 });
        assert!(matches!(n.translate(), Err(MeanFieldError::BadIndex { index: 3, .. })));
    }

    #[test]
    fn newton_finds_linear_root() {
        let mut n = Network::new(1.0);
        let a = n.add_species("A", false, false);
        n.rules.push(Rule::Source { target: a, rate: 2.0 });
        n.rules.push(Rule::Decay { species: a, rate: 0.5 });
        let mf = n.translate().unwrap();
        let y = equilibrium(&mf, &[1.0], 1e-14, 20).unwrap();
        assert_relative_eq!(y[0], 4.0, epsilon = 1e-12);
    }
}
