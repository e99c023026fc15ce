//! Multiscale correlation analysis of cell-action logs.
//!
//! Events of two labels are correlated when pairs `(a, b)` in the same
//! compartment lie within distance `R` and lag `0 <= t_b - t_a <= T` more
//! often than under permutations of event times within each label.
//! Correlated events are merged into composite events and the analysis is
//! repeated at the next scale with `R` and `T` multiplied by `alpha`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eventlog::LogRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisParams {
    pub r0: f64,
    pub t0: f64,
    pub alpha: f64,
    /// Minimum number of permutations per tested pair.
    pub perms: usize,
    /// Family-wise level; each level is Bonferroni-corrected over its tests.
    pub significance: f64,
    pub max_levels: usize,
    pub seed: u64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            r0: 3.0,
            t0: 10.0,
            alpha: 2.0,
            perms: 200,
            significance: 0.05,
            max_levels: 3,
            seed: 0,
        }
    }
}

impl AnalysisParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.r0 >= 1.0) || !(self.t0 >= 1.0) {
            return Err("r0 and t0 must be at least 1".into());
        }
        if !(self.alpha > 1.0) {
            return Err("alpha must exceed 1".into());
        }
        if self.perms < 1 {
            return Err("perms must be at least 1".into());
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err("significance must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// `(R, T)` at a level counted from 1.
    pub fn scale(&self, level: usize) -> (f64, f64) {
        let f = self.alpha.powi(level as i32 - 1);
        (self.r0 * f, self.t0 * f)
    }
}

/// An elementary or composite event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub t: f64,
    pub comp: String,
    pub pos: [f64; 3],
    pub label: String,
    pub level: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clone: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

/// Cell actions, deaths and differentiations from a log.
pub fn events_from_records(records: &[LogRecord]) -> Vec<ActionEvent> {
    records
        .iter()
        .filter_map(|r| {
            let label = r.analysis_label()?;
            let p = r.pos?;
            Some(ActionEvent {
                t: r.t as f64,
                comp: r.comp.clone().unwrap_or_default(),
                pos: [p[0] as f64, p[1] as f64, p[2] as f64],
                label,
                level: 0,
                cell: r.cell,
                clone: r.clone,
                target: r.target.clone(),
            })
        })
        .collect()
}

/// Globally permutes event times (positions and labels fixed); the
/// calibration null.
pub fn shuffle_times(events: &[ActionEvent], seed: u64) -> Vec<ActionEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times: Vec<f64> = events.iter().map(|e| e.t).collect();
    times.shuffle(&mut rng);
    events
        .iter()
        .zip(times)
        .map(|(e, t)| ActionEvent { t, ..e.clone() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub a: String,
    pub b: String,
    pub observed: u64,
    pub null_mean: f64,
    pub null_sd: f64,
    pub p: f64,
    pub permutations: usize,
}

/// Events of one label split by compartment, with times in a separate vector
/// so permutations only touch the times.
struct Group {
    comp: Vec<u32>,
    pos: Vec<[f64; 3]>,
    times: Vec<f64>,
}

fn group(events: &[ActionEvent], label: &str, comps: &mut Vec<String>) -> Group {
    let mut g = Group {
        comp: Vec::new(),
        pos: Vec::new(),
        times: Vec::new(),
    };
    for e in events.iter().filter(|e| e.label == label) {
        let ci = match comps.iter().position(|c| *c == e.comp) {
            Some(i) => i,
            None => {
                comps.push(e.comp.clone());
                comps.len() - 1
            }
        };
        g.comp.push(ci as u32);
        g.pos.push(e.pos);
        g.times.push(e.t);
    }
    g
}

/// Number of `(a, b)` pairs within `r` and lag `[0, t]`.
fn count_pairs(a: &Group, ta: &[f64], b: &Group, tb: &[f64], r: f64, t: f64, same: bool) -> u64 {
    let mut order: Vec<usize> = (0..tb.len()).collect();
    order.sort_by(|&i, &j| tb[i].total_cmp(&tb[j]));
    let sorted: Vec<f64> = order.iter().map(|&i| tb[i]).collect();
    let r2 = r * r;
    let mut n = 0;
    for i in 0..ta.len() {
        let lo = sorted.partition_point(|&x| x < ta[i]);
        for k in lo..sorted.len() {
            if sorted[k] - ta[i] > t {
                break;
            }
            let j = order[k];
            if same && i == j {
                continue;
            }
            if a.comp[i] != b.comp[j] {
                continue;
            }
            let d2: f64 = (0..3).map(|x| (a.pos[i][x] - b.pos[j][x]).powi(2)).sum();
            if d2 <= r2 {
                n += 1;
            }
        }
    }
    n
}

/// Permutation test for one ordered label pair.
///
/// Runs `perms` permutations, stopping early once `stop_after` null values
/// reach the observed count (sequential p-value `h / L`).
pub fn pair_correlation_with(
    events: &[ActionEvent],
    a: &str,
    b: &str,
    r: f64,
    t: f64,
    perms: usize,
    stop_after: usize,
    rng: &mut ChaCha8Rng,
) -> PairStat {
    let mut comps = Vec::new();
    let ga = group(events, a, &mut comps);
    let gb = group(events, b, &mut comps);
    let same = a == b;
    let observed = if ga.times.is_empty() || gb.times.is_empty() {
        0
    } else {
        count_pairs(&ga, &ga.times, &gb, &gb.times, r, t, same)
    };
    let mut stat = PairStat {
        a: a.into(),
        b: b.into(),
        observed,
        null_mean: 0.0,
        null_sd: 0.0,
        p: 1.0,
        permutations: 0,
    };
    if observed == 0 {
        return stat;
    }
    let mut ta = ga.times.clone();
    let mut tb = gb.times.clone();
    let (mut s, mut s2) = (0.0, 0.0);
    let mut exceed = 0usize;
    let mut done = 0usize;
    for _ in 0..perms {
        ta.shuffle(rng);
        let v = if same {
            count_pairs(&ga, &ta, &gb, &ta, r, t, true)
        } else {
            tb.shuffle(rng);
            count_pairs(&ga, &ta, &gb, &tb, r, t, false)
        };
        done += 1;
        s += v as f64;
        s2 += (v as f64).powi(2);
        if v >= observed {
            exceed += 1;
            if exceed >= stop_after {
                break;
            }
        }
    }
    let mean = s / done as f64;
    stat.null_mean = mean;
    stat.null_sd = (s2 / done as f64 - mean * mean).max(0.0).sqrt();
    stat.permutations = done;
    stat.p = if exceed >= stop_after && done < perms {
        exceed as f64 / done as f64
    } else {
        (1 + exceed) as f64 / (done + 1) as f64
    };
    stat
}

/// Permutation test with `perms` permutations and no early stop;
/// `p = (1 + #{null >= observed}) / (perms + 1)`.
pub fn pair_correlation(events: &[ActionEvent], a: &str, b: &str, r: f64, t: f64, perms: usize, seed: u64) -> PairStat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pair_correlation_with(events, a, b, r, t, perms, usize::MAX, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    #[serde(flatten)]
    pub stat: PairStat,
    /// Bonferroni-corrected p-value.
    pub p_corrected: f64,
    /// Observed over null mean.
    pub effect: f64,
}

/// Ordered label pairs (distinct labels, each with at least two events)
/// whose corrected p-value falls below the significance level.
pub fn significant_pairs(events: &[ActionEvent], params: &AnalysisParams, r: f64, t: f64, salt: u64) -> (Vec<PairResult>, usize) {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in events {
        *counts.entry(e.label.as_str()).or_default() += 1;
    }
    let labels: Vec<&str> = counts.iter().filter(|(_, &n)| n >= 2).map(|(l, _)| *l).collect();
    let mut tests = Vec::new();
    for &a in &labels {
        for &b in &labels {
            if a != b {
                tests.push((a, b));
            }
        }
    }
    let m = tests.len();
    if m == 0 {
        return (Vec::new(), 0);
    }
    // enough permutations that the smallest attainable p clears the corrected level
    let perms = params.perms.max((2.0 * m as f64 / params.significance).ceil() as usize);
    let threshold = params.significance / m as f64;
    let stop_after = ((threshold * perms as f64).ceil() as usize).max(10);
    let mut out = Vec::new();
    for (k, (a, b)) in tests.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k as u64) << 20);
        let stat = pair_correlation_with(events, a, b, r, t, perms, stop_after, &mut rng);
        let p_corrected = (stat.p * m as f64).min(1.0);
        if p_corrected < params.significance {
            let effect = if stat.null_mean > 0.0 {
                stat.observed as f64 / stat.null_mean
            } else {
                f64::INFINITY
            };
            out.push(PairResult {
                stat,
                p_corrected,
                effect,
            });
        }
    }
    (out, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeObject {
    pub level: usize,
    /// Indices into the event list of the previous level.
    pub members: Vec<usize>,
    pub comp: String,
    pub centroid: [f64; 3],
    pub interval: [f64; 2],
    pub label: String,
}

/// Canonical composite label: distinct member labels, sorted, joined by `+`.
pub fn composite_label<'a>(labels: impl IntoIterator<Item = &'a str>) -> String {
    let set: BTreeSet<&str> = labels.into_iter().collect();
    set.into_iter().collect::<Vec<_>>().join("+")
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Links events of significant pairs within `(r, t)` and returns connected
/// components of two or more events.
pub fn compose_objects(events: &[ActionEvent], sig: &[(String, String)], r: f64, t: f64, level: usize) -> Vec<CompositeObject> {
    let n = events.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let r2 = r * r;
    for (a, b) in sig {
        let ia: Vec<usize> = (0..n).filter(|&i| events[i].label == *a).collect();
        let mut ib: Vec<usize> = (0..n).filter(|&i| events[i].label == *b).collect();
        ib.sort_by(|&x, &y| events[x].t.total_cmp(&events[y].t));
        for &i in &ia {
            let ti = events[i].t;
            let lo = ib.partition_point(|&j| events[j].t < ti);
            for &j in &ib[lo..] {
                if events[j].t - ti > t {
                    break;
                }
                if i == j || events[i].comp != events[j].comp {
                    continue;
                }
                let d2: f64 = (0..3).map(|x| (events[i].pos[x] - events[j].pos[x]).powi(2)).sum();
                if d2 <= r2 {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups
        .into_values()
        .filter(|g| g.len() >= 2)
        .map(|members| {
            let k = members.len() as f64;
            let mut c = [0.0; 3];
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &members {
                for x in 0..3 {
                    c[x] += events[i].pos[x] / k;
                }
                lo = lo.min(events[i].t);
                hi = hi.max(events[i].t);
            }
            CompositeObject {
                level,
                comp: events[members[0]].comp.clone(),
                centroid: c,
                interval: [lo, hi],
                label: composite_label(members.iter().map(|&i| events[i].label.as_str())),
                members,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSignature {
    pub level: usize,
    pub r: f64,
    pub t: f64,
    pub events: usize,
    pub tests: usize,
    pub pairs: Vec<PairResult>,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSignature {
    pub params: AnalysisParams,
    pub levels: Vec<LevelSignature>,
}

impl ContextSignature {
    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|l| l.pairs.is_empty())
    }

    pub fn level(&self, k: usize) -> Option<&LevelSignature> {
        self.levels.iter().find(|l| l.level == k)
    }

    pub fn contains(&self, level: usize, a: &str, b: &str) -> bool {
        self.level(level)
            .is_some_and(|l| l.pairs.iter().any(|p| p.stat.a == a && p.stat.b == b))
    }

    fn pair_set(&self, level: usize) -> BTreeSet<(String, String)> {
        self.level(level)
            .map(|l| l.pairs.iter().map(|p| (p.stat.a.clone(), p.stat.b.clone())).collect())
            .unwrap_or_default()
    }
}

/// Level 1 works on raw events at `(R0, T0)`; each further level on the
/// composites of the previous one at `alpha` times the scale. Stops when a
/// level finds nothing or `max_levels` is reached.
pub fn multiscale_analyze(events: &[ActionEvent], params: &AnalysisParams) -> ContextSignature {
    let mut levels = Vec::new();
    let mut current: Vec<ActionEvent> = events.to_vec();
    for level in 1..=params.max_levels {
        let (r, t) = params.scale(level);
        let (pairs, tests) = significant_pairs(&current, params, r, t, level as u64);
        let sig: Vec<(String, String)> = pairs.iter().map(|p| (p.stat.a.clone(), p.stat.b.clone())).collect();
        let objects = if sig.is_empty() {
            Vec::new()
        } else {
            compose_objects(&current, &sig, r, t, level)
        };
        let found = !pairs.is_empty();
        levels.push(LevelSignature {
            level,
            r,
            t,
            events: current.len(),
            tests,
            pairs,
            objects: objects.len(),
        });
        if !found {
            break;
        }
        current = objects
            .into_iter()
            .map(|o| ActionEvent {
                t: 0.5 * (o.interval[0] + o.interval[1]),
                comp: o.comp,
                pos: o.centroid,
                label: o.label,
                level,
                cell: None,
                clone: None,
                target: None,
            })
            .collect();
    }
    ContextSignature {
        params: *params,
        levels,
    }
}

/// Jaccard distance of the pair sets, averaged over levels where either
/// signature has pairs. Two empty signatures are at distance 0.
pub fn compare_signatures(a: &ContextSignature, b: &ContextSignature) -> f64 {
    let top = a.levels.len().max(b.levels.len());
    let mut total = 0.0;
    let mut n = 0;
    for level in 1..=top {
        let (sa, sb) = (a.pair_set(level), b.pair_set(level));
        if sa.is_empty() && sb.is_empty() {
            continue;
        }
        let inter = sa.intersection(&sb).count() as f64;
        let union = sa.union(&sb).count() as f64;
        total += 1.0 - inter / union;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, x: f64, label: &str) -> ActionEvent {
        ActionEvent {
            t,
            comp: "c".into(),
            pos: [x, 0.0, 0.0],
            label: label.into(),
            level: 0,
            cell: None,
            clone: None,
            target: None,
        }
    }

    #[test]
    fn two_linked_events_make_one_object() {
        let e = vec![ev(1.0, 0.0, "a"), ev(3.0, 2.0, "b")];
        let o = compose_objects(&e, &[("a".into(), "b".into())], 3.0, 10.0, 1);
        assert_eq!(o.len(), 1);
        assert_eq!(o[0].centroid, [1.0, 0.0, 0.0]);
        assert_eq!(o[0].interval, [1.0, 3.0]);
        assert_eq!(o[0].label, "a+b");
    }

    #[test]
    fn chains_are_transitive() {
        let e = vec![ev(0.0, 0.0, "a"), ev(2.0, 2.0, "b"), ev(4.0, 4.0, "c")];
        let sig = vec![("a".into(), "b".into()), ("b".into(), "c".into())];
        let o = compose_objects(&e, &sig, 3.0, 10.0, 1);
        assert_eq!(o.len(), 1);
        assert_eq!(o[0].members, vec![0, 1, 2]);
    }

    #[test]
    fn lag_is_directed() {
        let e = vec![ev(5.0, 0.0, "a"), ev(1.0, 0.0, "b")];
        assert!(compose_objects(&e, &[("a".into(), "b".into())], 3.0, 10.0, 1).is_empty());
        assert_eq!(pair_correlation(&e, "a", "b", 3.0, 10.0, 10, 1).observed, 0);
        assert_eq!(pair_correlation(&e, "b", "a", 3.0, 10.0, 10, 1).observed, 1);
    }

    #[test]
    fn absent_label_gives_p_one() {
        let e = vec![ev(1.0, 0.0, "a")];
        let s = pair_correlation(&e, "a", "zzz", 3.0, 10.0, 50, 1);
        assert_eq!((s.observed, s.p), (0, 1.0));
    }

    #[test]
    fn empty_and_single_event_logs_have_empty_signatures() {
        let p = AnalysisParams::default();
        assert!(multiscale_analyze(&[], &p).is_empty());
        assert!(multiscale_analyze(&[ev(0.0, 0.0, "a")], &p).is_empty());
    }

    #[test]
    fn scales_grow() {
        let p = AnalysisParams::default();
        for k in 1..5 {
            let (r0, t0) = p.scale(k);
            let (r1, t1) = p.scale(k + 1);
            assert!(r1 > r0 && t1 > t0);
        }
    }

    #[test]
    fn composite_labels_are_canonical() {
        assert_eq!(composite_label(["b", "a", "b"]), "a+b");
    }

    #[test]
    fn signature_distance() {
        let p = AnalysisParams::default();
        let mk = |pairs: &[(&str, &str)]| ContextSignature {
            params: p,
            levels: vec![LevelSignature {
                level: 1,
                r: 3.0,
                t: 10.0,
                events: 0,
                tests: 0,
                objects: 0,
                pairs: pairs
                    .iter()
                    .map(|(a, b)| PairResult {
                        stat: PairStat {
                            a: a.to_string(),
                            b: b.to_string(),
                            observed: 1,
                            null_mean: 0.0,
                            null_sd: 0.0,
                            p: 0.001,
                            permutations: 1,
                        },
                        p_corrected: 0.01,
                        effect: 1.0,
                    })
                    .collect(),
            }],
        };
        let a = mk(&[("x", "y")]);
        let b = mk(&[("u", "v")]);
        assert_eq!(compare_signatures(&a, &a), 0.0);
        assert_eq!(compare_signatures(&a, &b), 1.0);
        assert_eq!(compare_signatures(&a, &mk(&[("x", "y"), ("u", "v")])), 0.5);
    }
}
