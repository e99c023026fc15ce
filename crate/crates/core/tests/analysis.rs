use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use immunegrid::analysis::{multiscale_analyze, pair_correlation, shuffle_times, ActionEvent, AnalysisParams};

fn ev(t: f64, pos: [f64; 3], label: &str) -> ActionEvent {
    ActionEvent {
        t,
        comp: "c".into(),
        pos,
        label: label.into(),
        level: 0,
        cell: None,
        clone: None,
        target: None,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, label: &str) -> Vec<ActionEvent> {
    (0..n)
        .map(|_| {
            let p = [rng.random_range(0..20) as f64, rng.random_range(0..20) as f64, rng.random_range(0..4) as f64];
            ev(rng.random_range(0..400) as f64, p, label)
        })
        .collect()
}

/// `b` follows every `a` one site away two ticks later.
fn planted(seed: u64, n: usize) -> Vec<ActionEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = uniform(&mut rng, n, "a");
    let follow: Vec<ActionEvent> = out
        .iter()
        .map(|e| ev(e.t + 2.0, [e.pos[0] + 1.0, e.pos[1], e.pos[2]], "b"))
        .collect();
    out.extend(follow);
    out.extend(uniform(&mut rng, n, "c"));
    out.sort_by(|x, y| x.t.total_cmp(&y.t));
    out
}

#[test]
fn null_p_values_are_super_uniform() {
    let datasets = 400;
    let mut ps = Vec::new();
    for s in 0..datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut e = uniform(&mut rng, 40, "a");
        e.extend(uniform(&mut rng, 40, "b"));
        ps.push(pair_correlation(&e, "a", "b", 3.0, 10.0, 99, s + 1000).p);
    }
    for u in [0.05, 0.1, 0.2, 0.5] {
        let frac = ps.iter().filter(|&&p| p <= u).count() as f64 / datasets as f64;
        let sd = (u * (1.0 - u) / datasets as f64).sqrt();
        assert!(frac <= u + 3.0 * sd, "P(p <= {u}) = {frac}");
    }
}

#[test]
fn planted_pair_is_found_in_order() {
    let e = planted(1, 60);
    let s = pair_correlation(&e, "a", "b", 3.0, 10.0, 999, 2);
    assert!(s.observed >= 60, "observed {}", s.observed);
    assert!(s.p <= 0.001 + 1e-12, "p {}", s.p);
    let sig = multiscale_analyze(&e, &AnalysisParams::default());
    assert!(sig.contains(1, "a", "b"));
    assert!(!sig.contains(1, "a", "c"));
    assert!(!sig.contains(1, "c", "b"));
}

#[test]
fn analysis_is_deterministic() {
    let e = planted(3, 40);
    let p = AnalysisParams::default();
    assert_eq!(multiscale_analyze(&e, &p), multiscale_analyze(&e, &p));
}

#[test]
fn shuffled_planted_logs_are_mostly_empty() {
    let e = planted(5, 60);
    let p = AnalysisParams::default();
    let empty = (0..20).filter(|&s| multiscale_analyze(&shuffle_times(&e, s), &p).is_empty()).count();
    assert!(empty >= 19, "{empty}/20 empty");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffle_keeps_multiset_of_times(seed in any::<u64>(), n in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = uniform(&mut rng, n, "a");
        let s = shuffle_times(&e, seed);
        let mut t0: Vec<f64> = e.iter().map(|x| x.t).collect();
        let mut t1: Vec<f64> = s.iter().map(|x| x.t).collect();
        t0.sort_by(f64::total_cmp);
        t1.sort_by(f64::total_cmp);
        prop_assert_eq!(t0, t1);
        for (x, y) in e.iter().zip(&s) {
            prop_assert_eq!(x.pos, y.pos);
            prop_assert_eq!(&x.label, &y.label);
        }
    }

    #[test]
    fn p_values_lie_in_unit_interval(seed in any::<u64>(), r in 1.0f64..6.0, t in 1.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = uniform(&mut rng, 15, "a");
        e.extend(uniform(&mut rng, 15, "b"));
        let s = pair_correlation(&e, "a", "b", r, t, 49, seed);
        prop_assert!(s.p > 0.0 && s.p <= 1.0);
        if s.observed > 0 {
            prop_assert!(s.p >= 1.0 / 50.0);
        }
    }
}
