mod common;

use std::collections::BTreeSet;

use common::*;
use hyperreg::applications::*;
use hyperreg::regularity::{EtaSchedule, RegularizeConfig};
use hyperreg::{Chain, VertexPartition};
use proptest::prelude::*;
use rand::Rng;

fn grid(seed: u64, dim: usize, max_n: i64) -> GridSet {
    let mut g = rng(seed);
    let n = g.gen_range(1..=max_n);
    let density = g.gen_range(0.05..0.6);
    GridSet::random(dim, n, density, &mut g).unwrap()
}

/// Axis simplices found by pairing points that differ in the first coordinate only.
fn axis_oracle(g: &GridSet) -> Vec<Configuration> {
    let mut out = BTreeSet::new();
    for p in g.points() {
        for q in g.points() {
            if q[0] == p[0] || q[1..] != p[1..] {
                continue;
            }
            let d = q[0] - p[0];
            let ok = (1..g.dim()).all(|i| {
                let mut r = p.clone();
                r[i] += d;
                g.contains(&r)
            });
            if ok {
                out.insert(Configuration::new(p.clone(), d));
            }
        }
    }
    out.into_iter().collect()
}

fn ap3_oracle(set: &BTreeSet<i64>) -> BTreeSet<(i64, i64)> {
    let mut out = BTreeSet::new();
    for &a in set {
        for &b in set {
            if b != a && set.contains(&(2 * b - a)) {
                out.insert((a, b - a));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn corners_reduction_is_a_bijection(seed in any::<u64>()) {
        let g = grid(seed, 2, 12);
        let brute = brute_force_find(&g, &PatternKind::Corner, DEFAULT_SCAN_BUDGET).unwrap();
        prop_assert_eq!(&brute, &axis_oracle(&g));
        let inst = corners_reduction(&g).unwrap();
        let rep = inst.report();
        prop_assert_eq!(&rep.configurations, &brute);
        prop_assert_eq!(rep.degenerate, g.len());
        prop_assert!(rep.degenerate_edge_disjoint);
        prop_assert_eq!(rep.simplices, g.len() + brute.len());
        let degenerate = degenerate_faces(&inst);
        prop_assert_eq!(degenerate.len(), g.len());
        for (point, faces) in degenerate {
            prop_assert!(g.contains(&point));
            for e in faces {
                prop_assert_eq!(inst.edge_point(&e).unwrap(), point.clone());
            }
        }
    }

    #[test]
    fn simplex_reduction_is_a_bijection(seed in any::<u64>()) {
        let g = grid(seed, 3, 6);
        let brute = brute_force_find(&g, &PatternKind::AxisSimplex, DEFAULT_SCAN_BUDGET).unwrap();
        prop_assert_eq!(&brute, &axis_oracle(&g));
        let rep = simplex_reduction(&g).unwrap().report();
        prop_assert_eq!(&rep.configurations, &brute);
        prop_assert_eq!(rep.degenerate, g.len());
        prop_assert!(rep.degenerate_edge_disjoint);
    }

    #[test]
    fn top_edges_map_back_into_the_set(seed in any::<u64>()) {
        let g = grid(seed, 2, 8);
        let inst = corners_reduction(&g).unwrap();
        let (_, edges) = inst.back_map().unwrap();
        prop_assert_eq!(edges.len(), 3 * g.len());
        for e in edges {
            prop_assert!(g.contains(&e.point));
        }
    }

    #[test]
    fn progressions_come_from_corners(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(1..=20i64);
        let set: BTreeSet<i64> = (1..=n).filter(|_| r.gen_bool(0.4)).collect();
        let red = ap3_reduction(&set, n).unwrap();
        let corners = brute_force_find(&red.grid, &PatternKind::Corner, DEFAULT_SCAN_BUDGET).unwrap();
        let from_corners: BTreeSet<(i64, i64)> = corners.iter().map(|c| red.progression(c)).collect();
        let direct: BTreeSet<(i64, i64)> = three_term_progressions(&set).into_iter().collect();
        prop_assert_eq!(&direct, &ap3_oracle(&set));
        prop_assert_eq!(from_corners, direct);
    }

    #[test]
    fn pattern_search_agrees_with_brute_force(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = grid(seed, 2, 7);
        let size = r.gen_range(2..=4);
        let mut pattern: Vec<Vec<i64>> = Vec::new();
        while pattern.len() < size {
            let p = vec![r.gen_range(-2..=2), r.gen_range(-2..=2)];
            if !pattern.contains(&p) {
                pattern.push(p);
            }
        }
        let spread_ok = (0..2).all(|j| {
            let lo = pattern.iter().map(|p| p[j]).min().unwrap();
            let hi = pattern.iter().map(|p| p[j]).max().unwrap();
            hi - lo <= g.side() - 1
        });
        let brute = brute_force_find(&g, &PatternKind::Pattern(pattern.clone()), DEFAULT_SCAN_BUDGET).unwrap();
        match pattern_reduction(&pattern, &g) {
            Ok(Some(m)) => {
                prop_assert!(m.configuration.d != 0);
                prop_assert_eq!(&m.points, &m.configuration.pattern_points(&pattern));
                prop_assert!(m.points.iter().all(|p| g.contains(p)));
                prop_assert!(brute.contains(&m.configuration));
            }
            Ok(None) => prop_assert!(brute.is_empty()),
            Err(_) => prop_assert!(!spread_ok),
        }
    }

    #[test]
    fn symmetrization_picks_a_best_center(seed in any::<u64>()) {
        let g = grid(seed, 2, 7);
        let s = symmetrize(&g, SymmetrizeMode::Exhaustive).unwrap();
        let size = |c: &[i64]| g.points().iter().filter(|p| g.contains(&[c[0] - p[0], c[1] - p[1]])).count();
        let mut best = 0;
        for c0 in 2..=2 * g.side() {
            for c1 in 2..=2 * g.side() {
                best = best.max(size(&[c0, c1]));
            }
        }
        prop_assert_eq!(s.set.len(), best);
        for p in s.set.points() {
            prop_assert!(g.contains(p));
            prop_assert!(s.set.contains(&[s.center[0] - p[0], s.center[1] - p[1]]));
        }
    }

    #[test]
    fn simplex_counts_match_enumeration(seed in any::<u64>(), k in 1usize..=3) {
        let mut r = rng(seed);
        let n = if k == 3 { 3 } else { 4 };
        let part = VertexPartition::uniform(k + 1, n).unwrap();
        let dens: Vec<f64> = (0..k).map(|_| r.gen_range(0.4..=1.0)).collect();
        let h = hyperreg::chain::random_levelwise(&part, k, &dens, &mut r);
        let want = simplex_oracle(&h);
        prop_assert_eq!(simplex_tuples(&h).unwrap(), want.clone());
        prop_assert_eq!(count_simplices(&h).unwrap(), want.len() as u64);
    }
}

#[test]
fn planted_simplices_run_through_planted_edges() {
    let h = sparse_side_instance(2, 6, 4, &mut rng(9)).unwrap();
    let axes = h.partition().full_index().without(2);
    assert_eq!(h.slice_count(axes), 4);
    assert_eq!(count_simplices(&h).unwrap(), 4 * 6);
}

#[test]
fn complete_hypergraph_loses_nothing() {
    let h = Chain::complete(VertexPartition::uniform(3, 4).unwrap(), 2);
    let cfg = RemovalConfig {
        a: 0.5,
        regularize: RegularizeConfig { eta: EtaSchedule::Override(vec![0.05]), ..Default::default() },
    };
    let rep = removal_run(&h, &cfg).unwrap();
    assert!(rep.sides.iter().all(|s| s.removed == 0));
    assert_eq!(rep.simplices_before, 64);
    assert_eq!(rep.simplices_after, 64);
}

#[test]
fn grids_reject_bad_points() {
    assert!(GridSet::new(2, 3, vec![vec![0, 1]]).is_err());
    assert!(GridSet::new(2, 3, vec![vec![1, 1], vec![1, 1]]).is_err());
    assert!(GridSet::new(2, 3, vec![vec![1, 1, 1]]).is_err());
    assert!(pattern_reduction(&[vec![0, 0], vec![5, 0]], &GridSet::empty(2, 3).unwrap()).is_err());
}
