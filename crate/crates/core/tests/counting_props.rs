mod common;

use std::collections::BTreeMap;

use common::*;
use hyperreg::counting::*;
use hyperreg::quasirandom::EdgeFunction;
use hyperreg::{down_closure, Chain, Edge, VertexPartition};
use num_traits::ToPrimitive;
use proptest::prelude::*;
use rand::Rng;

fn host(seed: u64, r: usize, k: usize, cap: usize) -> Chain {
    let mut g = rng(seed);
    let sizes: Vec<usize> = (0..r).map(|_| g.gen_range(1..=cap)).collect();
    let dens: Vec<f64> = (0..k).map(|_| g.gen_range(0.3..=1.0)).collect();
    hyperreg::chain::random_levelwise(&VertexPartition::new(sizes).unwrap(), k, &dens, &mut g)
}

/// Path a–b–c plus a pendant vertex, with two template vertices in part 0.
fn two_copy_template() -> Chain {
    let p = VertexPartition::new(vec![2, 1, 1]).unwrap();
    let es = [
        Edge::new(vec![(0, 0), (1, 0)]).unwrap(),
        Edge::new(vec![(0, 1), (1, 0)]).unwrap(),
        Edge::new(vec![(1, 0), (2, 0)]).unwrap(),
    ];
    down_closure(&es, &p, 2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn counts_match_enumeration(seed in any::<u64>()) {
        for (t, h) in [
            (triangle(), host(seed, 3, 2, 5)),
            (two_copy_template(), host(seed ^ 3, 3, 2, 4)),
            (tetrahedron_boundary(), host(seed ^ 5, 4, 3, 3)),
        ] {
            let c = count_homomorphisms(&t, &h).unwrap();
            let (hits, total) = hom_count_oracle(&t, &h);
            prop_assert_eq!(c.exact_count, hits);
            prop_assert_eq!(c.total_maps, total);
            prop_assert_eq!(total_maps(&t, &h).unwrap(), total);
            prop_assert_eq!(c.probability.clone(), num_rational::BigRational::new(hits.into(), total.into()));
            let mut listed = 0u128;
            let mut bad = 0;
            enumerate_homomorphisms(&t, &h, |m| {
                listed += 1;
                for e in t.edges() {
                    let img: Vec<(usize, usize)> = e.vertices().iter().map(|&v| (v.0, m[&v])).collect();
                    if !h.contains(&Edge::new(img).unwrap()) {
                        bad += 1;
                    }
                }
            })
            .unwrap();
            prop_assert_eq!(listed, hits);
            prop_assert_eq!(bad, 0);
        }
    }

    #[test]
    fn sampled_probability_tracks_exact(seed in any::<u64>()) {
        let t = triangle();
        let h = host(seed, 3, 2, 6);
        let exact = count_homomorphisms(&t, &h).unwrap().probability.to_f64().unwrap();
        let (p, se) = hom_probability_sample(&t, &h, 20_000, seed).unwrap();
        // 6 standard errors, with a floor for p near 0 or 1
        prop_assert!((p - exact).abs() <= 6.0 * se + 2e-3);
    }

    #[test]
    fn indicator_weights_reproduce_the_count(seed in any::<u64>()) {
        let t = triangle();
        let h = host(seed, 3, 2, 5);
        let sub = down_closure(&[Edge::new(vec![(0, 0), (1, 0)]).unwrap()], t.partition(), 2).unwrap();
        let a = hyperreg::IndexSet::from_parts([0, 1]);
        let space = h.partition().tuples(a);
        let values: Vec<f64> = (0..space.len()).map(|c| f64::from(u8::from(h.contains_code(a, c)))).collect();
        let f = EdgeFunction::new(a, space.sizes().to_vec(), values).unwrap();
        let mut g = BTreeMap::new();
        g.insert(Edge::new(vec![(0, 0), (1, 0)]).unwrap(), f);
        let w = weighted_hom_expectation(&t, &sub, &g, &h).unwrap();
        let exact = count_homomorphisms(&t, &h).unwrap().probability.to_f64().unwrap();
        prop_assert!((w - exact).abs() <= 1e-12);
    }

    #[test]
    fn four_part_bound(seed in any::<u64>()) {
        let inst = FourPartInstance::random(&mut rng(seed), 6);
        let lhs = inst.expectation().unwrap().powi(4);
        let rhs = inst.bound().unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-9), "{} > {}", lhs, rhs);
        let g = inst.centered_xt().unwrap();
        let o = oct_oracle(&g);
        let lib = hyperreg::quasirandom::oct(&g, hyperreg::quasirandom::OctStrategy::Contraction).unwrap();
        prop_assert!((o - lib).abs() <= 1e-12 * o.abs().max(1e-300) + 1e-15);
    }
}

#[test]
fn complete_host_gives_probability_one() {
    let h = Chain::complete(VertexPartition::new(vec![3, 4, 2]).unwrap(), 2);
    let v = counting_lemma_check(&triangle(), &h, 0.01).unwrap();
    assert!(v.pass);
    assert_eq!(v.probability, 1.0);
    assert_eq!(v.expected, 1.0);
}

#[test]
fn weights_outside_the_host_are_rejected() {
    let t = triangle();
    let part = VertexPartition::new(vec![2, 2, 2]).unwrap();
    let h = down_closure(&[Edge::new(vec![(0, 0), (1, 0)]).unwrap()], &part, 2).unwrap();
    let sub = down_closure(&[Edge::new(vec![(0, 0), (1, 0)]).unwrap()], t.partition(), 2).unwrap();
    let a = hyperreg::IndexSet::from_parts([0, 1]);
    let f = EdgeFunction::new(a, vec![2, 2], vec![0.0, 0.5, 0.0, 0.0]).unwrap();
    let mut g = BTreeMap::new();
    g.insert(Edge::new(vec![(0, 0), (1, 0)]).unwrap(), f);
    assert!(weighted_hom_expectation(&t, &sub, &g, &h).is_err());
}
