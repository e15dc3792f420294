mod common;

use std::collections::BTreeMap;

use common::*;
use hyperreg::regularity::*;
use hyperreg::{IndexSet, VertexPartition};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use proptest::prelude::*;
use rand::Rng;

fn system(seed: u64) -> PartitionSystem {
    let mut g = rng(seed);
    let r = g.gen_range(2..=3);
    let sizes: Vec<usize> = (0..r).map(|_| g.gen_range(1..=4)).collect();
    let k = g.gen_range(1..=r);
    PartitionSystem::random(&VertexPartition::new(sizes).unwrap(), k, &[2, 3, 2], &mut g)
}

fn full_tuples(sys: &PartitionSystem) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for_each_tuple(sys.partition().sizes(), |x| out.push(x.to_vec()));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn class_densities_match_brute_force(seed in any::<u64>()) {
        let sys = system(seed);
        let classes = Classes::new(&sys);
        for x in full_tuples(&sys) {
            for a in sys.indices() {
                prop_assert_eq!(classes.relative_density(a, &x), delta_oracle(&sys, a, &x));
            }
        }
    }

    #[test]
    fn induced_chain_densities_match_classes(seed in any::<u64>()) {
        let sys = system(seed);
        let classes = Classes::new(&sys);
        for x in full_tuples(&sys).into_iter().step_by(3) {
            let h = induced_chain(&sys, &x).unwrap();
            prop_assert!(h.verify_down_closed().is_ok());
            for a in sys.indices() {
                prop_assert_eq!(h.relative_density(a).unwrap(), classes.relative_density(a, &x));
            }
        }
    }

    #[test]
    fn energies_match_brute_force(seed in any::<u64>()) {
        let sys = system(seed);
        let e = energy_vector(&sys);
        for a in sys.indices() {
            prop_assert_eq!(&e.sigma[&a], &sigma_oracle(&sys, a));
        }
    }

    #[test]
    fn induced_chains_decompose_the_tuples(seed in any::<u64>()) {
        let sys = system(seed);
        let v = decomposition_check(&sys, CheckMode::Exhaustive).unwrap();
        prop_assert!(v.pass, "{:?}", v.counterexamples);
    }

    #[test]
    fn refinement_never_lowers_mean_square_density(seed in any::<u64>(), n in 1usize..40) {
        let mut g = rng(seed);
        let x: Vec<u32> = (0..n).map(|_| g.gen_range(0..3)).collect();
        let p: Vec<u32> = (0..n).map(|_| g.gen_range(0..3)).collect();
        let extra: Vec<u32> = (0..n).map(|_| g.gen_range(0..3)).collect();
        let q: Vec<u32> = p.iter().zip(&extra).map(|(a, b)| a * 3 + b).collect();
        prop_assert!(mean_square_density(&x, &q).unwrap() >= mean_square_density(&x, &p).unwrap());
    }

    #[test]
    fn function_msd_dominates_projections(seed in any::<u64>(), n in 1usize..30) {
        let mut g = rng(seed);
        let f: Vec<BigRational> = (0..n).map(|_| BigRational::new(BigInt::from(g.gen_range(-6..=6)), BigInt::from(6))).collect();
        let cells: Vec<u32> = (0..n).map(|_| g.gen_range(0..4)).collect();
        let w: Vec<BigRational> = (0..4).map(|_| BigRational::from_integer(BigInt::from(g.gen_range(-3..=3)))).collect();
        let gv: Vec<BigRational> = cells.iter().map(|&c| w[c as usize].clone()).collect();
        let msd = function_mean_square_density(&f, &cells).unwrap();
        let len = BigRational::from_integer(BigInt::from(n));
        let inner = f.iter().zip(&gv).fold(BigRational::zero(), |a, (x, y)| a + x * y) / len.clone();
        let norm = gv.iter().fold(BigRational::zero(), |a, y| a + y * y) / len;
        if !norm.is_zero() {
            prop_assert!(msd >= inner.clone() * inner / norm);
        }
    }

    #[test]
    fn sparse_fraction_is_small(seed in any::<u64>(), eps in 0.05f64..0.5) {
        let sys = system(seed);
        let classes = Classes::new(&sys);
        for a in sys.indices() {
            prop_assert!(sparse_fraction(&sys, &classes, a, eps) <= eps);
        }
    }

    #[test]
    fn common_refinement_refines_each(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = system(s1);
        let mut g = rng(s2);
        let b = PartitionSystem::random(a.partition(), a.k(), &[3, 3, 3], &mut g);
        let c = PartitionSystem::common_refinement(&[&a, &b]).unwrap();
        prop_assert!(c.refines(&a) && c.refines(&b));
        let triv = PartitionSystem::trivial(a.partition().clone(), a.k());
        prop_assert!(a.refines(&triv));
        let ea = energy_vector(&a);
        let ec = energy_vector(&c);
        // refining below A with the cells at A fixed refines the weak classes of K(A), so σ_A cannot drop
        for idx in a.indices() {
            let below: BTreeMap<IndexSet, CellLabels> = a.indices().into_iter()
                .map(|i| (i, if i == idx { a.cells(i).clone() } else { c.cells(i).clone() }))
                .collect();
            let t = PartitionSystem::from_labels(a.partition().clone(), a.k(), below).unwrap();
            prop_assert!(energy_vector(&t).sigma[&idx] >= ea.sigma[&idx]);
        }
        prop_assert_eq!(ec.sigma.len(), ea.sigma.len());
    }
}

#[test]
fn refinement_gain_on_a_checkerboard() {
    // H(12) = {(u, v) : u + v even}, so the trivial system is far from quasirandom
    let part = VertexPartition::uniform(2, 8).unwrap();
    let a = part.full_index();
    let space = part.tuples(a);
    let edges: Vec<hyperreg::Edge> = (0..space.len())
        .filter(|&c| space.decode(c).iter().sum::<usize>() % 2 == 0)
        .map(|c| space.edge(c))
        .collect();
    let h = hyperreg::down_closure(&edges, &part, 2).unwrap();
    let sys = PartitionSystem::top_split(&h);
    let classes = Classes::new(&sys);
    let x = vec![0, 0];
    let m = local_measure(&sys, &classes, a, &x);
    let eta = m.eta_star_proper.value() * 0.999;
    let out = refinement_step(&sys, &x, a, eta, 1, 64, 3).unwrap();
    assert!(out.accepted);
    assert!(out.gain_f64 >= eta * eta / 32.0);
    assert!(out.system().refines(&sys));
    assert!(refinement_step(&sys, &x, a, m.eta_star_proper.value() * 1.001, 1, 64, 3).is_err());
}

#[test]
fn regularize_leaves_complete_chains_alone() {
    let h = hyperreg::Chain::complete(VertexPartition::uniform(3, 3).unwrap(), 2);
    let sys = PartitionSystem::top_split(&h);
    let t = complete_template(3, 2).unwrap();
    let cfg = RegularizeConfig { eta: EtaSchedule::Override(vec![0.05]), ..Default::default() };
    let (q, trace) = regularize(&sys, &t, 0.1, &cfg).unwrap();
    assert!(trace.converged);
    assert_eq!(trace.final_failing_fraction, 0.0);
    assert_eq!(q, sys);
}

#[test]
fn double_octahedron_has_the_right_size() {
    let a = IndexSet::from_parts([0, 1, 2]);
    let d = double_octahedron(3, a).unwrap();
    assert_eq!(d.slice_count(IndexSet::singleton(0)), 3);
    // pairs inside layers {0,1} or {0,2}: 4 + 4 − 1
    assert_eq!(d.slice_count(IndexSet::from_parts([0, 1])), 7);
    assert_eq!(d.slice_count(a), 0);
}
