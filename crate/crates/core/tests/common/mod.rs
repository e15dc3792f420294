// Brute-force oracles shared by the integration tests. Nothing here calls the library's own
// evaluation code paths; only data accessors are used.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use hyperreg::quasirandom::{EdgeFunction, Scalar};
use hyperreg::regularity::PartitionSystem;
use hyperreg::{down_closure, Chain, Edge, IndexSet, VertexPartition};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ratio(a: usize, b: usize) -> BigRational {
    BigRational::new(BigInt::from(a), BigInt::from(b))
}

/// Template on single-vertex parts with the given maximal edges (0-based parts).
pub fn template(r: usize, edges: &[&[usize]], k: usize) -> Chain {
    let p = VertexPartition::uniform(r, 1).unwrap();
    let es: Vec<Edge> = edges.iter().map(|e| Edge::new(e.iter().map(|&a| (a, 0)).collect()).unwrap()).collect();
    down_closure(&es, &p, k).unwrap()
}

pub fn triangle() -> Chain {
    template(3, &[&[0, 1], &[0, 2], &[1, 2]], 2)
}

/// The four triangles of a tetrahedron, with all their faces.
pub fn tetrahedron_boundary() -> Chain {
    template(4, &[&[0, 1, 2], &[0, 1, 3], &[0, 2, 3], &[1, 2, 3]], 3)
}

/// Odometer over a mixed-radix space; calls `f` on every digit vector.
pub fn for_each_tuple(sizes: &[usize], mut f: impl FnMut(&[usize])) {
    if sizes.contains(&0) {
        return;
    }
    let mut x = vec![0usize; sizes.len()];
    loop {
        f(&x);
        let mut i = sizes.len();
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            x[i] += 1;
            if x[i] < sizes[i] {
                break;
            }
            x[i] = 0;
        }
    }
}

fn row_major(coords: &[usize], sizes: &[usize]) -> usize {
    coords.iter().zip(sizes).fold(0, |acc, (c, n)| acc * n + c)
}

/// E over (x_i^0, x_i^1) of ∏_{ω∈{0,1}^s} f(x^ω), straight from the definition.
pub fn oct_oracle<T: Scalar>(f: &EdgeFunction<T>) -> T {
    let sizes = f.sizes().to_vec();
    let s = sizes.len();
    let doubled: Vec<usize> = sizes.iter().flat_map(|&n| [n, n]).collect();
    let mut total = T::zero();
    let mut count = 0usize;
    let mut point = vec![0usize; s];
    for_each_tuple(&doubled, |xs| {
        let mut prod = T::one();
        for omega in 0..(1usize << s) {
            for i in 0..s {
                point[i] = xs[2 * i + ((omega >> i) & 1)];
            }
            prod = prod * f.value(row_major(&point, &sizes)).clone();
        }
        total = total.clone() + prod;
        count += 1;
    });
    total / T::from_count(count)
}

pub fn random_function(rng: &mut ChaCha8Rng, index: IndexSet, sizes: Vec<usize>) -> EdgeFunction<f64> {
    let len: usize = sizes.iter().product();
    let values = (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    EdgeFunction::new(index, sizes, values).unwrap()
}

/// Random function with values p/q, |p| ≤ q ≤ 7.
pub fn random_rational_function(rng: &mut ChaCha8Rng, index: IndexSet, sizes: Vec<usize>) -> EdgeFunction<BigRational> {
    let len: usize = sizes.iter().product();
    let values = (0..len)
        .map(|_| {
            let q: i64 = rng.gen_range(1..=7);
            BigRational::new(BigInt::from(rng.gen_range(-q..=q)), BigInt::from(q))
        })
        .collect();
    EdgeFunction::new(index, sizes, values).unwrap()
}

/// Every nonempty subset of every edge, as a set of edges.
pub fn closure_oracle(edges: &[Edge]) -> BTreeSet<Edge> {
    let mut out = BTreeSet::new();
    for e in edges {
        let vs = e.vertices();
        for mask in 1u32..(1 << vs.len()) {
            let sub: Vec<(usize, usize)> =
                vs.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, v)| *v).collect();
            out.insert(Edge::new(sub).unwrap());
        }
    }
    out
}

pub fn random_edges(rng: &mut ChaCha8Rng, partition: &VertexPartition, k: usize, count: usize) -> Vec<Edge> {
    let r = partition.part_count();
    (0..count)
        .map(|_| {
            let size = rng.gen_range(1..=k.min(r));
            let mut parts: Vec<usize> = (0..r).collect();
            for i in 0..size {
                let j = rng.gen_range(i..r);
                parts.swap(i, j);
            }
            let vs = parts[..size].iter().map(|&p| (p, rng.gen_range(0..partition.size(p)))).collect();
            Edge::new(vs).unwrap()
        })
        .collect()
}

/// Number of template→host vertex maps sending every nonempty template edge to a host edge.
pub fn hom_count_oracle(template: &Chain, host: &Chain) -> (u128, u128) {
    let tp = template.partition();
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for p in 0..tp.part_count() {
        for j in 0..tp.size(p) {
            slots.push((p, j));
        }
    }
    let sizes: Vec<usize> = slots.iter().map(|&(p, _)| host.partition().size(p)).collect();
    let edges = template.edges();
    let mut hits = 0u128;
    let mut total = 0u128;
    for_each_tuple(&sizes, |img| {
        total += 1;
        let ok = edges.iter().all(|e| {
            let mapped: Vec<(usize, usize)> = e
                .vertices()
                .iter()
                .map(|&(p, j)| (p, img[slots.iter().position(|&s| s == (p, j)).unwrap()]))
                .collect();
            host.contains(&Edge::new(mapped).unwrap())
        });
        if ok {
            hits += 1;
        }
    });
    (hits, total)
}

/// Restriction of a full tuple to an index, as a code of K(C).
pub fn code_of(partition: &VertexPartition, c: IndexSet, x: &[usize]) -> usize {
    c.parts().fold(0, |acc, p| acc * partition.size(p) + x[p])
}

/// Labels of the restrictions of `x` to the nonempty subsets of `a` that pass `keep`.
fn signature(sys: &PartitionSystem, a: IndexSet, x: &[usize], proper: bool) -> Vec<u32> {
    a.nonempty_subsets()
        .filter(|&c| !proper || c != a)
        .map(|c| sys.label(c, code_of(sys.partition(), c, x)))
        .collect()
}

/// Full tuple whose coordinates on `a` are the given code and 0 elsewhere.
fn lift(partition: &VertexPartition, a: IndexSet, code: usize) -> Vec<usize> {
    let parts = a.to_vec();
    let mut x = vec![0usize; partition.part_count()];
    let mut rest = code;
    for &p in parts.iter().rev() {
        x[p] = rest % partition.size(p);
        rest /= partition.size(p);
    }
    x
}

/// δ_{A,x}: tuples of K(A) matching x's labels on every C ⊆ A, over those matching on every C ⊊ A.
pub fn delta_oracle(sys: &PartitionSystem, a: IndexSet, x: &[usize]) -> BigRational {
    let part = sys.partition();
    let strong = signature(sys, a, x, false);
    let weak = signature(sys, a, x, true);
    let len: usize = a.parts().map(|p| part.size(p)).product();
    let (mut s, mut w) = (0, 0);
    for code in 0..len {
        let y = lift(part, a, code);
        if signature(sys, a, &y, true) == weak {
            w += 1;
            if signature(sys, a, &y, false) == strong {
                s += 1;
            }
        }
    }
    ratio(s, w)
}

/// σ_A: mean-square density of the cells at A with respect to the weak classes of K(A).
pub fn sigma_oracle(sys: &PartitionSystem, a: IndexSet) -> BigRational {
    let part = sys.partition();
    let len: usize = a.parts().map(|p| part.size(p)).product();
    let mut groups: HashMap<Vec<u32>, HashMap<u32, usize>> = HashMap::new();
    for code in 0..len {
        let y = lift(part, a, code);
        let key = signature(sys, a, &y, true);
        *groups.entry(key).or_default().entry(sys.label(a, code)).or_insert(0) += 1;
    }
    let mut total = BigRational::zero();
    for cells in groups.values() {
        let size: usize = cells.values().sum();
        for &n in cells.values() {
            total += ratio(n * n, size);
        }
    }
    total / BigRational::from_integer(BigInt::from(len))
}

/// Mean-square density of the indicator of `inside` over `ground`, split by `cell_of`.
pub fn restricted_msd(ground: &[usize], inside: impl Fn(usize) -> bool, cell_of: impl Fn(usize) -> Vec<u32>) -> BigRational {
    let mut cells: HashMap<Vec<u32>, (usize, usize)> = HashMap::new();
    for &c in ground {
        let e = cells.entry(cell_of(c)).or_insert((0, 0));
        e.0 += 1;
        if inside(c) {
            e.1 += 1;
        }
    }
    let mut total = BigRational::zero();
    for &(n, h) in cells.values() {
        total += ratio(h * h, n);
    }
    total / BigRational::from_integer(BigInt::from(ground.len()))
}

/// Weak signature of a code of K(A) under `sys`.
pub fn weak_signature(sys: &PartitionSystem, a: IndexSet, code: usize) -> Vec<u32> {
    signature(sys, a, &lift(sys.partition(), a, code), true)
}

pub fn strong_signature(sys: &PartitionSystem, a: IndexSet, code: usize) -> Vec<u32> {
    signature(sys, a, &lift(sys.partition(), a, code), false)
}

/// Tuples with every k-face a top edge, by scanning the whole product.
pub fn simplex_oracle(chain: &Chain) -> Vec<Vec<usize>> {
    let part = chain.partition();
    let r = part.part_count();
    let mut out = Vec::new();
    for_each_tuple(part.sizes(), |x| {
        let ok = (0..r).all(|i| {
            let vs: Vec<(usize, usize)> = (0..r).filter(|&p| p != i).map(|p| (p, x[p])).collect();
            chain.contains(&Edge::new(vs).unwrap())
        });
        if ok {
            out.push(x.to_vec());
        }
    });
    out
}
