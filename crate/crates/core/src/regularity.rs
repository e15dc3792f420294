//! Partition systems, induced chains, mean-square density, the randomized refinement step
//! and the energy-increment regularization loop.

use std::collections::{BTreeMap, HashMap};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{down_closure, Chain, Edge, EdgeTable, IndexSet, TupleSpace, VertexPartition};
use crate::error::{Error, Result};
use crate::quasirandom::{oct, EdgeFunction, LogValue, OctStrategy, Scalar};

/// Labels of the tuples of one K(A), row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellLabels {
    pub count: u32,
    pub labels: Vec<u32>,
}

impl CellLabels {
    pub fn trivial(len: usize) -> Self {
        CellLabels { count: 1, labels: vec![0; len] }
    }

    /// Renumbers labels by first occurrence and drops unused ones.
    pub fn compacted(&self) -> Self {
        let mut map: HashMap<u32, u32> = HashMap::new();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                let n = map.len() as u32;
                *map.entry(l).or_insert(n)
            })
            .collect();
        CellLabels { count: map.len().max(1) as u32, labels }
    }
}

/// A partition of every K(A) with 1 ≤ |A| ≤ k.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionSystem {
    partition: VertexPartition,
    k: usize,
    cells: BTreeMap<IndexSet, CellLabels>,
}

impl PartitionSystem {
    pub fn trivial(partition: VertexPartition, k: usize) -> Self {
        let cells = IndexSet::all_up_to(partition.part_count(), k)
            .into_iter()
            .map(|a| (a, CellLabels::trivial(partition.tuples(a).len())))
            .collect();
        PartitionSystem { partition, k, cells }
    }

    /// Builds a system from explicit labels; indices left out are trivial.
    pub fn from_labels(
        partition: VertexPartition,
        k: usize,
        labels: BTreeMap<IndexSet, CellLabels>,
    ) -> Result<Self> {
        if k == 0 || k > partition.part_count() {
            return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={}", partition.part_count())));
        }
        let mut sys = Self::trivial(partition, k);
        for (a, l) in labels {
            sys.partition.check_index(a)?;
            if a.is_empty() || a.len() > k {
                return Err(Error::IndexTooLarge(a, k));
            }
            let len = sys.partition.tuples(a).len();
            if l.labels.len() != len {
                return Err(Error::Shape(format!("index {a} needs {len} labels, got {}", l.labels.len())));
            }
            if l.count == 0 || l.labels.iter().any(|&x| x >= l.count) {
                return Err(Error::Shape(format!("labels at {a} must lie in [0, {})", l.count)));
            }
            sys.cells.insert(a, l);
        }
        Ok(sys)
    }

    /// Top level split into {H(A), complement}, trivial below.
    pub fn top_split(chain: &Chain) -> Self {
        let k = chain.k();
        let mut sys = Self::trivial(chain.partition().clone(), k);
        for (a, cell) in sys.cells.iter_mut() {
            if a.len() == k {
                let mut labels = vec![1u32; cell.labels.len()];
                for c in chain.slice_codes(*a) {
                    labels[c] = 0;
                }
                *cell = CellLabels { count: 2, labels }.compacted();
            }
        }
        sys
    }

    /// Uniformly random labels with at most `max_cells[level-1]` cells at each level.
    pub fn random<R: Rng>(partition: &VertexPartition, k: usize, max_cells: &[u32], rng: &mut R) -> Self {
        let mut sys = Self::trivial(partition.clone(), k);
        for (a, cell) in sys.cells.iter_mut() {
            let m = max_cells[a.len() - 1].max(1);
            let n = rng.gen_range(1..=m);
            let labels = (0..cell.labels.len()).map(|_| rng.gen_range(0..n)).collect();
            *cell = CellLabels { count: n, labels };
        }
        sys
    }

    pub fn partition(&self) -> &VertexPartition {
        &self.partition
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> Vec<IndexSet> {
        IndexSet::all_up_to(self.partition.part_count(), self.k)
    }

    pub fn cells(&self, index: IndexSet) -> &CellLabels {
        &self.cells[&index]
    }

    pub fn label(&self, index: IndexSet, code: usize) -> u32 {
        self.cells[&index].labels[code]
    }

    pub fn cell_count(&self, index: IndexSet) -> u32 {
        self.cells[&index].count
    }

    pub fn all_cells(&self) -> &BTreeMap<IndexSet, CellLabels> {
        &self.cells
    }

    pub fn compacted(&self) -> Self {
        PartitionSystem {
            partition: self.partition.clone(),
            k: self.k,
            cells: self.cells.iter().map(|(a, l)| (*a, l.compacted())).collect(),
        }
    }

    /// True when every cell of `self` lies inside a cell of `coarser`, at every index.
    pub fn refines(&self, coarser: &PartitionSystem) -> bool {
        self.partition == coarser.partition
            && self.k == coarser.k
            && self.cells.iter().all(|(a, fine)| {
                let coarse = &coarser.cells[a];
                let mut seen: HashMap<u32, u32> = HashMap::new();
                fine.labels
                    .iter()
                    .zip(&coarse.labels)
                    .all(|(&f, &c)| *seen.entry(f).or_insert(c) == c)
            })
    }

    /// Coarsest common refinement.
    pub fn common_refinement(systems: &[&PartitionSystem]) -> Result<PartitionSystem> {
        let first = systems.first().ok_or_else(|| Error::InvalidArgument("no systems".into()))?;
        if systems.iter().any(|s| s.partition != first.partition || s.k != first.k) {
            return Err(Error::Shape("systems live on different vertex sets".into()));
        }
        let mut cells = BTreeMap::new();
        for a in first.indices() {
            let len = first.cells[&a].labels.len();
            let mut intern: HashMap<Vec<u32>, u32> = HashMap::new();
            let mut labels = Vec::with_capacity(len);
            for c in 0..len {
                let key: Vec<u32> = systems.iter().map(|s| s.cells[&a].labels[c]).collect();
                let n = intern.len() as u32;
                labels.push(*intern.entry(key).or_insert(n));
            }
            cells.insert(a, CellLabels { count: intern.len().max(1) as u32, labels });
        }
        Ok(PartitionSystem { partition: first.partition.clone(), k: first.k, cells })
    }
}

/// Strong and weak equivalence classes of every K(A), numbered by first occurrence.
///
/// Two tuples of index A are strongly equivalent when their restrictions carry equal labels at
/// every nonempty C ⊆ A, and weakly equivalent when this holds for every proper C.
#[derive(Clone, Debug)]
pub struct Classes {
    pub strong: BTreeMap<IndexSet, Vec<u32>>,
    pub weak: BTreeMap<IndexSet, Vec<u32>>,
    pub strong_size: BTreeMap<IndexSet, Vec<usize>>,
    pub weak_size: BTreeMap<IndexSet, Vec<usize>>,
    spaces: BTreeMap<IndexSet, TupleSpace>,
}

impl Classes {
    pub fn new(sys: &PartitionSystem) -> Self {
        let mut strong: BTreeMap<IndexSet, Vec<u32>> = BTreeMap::new();
        let mut weak = BTreeMap::new();
        let mut strong_size = BTreeMap::new();
        let mut weak_size = BTreeMap::new();
        let mut spaces = BTreeMap::new();
        for a in sys.indices() {
            let space = sys.partition.tuples(a);
            let faces: Vec<(IndexSet, TupleSpace)> = if a.len() == 1 {
                Vec::new()
            } else {
                a.faces().map(|f| (f, sys.partition.tuples(f))).collect()
            };
            let labels = &sys.cells[&a].labels;
            let mut s_intern: HashMap<(u32, u32), u32> = HashMap::new();
            let mut w_intern: HashMap<Vec<u32>, u32> = HashMap::new();
            let mut s_ids = Vec::with_capacity(space.len());
            let mut w_ids = Vec::with_capacity(space.len());
            let mut key = Vec::with_capacity(faces.len());
            for c in 0..space.len() {
                key.clear();
                for (f, fs) in &faces {
                    key.push(strong[f][space.project(c, fs)]);
                }
                let n = w_intern.len() as u32;
                let w = match w_intern.get(&key) {
                    Some(&w) => w,
                    None => {
                        w_intern.insert(key.clone(), n);
                        n
                    }
                };
                let n = s_intern.len() as u32;
                let s = *s_intern.entry((w, labels[c])).or_insert(n);
                s_ids.push(s);
                w_ids.push(w);
            }
            let mut ss = vec![0usize; s_intern.len()];
            for &s in &s_ids {
                ss[s as usize] += 1;
            }
            let mut ws = vec![0usize; w_intern.len()];
            for &w in &w_ids {
                ws[w as usize] += 1;
            }
            strong.insert(a, s_ids);
            weak.insert(a, w_ids);
            strong_size.insert(a, ss);
            weak_size.insert(a, ws);
            spaces.insert(a, space);
        }
        Classes { strong, weak, strong_size, weak_size, spaces }
    }

    pub fn space(&self, index: IndexSet) -> &TupleSpace {
        &self.spaces[&index]
    }

    /// δ_{A,x} = |H(A,x)| / |H_*(A,x)|, the strong class of x(A) inside its weak class.
    pub fn relative_density(&self, index: IndexSet, x: &[usize]) -> BigRational {
        let c = self.spaces[&index].encode_full(x);
        let s = self.strong_size[&index][self.strong[&index][c] as usize];
        let w = self.weak_size[&index][self.weak[&index][c] as usize];
        BigRational::new(BigInt::from(s), BigInt::from(w))
    }

    pub fn ln_relative_density(&self, index: IndexSet, x_code: usize) -> f64 {
        let s = self.strong_size[&index][self.strong[&index][x_code] as usize];
        let w = self.weak_size[&index][self.weak[&index][x_code] as usize];
        (s as f64).ln() - (w as f64).ln()
    }
}

/// The chain ℋ(x): at each index, the tuples strongly equivalent to x's restriction.
pub fn induced_chain(sys: &PartitionSystem, x: &[usize]) -> Result<Chain> {
    if x.len() != sys.partition.part_count() {
        return Err(Error::Shape(format!("tuple has {} coordinates, expected {}", x.len(), sys.partition.part_count())));
    }
    for (p, &v) in x.iter().enumerate() {
        if v >= sys.partition.size(p) {
            return Err(Error::VertexOutOfRange { part: p + 1, vertex: v, size: sys.partition.size(p) });
        }
    }
    let mut tables: BTreeMap<IndexSet, EdgeTable> = BTreeMap::new();
    for a in sys.indices() {
        let space = sys.partition.tuples(a);
        let want = sys.label(a, space.encode_full(x));
        let faces: Vec<(TupleSpace, Option<&EdgeTable>)> = if a.len() == 1 {
            Vec::new()
        } else {
            a.faces().map(|f| (sys.partition.tuples(f), tables.get(&f))).collect()
        };
        let codes: Vec<usize> = (0..space.len())
            .filter(|&c| {
                sys.label(a, c) == want
                    && faces.iter().all(|(fs, t)| t.is_some_and(|t| t.contains(space.project(c, fs))))
            })
            .collect();
        let table = EdgeTable::from_codes(space.len(), codes);
        tables.insert(a, table);
    }
    Ok(Chain::from_tables_unchecked(sys.partition.clone(), sys.k, tables))
}

/// Σ_i Σ_j (|Y_j|/|U|)(|X_i∩Y_j|/|Y_j|)² for partitions given as label arrays over U.
pub fn mean_square_density(p: &[u32], q: &[u32]) -> Result<BigRational> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("ground sets differ: {} vs {}", p.len(), q.len())));
    }
    if p.is_empty() {
        return Err(Error::Shape("empty ground set".into()));
    }
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    let mut qsize: HashMap<u32, u64> = HashMap::new();
    for (&a, &b) in p.iter().zip(q) {
        *joint.entry((a, b)).or_insert(0) += 1;
        *qsize.entry(b).or_insert(0) += 1;
    }
    let mut per_q: BTreeMap<u32, BigInt> = BTreeMap::new();
    for ((_, b), n) in joint {
        *per_q.entry(b).or_insert_with(BigInt::zero) += BigInt::from(n) * BigInt::from(n);
    }
    let mut total = BigRational::zero();
    for (b, sq) in per_q {
        total += BigRational::new(sq, BigInt::from(qsize[&b]));
    }
    Ok(total / BigRational::from_integer(BigInt::from(p.len())))
}

/// Σ_cells (|B|/|U|)(E_B f)², the mean-square density of a function with respect to a partition.
pub fn function_mean_square_density<T: Scalar>(f: &[T], cells: &[u32]) -> Result<T> {
    if f.len() != cells.len() || f.is_empty() {
        return Err(Error::Shape("function and partition must share a nonempty ground set".into()));
    }
    let mut sums: BTreeMap<u32, (T, usize)> = BTreeMap::new();
    for (v, &c) in f.iter().zip(cells) {
        let e = sums.entry(c).or_insert((T::zero(), 0));
        e.0 = e.0.clone() + v.clone();
        e.1 += 1;
    }
    let mut total = T::zero();
    for (_, (s, n)) in sums {
        total = total + s.clone() * s / T::from_count(n);
    }
    Ok(total / T::from_count(f.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEnergy {
    pub index: IndexSet,
    /// Exact σ_A as "p/q".
    pub sigma: String,
    pub value: f64,
}

/// σ_A for every index, as exact rationals.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyVector {
    pub sigma: BTreeMap<IndexSet, BigRational>,
}

impl EnergyVector {
    pub fn entries(&self) -> Vec<IndexEnergy> {
        let mut keys: Vec<IndexSet> = self.sigma.keys().copied().collect();
        keys.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
        keys.into_iter()
            .map(|a| IndexEnergy {
                index: a,
                sigma: self.sigma[&a].to_string(),
                value: self.sigma[&a].to_f64().unwrap_or(f64::NAN),
            })
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.sigma.values().map(|s| s.to_f64().unwrap_or(0.0)).sum()
    }
}

pub fn energy_vector(sys: &PartitionSystem) -> EnergyVector {
    energy_vector_with(sys, &Classes::new(sys))
}

pub fn energy_vector_with(sys: &PartitionSystem, classes: &Classes) -> EnergyVector {
    let sigma = sys
        .indices()
        .into_par_iter()
        .map(|a| {
            let s = mean_square_density(&sys.cells[&a].labels, &classes.weak[&a]).expect("same ground set");
            (a, s)
        })
        .collect();
    EnergyVector { sigma }
}

/// Fraction of tuples x with δ_{A,x} < ε / n_A, over all x.
pub fn sparse_fraction(sys: &PartitionSystem, classes: &Classes, index: IndexSet, epsilon: f64) -> f64 {
    let space = classes.space(index);
    let n_a = sys.cell_count(index) as f64;
    let bad = (0..space.len())
        .filter(|&c| {
            let s = classes.strong_size[&index][classes.strong[&index][c] as usize] as f64;
            let w = classes.weak_size[&index][classes.weak[&index][c] as usize] as f64;
            s / w < epsilon / n_a
        })
        .count();
    // every x restricts to exactly ∏_{i∉A} N_i tuples per code, so the fraction over codes is the fraction over x
    bad as f64 / space.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckMode {
    Exhaustive,
    Sampled { samples: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionVerdict {
    pub tuples_checked: usize,
    pub distinct_chains: usize,
    pub counterexamples: Vec<String>,
    pub pass: bool,
}

/// Checks that slices of induced chains are equal or disjoint and that each x lies in exactly one chain.
pub fn decomposition_check(sys: &PartitionSystem, mode: CheckMode) -> Result<DecompositionVerdict> {
    let xs = tuples_for(sys.partition(), mode, usize::MAX)?;
    let mut chains: Vec<Chain> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    for x in &xs {
        let c = induced_chain(sys, x)?;
        match chains.iter().position(|d| *d == c) {
            Some(i) => owner.push(i),
            None => {
                chains.push(c);
                owner.push(chains.len() - 1);
            }
        }
    }
    let mut counterexamples = Vec::new();
    for c in &chains {
        if let Err(e) = c.verify_down_closed() {
            counterexamples.push(format!("induced chain not down-closed: {e}"));
        }
    }
    for a in sys.indices() {
        for i in 0..chains.len() {
            let si = chains[i].slice_codes(a);
            for j in i + 1..chains.len() {
                let sj = chains[j].slice_codes(a);
                let shared = si.iter().filter(|c| chains[j].contains_code(a, **c)).count();
                if shared != 0 && (shared != si.len() || shared != sj.len()) {
                    counterexamples.push(format!("slices at {a} of chains {i} and {j} overlap without being equal"));
                }
            }
        }
    }
    let full = sys.partition.full_index();
    for (x, &o) in xs.iter().zip(&owner) {
        let containing = chains
            .iter()
            .filter(|c| {
                full.nonempty_subsets()
                    .filter(|s| s.len() <= sys.k)
                    .all(|s| c.contains_code(s, sys.partition.tuples(s).encode_full(x)))
            })
            .count();
        if containing != 1 {
            counterexamples.push(format!("tuple {x:?} lies in {containing} chains"));
        }
        if !chains[o]
            .slice_codes(IndexSet::singleton(0))
            .contains(&x[0])
        {
            counterexamples.push(format!("tuple {x:?} is missing from its own chain"));
        }
    }
    Ok(DecompositionVerdict {
        tuples_checked: xs.len(),
        distinct_chains: chains.len(),
        pass: counterexamples.is_empty(),
        counterexamples,
    })
}

fn tuples_for(partition: &VertexPartition, mode: CheckMode, limit: usize) -> Result<Vec<Vec<usize>>> {
    let full = partition.tuples(partition.full_index());
    match mode {
        CheckMode::Exhaustive => {
            let total = partition.tuple_count().filter(|&t| t <= limit).ok_or_else(|| {
                Error::BudgetExceeded("too many tuples for exhaustive enumeration".into())
            })?;
            Ok((0..total).map(|c| full.decode(c)).collect())
        }
        CheckMode::Sampled { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..samples)
                .map(|_| partition.sizes().iter().map(|&n| rng.gen_range(0..n)).collect())
                .collect())
        }
    }
}

/// Proper-subset and full reference products for H(A,x) relative to ℋ(x).
struct LocalSlice {
    /// Box coordinates: for each part of A, the vertices strongly equivalent to x's vertex.
    boxes: Vec<Vec<usize>>,
    /// Local box codes of the weak class of x(A) and whether each is in the strong class.
    star: Vec<(usize, bool)>,
    strong: usize,
    weak: usize,
    /// Σ_{C⊊A, |C|≥2} 2^{|C|} ln δ_{C,x}.
    ln_ref_inner: f64,
    /// Σ_{i∈A} 2 ln(n_i/N_i).
    ln_box: f64,
}

fn local_slice(sys: &PartitionSystem, classes: &Classes, index: IndexSet, x: &[usize]) -> LocalSlice {
    let parts = index.to_vec();
    let space = classes.space(index);
    let mut boxes = Vec::new();
    let mut ln_box = 0.0;
    for &p in &parts {
        let single = IndexSet::singleton(p);
        let ids = &classes.strong[&single];
        let want = ids[x[p]];
        let verts: Vec<usize> = (0..ids.len()).filter(|&v| ids[v] == want).collect();
        ln_box += 2.0 * ((verts.len() as f64).ln() - (ids.len() as f64).ln());
        boxes.push(verts);
    }
    let mut local_of: Vec<HashMap<usize, usize>> = Vec::new();
    for b in &boxes {
        local_of.push(b.iter().enumerate().map(|(i, &v)| (v, i)).collect());
    }
    let box_sizes: Vec<usize> = boxes.iter().map(|b| b.len()).collect();
    let xc = space.encode_full(x);
    let sid = classes.strong[&index][xc];
    let wid = classes.weak[&index][xc];
    let mut star = Vec::new();
    for c in 0..space.len() {
        if classes.weak[&index][c] == wid {
            let coords = space.decode(c);
            let mut local = 0;
            for (i, v) in coords.iter().enumerate() {
                local = local * box_sizes[i] + local_of[i][v];
            }
            star.push((local, classes.strong[&index][c] == sid));
        }
    }
    let mut ln_ref_inner = 0.0;
    for c in index.proper_subsets().filter(|c| c.len() >= 2) {
        let cc = classes.space(c).encode_full(x);
        ln_ref_inner += (1u64 << c.len()) as f64 * classes.ln_relative_density(c, cc);
    }
    let _ = sys;
    LocalSlice {
        boxes,
        strong: classes.strong_size[&index][sid as usize],
        weak: classes.weak_size[&index][wid as usize],
        star,
        ln_ref_inner,
        ln_box,
    }
}

impl LocalSlice {
    fn box_sizes(&self) -> Vec<usize> {
        self.boxes.iter().map(|b| b.len()).collect()
    }

    fn ln_delta(&self) -> f64 {
        (self.strong as f64).ln() - (self.weak as f64).ln()
    }

    fn deviation(&self, index: IndexSet) -> EdgeFunction<f64> {
        let sizes = self.box_sizes();
        let len: usize = sizes.iter().product();
        let d = self.strong as f64 / self.weak as f64;
        let mut values = vec![0.0; len];
        for &(c, inside) in &self.star {
            values[c] = if inside { 1.0 - d } else { -d };
        }
        EdgeFunction::new(index, sizes, values).expect("values within [-1,1]")
    }

    /// ln Oct(f) over the whole of K(A); −∞ when Oct vanishes.
    fn ln_oct(&self, index: IndexSet) -> f64 {
        let o = oct(&self.deviation(index), OctStrategy::Contraction).expect("nonempty index");
        if o <= 0.0 {
            f64::NEG_INFINITY
        } else {
            o.ln() + self.ln_box
        }
    }
}

/// Oct and measured η of H(A,x) relative to ℋ(x), in both reference conventions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalMeasure {
    pub ln_oct: f64,
    /// ln δ_{A,x}.
    pub ln_delta: f64,
    /// η* against ∏_{C⊆A} δ_{C,x}^{2^{|C|}}.
    pub eta_star: LogValue,
    /// η* against ∏_{C⊊A} δ_{C,x}^{2^{|C|}}.
    pub eta_star_proper: LogValue,
}

pub fn local_measure(sys: &PartitionSystem, classes: &Classes, index: IndexSet, x: &[usize]) -> LocalMeasure {
    let slice = local_slice(sys, classes, index, x);
    let ln_oct = slice.ln_oct(index);
    let ln_delta = slice.ln_delta();
    let proper = slice.ln_ref_inner + slice.ln_box;
    let full = proper + (1u64 << index.len()) as f64 * ln_delta;
    let as_log = |r: f64| if ln_oct == f64::NEG_INFINITY { LogValue::ZERO } else { LogValue(ln_oct - r) };
    LocalMeasure { ln_oct, ln_delta, eta_star: as_log(full), eta_star_proper: as_log(proper) }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaceCells {
    pub index: IndexSet,
    /// Cells the face slice was split into.
    pub cells: usize,
}

/// Result of one refinement attempt series.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefinementOutcome {
    #[serde(skip)]
    pub system: Option<PartitionSystem>,
    pub target: IndexSet,
    pub representative: Vec<usize>,
    pub eta: LogValue,
    pub eta_star: LogValue,
    pub delta: String,
    pub star_size: usize,
    pub slice_size: usize,
    pub index_size: usize,
    /// Mean-square density of the H(A,x) indicator over the star after refinement, exact.
    pub msd_after: String,
    pub gain: String,
    pub gain_f64: f64,
    /// η²/32.
    pub threshold: f64,
    pub accepted: bool,
    pub retries_used: usize,
    pub r_required: u64,
    pub r_used: usize,
    pub r_capped: bool,
    pub face_cells: Vec<FaceCells>,
    /// ln of the double-octahedron density product ∏_{C⊊A} δ_{C,x}^{2^{|C|+1}−1}.
    pub ln_double_octahedron: f64,
    /// ln of ∏_{C⊊A} δ_{C,x}^{2^{|C|}}.
    pub ln_beta: f64,
    /// |H_*(A,x)| / |K(A)|.
    pub zeta: f64,
}

impl RefinementOutcome {
    pub fn system(&self) -> &PartitionSystem {
        self.system.as_ref().expect("outcome carries its system")
    }

    pub fn gain_exact(&self) -> BigRational {
        self.gain.parse().expect("gain is a rational")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineParams {
    /// Requested selection count; raised to the double-octahedron requirement.
    pub r: usize,
    pub r_cap: usize,
    pub budget: usize,
    pub seed: u64,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams { r: 1, r_cap: 8, budget: 64, seed: 0 }
    }
}

/// Splits the (|A|−1)-faces of ℋ(A,x) so that the H(A,x) indicator gains mean-square density.
/// `eta` is measured against the proper-subset reference ∏_{C⊊A} δ_{C,x}^{2^{|C|}}.
pub fn refinement_step(
    sys: &PartitionSystem,
    x: &[usize],
    index: IndexSet,
    eta: f64,
    r: usize,
    budget: usize,
    seed: u64,
) -> Result<RefinementOutcome> {
    let classes = Classes::new(sys);
    let params = RefineParams { r, budget, seed, ..RefineParams::default() };
    refinement_step_with(sys, &classes, x, index, LogValue::from_value(eta), params)
}

pub fn refinement_step_with(
    sys: &PartitionSystem,
    classes: &Classes,
    x: &[usize],
    index: IndexSet,
    eta: LogValue,
    params: RefineParams,
) -> Result<RefinementOutcome> {
    if x.len() != sys.partition.part_count() || x.iter().zip(sys.partition.sizes()).any(|(v, n)| v >= n) {
        return Err(Error::Shape("representative tuple does not fit the partition".into()));
    }
    sys.partition.check_index(index)?;
    if index.len() < 2 || index.len() > sys.k {
        return Err(Error::InvalidArgument(format!("refinement needs 2 ≤ |A| ≤ k, got {index}")));
    }
    if params.budget == 0 {
        return Err(Error::InvalidArgument("retry budget must be positive".into()));
    }
    let slice = local_slice(sys, classes, index, x);
    let ln_oct = slice.ln_oct(index);
    let ln_ref = slice.ln_ref_inner + slice.ln_box;
    let eta_star = if ln_oct == f64::NEG_INFINITY { LogValue::ZERO } else { LogValue(ln_oct - ln_ref) };
    if eta_star.ln() <= eta.ln() {
        return Err(Error::PreconditionNotViolated(format!(
            "H({index},x) has η* = {} ≤ η = {}",
            eta_star.value(),
            eta.value()
        )));
    }
    let s = index.len();
    let parts = index.to_vec();
    let sizes = slice.box_sizes();

    // double-octahedron density: every nonempty C ⊊ A with multiplicity 2^{|C|+1} − 1
    let mut ln_d = 0.0;
    let mut ln_beta = 0.0;
    for c in index.proper_subsets().filter(|c| !c.is_empty()) {
        let l = classes.ln_relative_density(c, classes.space(c).encode_full(x));
        ln_d += ((1u64 << (c.len() + 1)) - 1) as f64 * l;
        ln_beta += (1u64 << c.len()) as f64 * l;
    }
    let r_required = {
        let v = (-ln_d).exp().ceil();
        if v.is_finite() && v < u64::MAX as f64 { (v as u64).max(1) } else { u64::MAX }
    };
    let wanted = (params.r.max(1) as u64).max(r_required);
    let r_capped = wanted > params.r_cap as u64;
    let r_used = wanted.min(params.r_cap as u64) as usize;

    // local geometry: face i drops coordinate i
    let strides: Vec<usize> = (0..s).map(|i| sizes[i + 1..].iter().product()).collect();
    let face_sizes: Vec<Vec<usize>> =
        (0..s).map(|i| (0..s).filter(|&j| j != i).map(|j| sizes[j]).collect()).collect();
    let face_code = |i: usize, coords: &[usize]| -> usize {
        let mut c = 0;
        for j in 0..s {
            if j != i {
                c = c * sizes[j] + coords[j];
            }
        }
        c
    };
    let decode = |code: usize| -> Vec<usize> { (0..s).map(|i| code / strides[i] % sizes[i]).collect() };

    // faces in ℋ(x): the strong class of x restricted to A∖{a_i}, in local coordinates
    let face_index: Vec<IndexSet> = parts.iter().map(|&p| index.without(p)).collect();
    let mut face_members: Vec<Vec<usize>> = Vec::with_capacity(s);
    let mut face_local_of: Vec<HashMap<usize, usize>> = Vec::with_capacity(s);
    for i in 0..s {
        let fi = face_index[i];
        let fspace = classes.space(fi);
        let sid = classes.strong[&fi][fspace.encode_full(x)];
        let mut members = Vec::new();
        let mut map = HashMap::new();
        let local_boxes: Vec<HashMap<usize, usize>> = (0..s)
            .filter(|&j| j != i)
            .map(|j| slice.boxes[j].iter().enumerate().map(|(l, &v)| (v, l)).collect())
            .collect();
        for c in 0..fspace.len() {
            if classes.strong[&fi][c] == sid {
                let coords = fspace.decode(c);
                let mut local = 0;
                for (t, v) in coords.iter().enumerate() {
                    local = local * face_sizes[i][t] + local_boxes[t][v];
                }
                map.insert(local, members.len());
                members.push(local);
            }
        }
        face_members.push(members);
        face_local_of.push(map);
    }
    let star_faces: Vec<Vec<usize>> = slice
        .star
        .iter()
        .map(|&(c, _)| {
            let coords = decode(c);
            (0..s).map(|i| face_local_of[i][&face_code(i, &coords)]).collect()
        })
        .collect();

    let dev = slice.deviation(index);
    let fvals = dev.values();
    let d_exact = BigRational::new(BigInt::from(slice.strong), BigInt::from(slice.weak));
    let d2 = &d_exact * &d_exact;
    let ln_threshold = 2.0 * eta.ln() - 32f64.ln();

    let mut best: Option<(BigRational, usize, Vec<Vec<u32>>)> = None;
    let mut accepted = false;
    let mut retries_used = 0;
    for attempt in 0..params.budget {
        retries_used = attempt + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(attempt as u64);
        let pool_size = 4 * r_used;
        // u[w][i][m]: rounded factor of witness w on member m of face i
        let mut pool: Vec<Vec<Vec<i8>>> = Vec::with_capacity(pool_size);
        for _ in 0..pool_size {
            let y: Vec<usize> = sizes.iter().map(|&n| rng.gen_range(0..n)).collect();
            let mut per_face = Vec::with_capacity(s);
            for i in 0..s {
                let mut us = Vec::with_capacity(face_members[i].len());
                let mut coords = vec![0usize; s];
                for &m in &face_members[i] {
                    // recover the coordinates other than i from the face code
                    let mut rest = m;
                    for j in (0..s).rev() {
                        if j != i {
                            coords[j] = rest % sizes[j];
                            rest /= sizes[j];
                        }
                    }
                    let mut g = 1.0;
                    let free = s - 1 - i;
                    for bits in 0..(1usize << free) {
                        let mut code = 0;
                        for j in 0..s {
                            let v = if j < i {
                                coords[j]
                            } else if j == i {
                                y[i]
                            } else if bits >> (j - i - 1) & 1 == 1 {
                                y[j]
                            } else {
                                coords[j]
                            };
                            code += v * strides[j];
                        }
                        g *= fvals[code];
                        if g == 0.0 {
                            break;
                        }
                    }
                    let draw: f64 = rng.gen();
                    us.push(if g >= 0.0 {
                        i8::from(draw < g)
                    } else {
                        -i8::from(draw < -g)
                    });
                }
                per_face.push(us);
            }
            pool.push(per_face);
        }
        let chosen: Vec<usize> = (0..r_used).map(|_| rng.gen_range(0..pool_size)).collect();
        let mut face_cell: Vec<Vec<u32>> = Vec::with_capacity(s);
        for i in 0..s {
            let mut intern: HashMap<Vec<i8>, u32> = HashMap::new();
            let mut cells = Vec::with_capacity(face_members[i].len());
            for m in 0..face_members[i].len() {
                let key: Vec<i8> = chosen.iter().map(|&w| pool[w][i][m]).collect();
                let n = intern.len() as u32;
                cells.push(*intern.entry(key).or_insert(n));
            }
            face_cell.push(cells);
        }
        let mut zs: HashMap<Vec<u32>, (u64, u64)> = HashMap::new();
        for (t, &(_, inside)) in slice.star.iter().enumerate() {
            let key: Vec<u32> = (0..s).map(|i| face_cell[i][star_faces[t][i]]).collect();
            let e = zs.entry(key).or_insert((0, 0));
            e.0 += 1;
            e.1 += u64::from(inside);
        }
        let mut msd = BigRational::zero();
        for (_, (n, h)) in zs {
            msd += BigRational::new(BigInt::from(h * h), BigInt::from(n));
        }
        msd /= BigRational::from_integer(BigInt::from(slice.weak));
        let gain = &msd - &d2;
        let gain_f = gain.to_f64().unwrap_or(0.0);
        let ok = eta.is_zero() || (gain_f > 0.0 && gain_f.ln() >= ln_threshold);
        let better = best.as_ref().map_or(true, |(g, _, _)| gain > *g);
        if better {
            best = Some((gain, attempt, face_cell));
        }
        if ok {
            accepted = true;
            break;
        }
    }
    let (gain, _, face_cell) = best.expect("budget is positive");

    // Q: faces of A get (old label, 0) outside ℋ(x) and (old label, 1 + cell) inside
    let mut cells = sys.cells.clone();
    let mut face_report = Vec::new();
    for i in 0..s {
        let fi = face_index[i];
        let fspace = classes.space(fi);
        let sid = classes.strong[&fi][fspace.encode_full(x)];
        let old = &sys.cells[&fi];
        let local_boxes: Vec<HashMap<usize, usize>> = (0..s)
            .filter(|&j| j != i)
            .map(|j| slice.boxes[j].iter().enumerate().map(|(l, &v)| (v, l)).collect())
            .collect();
        let mut labels = Vec::with_capacity(old.labels.len());
        let mut intern: HashMap<(u32, u32), u32> = HashMap::new();
        for c in 0..fspace.len() {
            let sub = if classes.strong[&fi][c] == sid {
                let coords = fspace.decode(c);
                let mut local = 0;
                for (t, v) in coords.iter().enumerate() {
                    local = local * face_sizes[i][t] + local_boxes[t][v];
                }
                1 + face_cell[i][face_local_of[i][&local]]
            } else {
                0
            };
            let n = intern.len() as u32;
            labels.push(*intern.entry((old.labels[c], sub)).or_insert(n));
        }
        let n_cells = face_cell[i].iter().copied().max().map_or(0, |m| m as usize + 1);
        face_report.push(FaceCells { index: fi, cells: n_cells });
        cells.insert(fi, CellLabels { count: intern.len() as u32, labels });
    }
    let system = PartitionSystem { partition: sys.partition.clone(), k: sys.k, cells };
    let msd_after = &gain + &d2;
    let index_size = classes.space(index).len();
    Ok(RefinementOutcome {
        system: Some(system),
        target: index,
        representative: x.to_vec(),
        eta,
        eta_star,
        delta: d_exact.to_string(),
        star_size: slice.weak,
        slice_size: slice.strong,
        index_size,
        msd_after: msd_after.to_string(),
        gain_f64: gain.to_f64().unwrap_or(0.0),
        gain: gain.to_string(),
        threshold: (ln_threshold).exp(),
        accepted,
        retries_used,
        r_required,
        r_used,
        r_capped,
        face_cells: face_report,
        ln_double_octahedron: ln_d,
        ln_beta,
        zeta: slice.weak as f64 / index_size as f64,
    })
}

/// The double octahedron over index A: vertices A×{0,1,2}, edges of size < |A| meeting each part at most
/// once and missing one of the layers 1 and 2.
pub fn double_octahedron(r: usize, index: IndexSet) -> Result<Chain> {
    if index.len() < 2 {
        return Err(Error::InvalidArgument("double octahedron needs |A| ≥ 2".into()));
    }
    let sizes: Vec<usize> = (0..r).map(|p| if index.contains(p) { 3 } else { 1 }).collect();
    let partition = VertexPartition::new(sizes)?;
    let mut edges = Vec::new();
    for sub in index.nonempty_subsets().filter(|c| c.len() < index.len()) {
        let members = sub.to_vec();
        for layer in [1usize, 2] {
            for bits in 0..(1usize << members.len()) {
                let vs: Vec<(usize, usize)> = members
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| (p, if bits >> t & 1 == 1 { layer } else { 0 }))
                    .collect();
                edges.push(Edge::new(vs)?);
            }
        }
    }
    down_closure(&edges, &partition, index.len() - 1)
}

/// Disjoint union of the template with a double octahedron for every index of size 2..=k.
pub fn augment_with_double_octahedra(template: &Chain, k: usize) -> Result<Chain> {
    let r = template.part_count();
    let mut offsets: Vec<usize> = template.partition().sizes().to_vec();
    let mut edges = template.edges();
    let mut sizes = offsets.clone();
    let mut extra = Vec::new();
    for a in IndexSet::all_up_to(r, k).into_iter().filter(|a| a.len() >= 2) {
        let d = double_octahedron(r, a)?;
        for p in a.parts() {
            sizes[p] += 3;
        }
        extra.push((a, d));
    }
    for (a, d) in extra {
        for e in d.edges() {
            let vs = e.vertices().iter().map(|&(p, v)| (p, v + offsets[p])).collect();
            edges.push(Edge::new(vs)?);
        }
        for p in a.parts() {
            offsets[p] += 3;
        }
    }
    down_closure(&edges, &VertexPartition::new(sizes)?, template.k().max(k))
}

/// Complete template [r]^{≤k} on single-vertex parts.
pub fn complete_template(r: usize, k: usize) -> Result<Chain> {
    Ok(Chain::complete(VertexPartition::uniform(r, 1)?, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaSchedule {
    /// One η per level starting at level 1; the last entry repeats for higher levels.
    Override(Vec<f64>),
    /// The recurrences evaluated per tuple from the densities of ℋ(x).
    Faithful,
}

impl EtaSchedule {
    fn ln_override(&self, level: usize) -> Option<f64> {
        match self {
            EtaSchedule::Override(v) => {
                let e = v.get(level - 1).or(v.last()).copied().unwrap_or(0.0);
                Some(if e <= 0.0 { f64::NEG_INFINITY } else { e.ln() })
            }
            EtaSchedule::Faithful => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizeConfig {
    pub eta: EtaSchedule,
    pub max_iters: usize,
    pub r: usize,
    pub r_cap: usize,
    pub retry_budget: usize,
    pub seed: u64,
    /// Tuple counts up to this are checked exhaustively.
    pub exhaustive_limit: usize,
    pub samples: usize,
}

impl Default for RegularizeConfig {
    fn default() -> Self {
        RegularizeConfig {
            eta: EtaSchedule::Faithful,
            max_iters: 50,
            r: 1,
            r_cap: 8,
            retry_budget: 64,
            seed: 0,
            exhaustive_limit: 1_000_000,
            samples: 10_000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainRefinement {
    pub representative: Vec<usize>,
    pub accepted: bool,
    pub gain: f64,
    pub threshold: f64,
    pub retries_used: usize,
    pub r_used: usize,
    pub r_capped: bool,
    pub slice_size: usize,
    pub star_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub energies: Vec<IndexEnergy>,
    pub energy: f64,
    pub tuples_checked: usize,
    pub failing_fraction: f64,
    pub refined_index: Option<IndexSet>,
    pub level: Option<usize>,
    /// Fraction of checked tuples whose minimal failing level is `level` and which fail at the refined index.
    pub measured_gamma: Option<f64>,
    pub chains: Vec<ChainRefinement>,
    /// Realized σ_A(Q) − σ_A(P) at the refined index, exact.
    pub gain: Option<String>,
    pub gain_f64: Option<f64>,
    /// Σ over accepted chains of |H_*(A,x)|/|K(A)| times the achieved gain.
    pub gain_floor: Option<f64>,
    /// Σ over accepted chains of |H(A,x)|/|K(A)|·η²/32.
    pub gain_lower_bound: Option<f64>,
    pub changed: Option<bool>,
    pub cells: Vec<(IndexSet, u32)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegularizeTrace {
    pub config: RegularizeConfig,
    pub epsilon: f64,
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub stalled_iterations: usize,
    pub final_failing_fraction: f64,
}

/// Per-tuple verdict: failing indices at the smallest failing level.
#[derive(Clone, Debug, PartialEq)]
pub struct TupleStatus {
    pub min_level: Option<usize>,
    pub failing: Vec<IndexSet>,
    /// η for each failing index, in the proper-subset convention.
    pub eta_proper: Vec<LogValue>,
}

/// Evaluates which indices of J fail quasirandomness for each tuple.
pub struct Evaluator<'a> {
    sys: &'a PartitionSystem,
    classes: &'a Classes,
    template: &'a Chain,
    checked: Vec<IndexSet>,
    cache: HashMap<(IndexSet, u32), LocalMeasure>,
    epsilon: f64,
    eta: EtaSchedule,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        sys: &'a PartitionSystem,
        classes: &'a Classes,
        template: &'a Chain,
        epsilon: f64,
        eta: EtaSchedule,
        xs: &[Vec<usize>],
    ) -> Self {
        let mut checked: Vec<IndexSet> = template
            .indices()
            .into_iter()
            .filter(|a| a.len() >= 2 && a.len() <= sys.k)
            .collect();
        checked.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
        let mut keys: Vec<(IndexSet, u32, usize)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (xi, x) in xs.iter().enumerate() {
            for &a in &checked {
                let sid = classes.strong[&a][classes.space(a).encode_full(x)];
                if seen.insert((a, sid)) {
                    keys.push((a, sid, xi));
                }
            }
        }
        let cache = keys
            .par_iter()
            .map(|&(a, sid, xi)| ((a, sid), local_measure(sys, classes, a, &xs[xi])))
            .collect();
        Evaluator { sys, classes, template, checked, cache, epsilon, eta }
    }

    fn ln_eta(&self, level: usize, x: &[usize]) -> f64 {
        if let Some(v) = self.eta.ln_override(level) {
            return v;
        }
        // faithful: schedule from the densities of ℋ(x) at the template's edges
        let logs: Vec<(usize, f64)> = self
            .template
            .edges()
            .iter()
            .filter(|e| e.len() <= self.sys.k)
            .map(|e| {
                let a = e.index();
                (a.len(), self.classes.ln_relative_density(a, self.classes.space(a).encode_full(x)))
            })
            .collect();
        let size = self.template.edge_count() + 1;
        crate::quasirandom::threshold_schedule(
            self.epsilon,
            size,
            &logs.iter().map(|&(l, d)| (IndexSet::from_bits((1u32 << l) - 1), d.exp())).collect::<Vec<_>>(),
            self.sys.k,
        )
        .map(|s| s.log_eta(level))
        .unwrap_or(f64::NEG_INFINITY)
    }

    pub fn status(&self, x: &[usize]) -> TupleStatus {
        let mut min_level = None;
        let mut failing = Vec::new();
        let mut eta_proper = Vec::new();
        for &a in &self.checked {
            if min_level.is_some_and(|l| a.len() > l) {
                break;
            }
            let sid = self.classes.strong[&a][self.classes.space(a).encode_full(x)];
            let m = self.cache[&(a, sid)];
            let ln_eta = self.ln_eta(a.len(), x);
            if m.eta_star.ln() > ln_eta {
                min_level = Some(a.len());
                failing.push(a);
                let conv = ln_eta + (1u64 << a.len()) as f64 * m.ln_delta;
                eta_proper.push(LogValue(conv));
            }
        }
        TupleStatus { min_level, failing, eta_proper }
    }

    /// Every checked index at which x fails, at all levels.
    pub fn failing_indices(&self, x: &[usize]) -> Vec<IndexSet> {
        self.checked
            .iter()
            .copied()
            .filter(|&a| {
                let sid = self.classes.strong[&a][self.classes.space(a).encode_full(x)];
                self.cache[&(a, sid)].eta_star.ln() > self.ln_eta(a.len(), x)
            })
            .collect()
    }

    pub fn checked_indices(&self) -> &[IndexSet] {
        &self.checked
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn evaluation_tuples(
    partition: &VertexPartition,
    config: &RegularizeConfig,
    iteration: usize,
) -> Result<Vec<Vec<usize>>> {
    let exhaustive = partition.tuple_count().is_some_and(|t| t <= config.exhaustive_limit);
    if exhaustive {
        tuples_for(partition, CheckMode::Exhaustive, config.exhaustive_limit)
    } else {
        let seed = splitmix(config.seed ^ splitmix(iteration as u64 ^ 0x5a5a));
        tuples_for(partition, CheckMode::Sampled { samples: config.samples, seed }, usize::MAX)
    }
}

/// Refines `p0` until at most an ε fraction of tuples x have a non-quasirandom ℋ(x).
pub fn regularize(
    p0: &PartitionSystem,
    template: &Chain,
    epsilon: f64,
    config: &RegularizeConfig,
) -> Result<(PartitionSystem, RegularizeTrace)> {
    if template.part_count() != p0.partition.part_count() {
        return Err(Error::PartMismatch("template and partition system differ in part count".into()));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} not in (0,1]")));
    }
    let template = match config.eta {
        EtaSchedule::Faithful => augment_with_double_octahedra(template, p0.k)?,
        EtaSchedule::Override(_) => template.clone(),
    };
    let mut p = p0.compacted();
    let mut records = Vec::new();
    let mut converged = false;
    let mut stalled = 0;
    let mut final_fraction = 1.0;
    for iteration in 0..=config.max_iters {
        let classes = Classes::new(&p);
        let energies = energy_vector_with(&p, &classes);
        let xs = evaluation_tuples(&p.partition, config, iteration)?;
        let eval = Evaluator::new(&p, &classes, &template, epsilon, config.eta.clone(), &xs);
        let statuses: Vec<TupleStatus> = xs.par_iter().map(|x| eval.status(x)).collect();
        let fails = statuses.iter().filter(|s| s.min_level.is_some()).count();
        let failing_fraction = fails as f64 / xs.len() as f64;
        final_fraction = failing_fraction;
        let mut record = IterationRecord {
            iteration,
            energies: energies.entries(),
            energy: energies.total(),
            tuples_checked: xs.len(),
            failing_fraction,
            refined_index: None,
            level: None,
            measured_gamma: None,
            chains: Vec::new(),
            gain: None,
            gain_f64: None,
            gain_floor: None,
            gain_lower_bound: None,
            changed: None,
            cells: p.indices().into_iter().map(|a| (a, p.cell_count(a))).collect(),
        };
        if failing_fraction <= epsilon {
            converged = true;
            records.push(record);
            break;
        }
        if iteration == config.max_iters {
            records.push(record);
            break;
        }
        let level = statuses.iter().filter_map(|s| s.min_level).min().expect("some tuple fails");
        let target = statuses
            .iter()
            .filter(|s| s.min_level == Some(level))
            .flat_map(|s| s.failing.iter().copied())
            .min()
            .expect("a failing index");
        let mut reps: Vec<(u32, usize, LogValue)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut hits = 0usize;
        for (xi, st) in statuses.iter().enumerate() {
            if st.min_level != Some(level) {
                continue;
            }
            if let Some(pos) = st.failing.iter().position(|&a| a == target) {
                hits += 1;
                let sid = classes.strong[&target][classes.space(target).encode_full(&xs[xi])];
                if seen.insert(sid) {
                    reps.push((sid, xi, st.eta_proper[pos]));
                }
            }
        }
        reps.sort_by_key(|r| r.0);
        let outcomes: Vec<Result<RefinementOutcome>> = reps
            .par_iter()
            .enumerate()
            .map(|(ci, &(_, xi, eta))| {
                let params = RefineParams {
                    r: config.r,
                    r_cap: config.r_cap,
                    budget: config.retry_budget,
                    seed: splitmix(config.seed ^ splitmix(((iteration as u64) << 32) | ci as u64)),
                };
                refinement_step_with(&p, &classes, &xs[xi], target, eta, params)
            })
            .collect();
        let mut systems = Vec::new();
        let mut lower = 0.0;
        let mut floor = 0.0;
        let index_size = classes.space(target).len() as f64;
        for o in outcomes {
            let o = o?;
            if o.accepted {
                lower += o.slice_size as f64 / index_size * o.eta.value().powi(2) / 32.0;
                floor += o.star_size as f64 / index_size * o.gain_f64;
            }
            record.chains.push(ChainRefinement {
                representative: o.representative.clone(),
                accepted: o.accepted,
                gain: o.gain_f64,
                threshold: o.threshold,
                retries_used: o.retries_used,
                r_used: o.r_used,
                r_capped: o.r_capped,
                slice_size: o.slice_size,
                star_size: o.star_size,
            });
            systems.push(o.system.expect("outcome system"));
        }
        let mut all: Vec<&PartitionSystem> = vec![&p];
        all.extend(systems.iter());
        let q = PartitionSystem::common_refinement(&all)?;
        let after = energy_vector(&q);
        let gain = &after.sigma[&target] - &energies.sigma[&target];
        let changed = q.indices().iter().any(|a| q.cell_count(*a) != p.cell_count(*a));
        if !changed {
            stalled += 1;
        }
        record.refined_index = Some(target);
        record.level = Some(level);
        record.measured_gamma = Some(hits as f64 / xs.len() as f64);
        record.gain_f64 = Some(gain.to_f64().unwrap_or(0.0));
        record.gain = Some(gain.to_string());
        record.gain_floor = Some(floor);
        record.gain_lower_bound = Some(lower);
        record.changed = Some(changed);
        records.push(record);
        log::debug!("iteration {iteration}: failing {failing_fraction:.4}, refined {target}");
        p = q;
    }
    let trace = RegularizeTrace {
        config: config.clone(),
        epsilon,
        records,
        converged,
        stalled_iterations: stalled,
        final_failing_fraction: final_fraction,
    };
    Ok((p, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::One;

    #[test]
    fn msd_identities() {
        let p = vec![0, 0, 1, 2, 2, 2];
        assert_eq!(mean_square_density(&p, &p).unwrap(), BigRational::one());
        let q = vec![0; 6];
        let want = BigRational::new(BigInt::from(4 + 1 + 9), BigInt::from(36));
        assert_eq!(mean_square_density(&p, &q).unwrap(), want);
        assert!(mean_square_density(&p, &q[..5]).is_err());
    }

    #[test]
    fn trivial_system_is_complete_chain() {
        let part = VertexPartition::uniform(3, 3).unwrap();
        let sys = PartitionSystem::trivial(part.clone(), 2);
        assert_eq!(induced_chain(&sys, &[0, 1, 2]).unwrap(), Chain::complete(part, 2));
        let e = energy_vector(&sys);
        assert!(e.sigma.values().all(|s| s.is_one()));
    }

    #[test]
    fn top_split_energy() {
        let part = VertexPartition::uniform(2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = crate::chain::random_levelwise(&part, 2, &[1.0, 0.4], &mut rng);
        let sys = PartitionSystem::top_split(&h);
        let d = BigRational::new(BigInt::from(h.slice_count(IndexSet::from_bits(3))), BigInt::from(16));
        let want = &d * &d + (BigRational::one() - &d) * (BigRational::one() - &d);
        assert_eq!(energy_vector(&sys).sigma[&IndexSet::from_bits(3)], want);
    }

    #[test]
    fn double_octahedron_multiplicities() {
        for a in [IndexSet::from_bits(3), IndexSet::from_bits(7)] {
            let d = double_octahedron(3, a).unwrap();
            for c in a.nonempty_subsets().filter(|c| c.len() < a.len()) {
                let n = d.edges().iter().filter(|e| e.index() == c).count();
                assert_eq!(n, (1 << (c.len() + 1)) - 1, "index {c}");
            }
        }
    }

    #[test]
    fn already_quasirandom_is_rejected() {
        let part = VertexPartition::uniform(2, 4).unwrap();
        let sys = PartitionSystem::trivial(part, 2);
        let r = refinement_step(&sys, &[0, 0], IndexSet::from_bits(3), 0.5, 1, 4, 0);
        assert!(matches!(r, Err(Error::PreconditionNotViolated(_))));
    }

    #[test]
    fn trivial_system_regularizes_immediately() {
        let part = VertexPartition::uniform(3, 3).unwrap();
        let sys = PartitionSystem::trivial(part, 2);
        let j = complete_template(3, 2).unwrap();
        let cfg = RegularizeConfig::default();
        let (_, trace) = regularize(&sys, &j, 0.1, &cfg).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.records.len(), 1);
        assert!(trace.records[0].refined_index.is_none());
    }
}
