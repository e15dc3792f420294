//! Partite vertex sets, edges and down-closed chains.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest number of parts a partition may have.
pub const MAX_PARTS: usize = 31;

/// Tables over at most this many tuples are stored as bitsets.
const DENSE_LIMIT: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VertexPartition {
    sizes: Vec<usize>,
}

impl VertexPartition {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidPartition("no parts".into()));
        }
        if sizes.len() > MAX_PARTS {
            return Err(Error::InvalidPartition(format!(
                "{} parts, at most {MAX_PARTS} supported",
                sizes.len()
            )));
        }
        if let Some(p) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidPartition(format!("part {} is empty", p + 1)));
        }
        Ok(VertexPartition { sizes })
    }

    pub fn uniform(r: usize, n: usize) -> Result<Self> {
        Self::new(vec![n; r])
    }

    pub fn part_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn size(&self, part: usize) -> usize {
        self.sizes[part]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn full_index(&self) -> IndexSet {
        IndexSet::from_bits((1u32 << self.sizes.len()) - 1)
    }

    /// Number of vertex tuples in all parts, or `None` on overflow.
    pub fn tuple_count(&self) -> Option<usize> {
        self.sizes.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n))
    }

    pub fn tuples(&self, index: IndexSet) -> TupleSpace {
        TupleSpace::new(self, index)
    }

    pub(crate) fn check_index(&self, index: IndexSet) -> Result<()> {
        if index.bits() >> self.sizes.len() != 0 {
            return Err(Error::PartOutOfRange(index.max_part().unwrap_or(0) + 1));
        }
        Ok(())
    }
}

/// A set of parts, stored as a bitmask over 0-based part numbers.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct IndexSet(u32);

impl IndexSet {
    pub const EMPTY: IndexSet = IndexSet(0);

    pub fn from_bits(bits: u32) -> Self {
        IndexSet(bits)
    }

    pub fn singleton(part: usize) -> Self {
        IndexSet(1 << part)
    }

    pub fn from_parts<I: IntoIterator<Item = usize>>(parts: I) -> Self {
        IndexSet(parts.into_iter().fold(0, |m, p| m | (1 << p)))
    }

    /// Builds an index from 1-based part numbers.
    pub fn from_one_based(parts: &[usize]) -> Self {
        Self::from_parts(parts.iter().map(|p| p - 1))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, part: usize) -> bool {
        part < 32 && self.0 >> part & 1 == 1
    }

    pub fn with(self, part: usize) -> Self {
        IndexSet(self.0 | 1 << part)
    }

    pub fn without(self, part: usize) -> Self {
        IndexSet(self.0 & !(1 << part))
    }

    pub fn union(self, other: IndexSet) -> Self {
        IndexSet(self.0 | other.0)
    }

    pub fn intersection(self, other: IndexSet) -> Self {
        IndexSet(self.0 & other.0)
    }

    pub fn is_subset(self, other: IndexSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn max_part(self) -> Option<usize> {
        if self.0 == 0 {
            None
        } else {
            Some(31 - self.0.leading_zeros() as usize)
        }
    }

    /// Parts in ascending order.
    pub fn parts(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let p = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(p)
            }
        })
    }

    pub fn to_vec(self) -> Vec<usize> {
        self.parts().collect()
    }

    /// All subsets, including the empty set and `self`.
    pub fn subsets(self) -> impl Iterator<Item = IndexSet> {
        let mask = self.0;
        let mut next = Some(mask);
        std::iter::from_fn(move || {
            let cur = next?;
            next = if cur == 0 { None } else { Some((cur - 1) & mask) };
            Some(IndexSet(cur))
        })
    }

    pub fn nonempty_subsets(self) -> impl Iterator<Item = IndexSet> {
        self.subsets().filter(|s| !s.is_empty())
    }

    pub fn proper_subsets(self) -> impl Iterator<Item = IndexSet> {
        self.subsets().filter(move |s| *s != self)
    }

    /// Subsets obtained by deleting one part.
    pub fn faces(self) -> impl Iterator<Item = IndexSet> {
        self.parts().map(move |p| self.without(p))
    }

    /// All nonempty index sets of `r` parts with size at most `k`, ordered by size then lexicographically.
    pub fn all_up_to(r: usize, k: usize) -> Vec<IndexSet> {
        let mut out: Vec<IndexSet> = (1u32..(1 << r))
            .map(IndexSet)
            .filter(|s| s.len() <= k)
            .collect();
        out.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
        out
    }
}

impl Ord for IndexSet {
    fn cmp(&self, other: &Self) -> Ordering {
        self.parts().cmp(other.parts())
    }
}

impl PartialOrd for IndexSet {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for IndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, p) in self.parts().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", p + 1)?;
        }
        write!(f, "}}")
    }
}

impl fmt::Debug for IndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for IndexSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<usize> = self.parts().map(|p| p + 1).collect();
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for IndexSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<usize>::deserialize(d)?;
        if v.iter().any(|&p| p == 0 || p > MAX_PARTS) {
            return Err(serde::de::Error::custom("part numbers are 1-based and at most 31"));
        }
        Ok(IndexSet::from_one_based(&v))
    }
}

/// Row-major coding of the tuples of an index: the first part varies slowest.
#[derive(Clone, Debug)]
pub struct TupleSpace {
    index: IndexSet,
    parts: Vec<usize>,
    sizes: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl TupleSpace {
    pub fn new(partition: &VertexPartition, index: IndexSet) -> Self {
        let parts = index.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|&p| partition.size(p)).collect();
        Self::from_sizes(index, parts, sizes)
    }

    fn from_sizes(index: IndexSet, parts: Vec<usize>, sizes: Vec<usize>) -> Self {
        let mut strides = vec![0; sizes.len()];
        let mut acc: usize = 1;
        for i in (0..sizes.len()).rev() {
            strides[i] = acc;
            acc = acc.checked_mul(sizes[i]).expect("tuple space too large");
        }
        TupleSpace { index, parts, sizes, strides, len: acc }
    }

    pub fn index(&self) -> IndexSet {
        self.index
    }

    pub fn parts(&self) -> &[usize] {
        &self.parts
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn encode(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    pub fn decode(&self, code: usize) -> Vec<usize> {
        self.sizes
            .iter()
            .zip(&self.strides)
            .map(|(n, s)| code / s % n)
            .collect()
    }

    /// Code of a full tuple (one vertex per part of the partition) restricted to this index.
    pub fn encode_full(&self, full: &[usize]) -> usize {
        self.parts.iter().zip(&self.strides).map(|(&p, s)| full[p] * s).sum()
    }

    /// Projects a code of this space onto a sub-index.
    pub fn project(&self, code: usize, sub: &TupleSpace) -> usize {
        let mut out = 0;
        let mut j = 0;
        for (i, &p) in self.parts.iter().enumerate() {
            if j < sub.parts.len() && sub.parts[j] == p {
                out += code / self.strides[i] % self.sizes[i] * sub.strides[j];
                j += 1;
            }
        }
        out
    }

    pub fn edge(&self, code: usize) -> Edge {
        Edge {
            vertices: self.parts.iter().copied().zip(self.decode(code)).collect(),
        }
    }
}

/// Set of tuple codes of one index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EdgeTable {
    Dense { bits: Vec<u64>, len: usize, count: usize },
    Sparse { codes: Vec<usize> },
}

impl EdgeTable {
    pub fn empty(len: usize) -> Self {
        if len <= DENSE_LIMIT {
            EdgeTable::Dense { bits: vec![0; len.div_ceil(64)], len, count: 0 }
        } else {
            EdgeTable::Sparse { codes: Vec::new() }
        }
    }

    pub fn full(len: usize) -> Self {
        Self::from_codes(len, 0..len)
    }

    pub fn from_codes<I: IntoIterator<Item = usize>>(len: usize, codes: I) -> Self {
        if len <= DENSE_LIMIT {
            let mut bits = vec![0u64; len.div_ceil(64)];
            for c in codes {
                debug_assert!(c < len);
                bits[c / 64] |= 1 << (c % 64);
            }
            let count = bits.iter().map(|w| w.count_ones() as usize).sum();
            EdgeTable::Dense { bits, len, count }
        } else {
            let mut codes: Vec<usize> = codes.into_iter().collect();
            codes.sort_unstable();
            codes.dedup();
            EdgeTable::Sparse { codes }
        }
    }

    pub fn contains(&self, code: usize) -> bool {
        match self {
            EdgeTable::Dense { bits, len, .. } => code < *len && bits[code / 64] >> (code % 64) & 1 == 1,
            EdgeTable::Sparse { codes } => codes.binary_search(&code).is_ok(),
        }
    }

    pub fn count(&self) -> usize {
        match self {
            EdgeTable::Dense { count, .. } => *count,
            EdgeTable::Sparse { codes } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Codes in ascending order.
    pub fn codes(&self) -> Vec<usize> {
        match self {
            EdgeTable::Dense { bits, .. } => {
                let mut out = Vec::with_capacity(self.count());
                for (w, &word) in bits.iter().enumerate() {
                    let mut b = word;
                    while b != 0 {
                        out.push(w * 64 + b.trailing_zeros() as usize);
                        b &= b - 1;
                    }
                }
                out
            }
            EdgeTable::Sparse { codes } => codes.clone(),
        }
    }
}

/// An edge: at most one vertex per part, parts strictly increasing. Parts and vertices are 0-based.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Edge {
    vertices: Vec<(usize, usize)>,
}

impl Edge {
    pub fn new(mut vertices: Vec<(usize, usize)>) -> Result<Self> {
        vertices.sort_unstable();
        for w in vertices.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::RepeatedPart(w[0].0 + 1));
            }
        }
        if let Some(&(p, _)) = vertices.last() {
            if p >= MAX_PARTS {
                return Err(Error::PartOutOfRange(p + 1));
            }
        }
        Ok(Edge { vertices })
    }

    pub fn empty() -> Self {
        Edge::default()
    }

    pub fn vertices(&self) -> &[(usize, usize)] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn index(&self) -> IndexSet {
        IndexSet::from_parts(self.vertices.iter().map(|v| v.0))
    }

    pub fn vertex_in(&self, part: usize) -> Option<usize> {
        self.vertices.iter().find(|v| v.0 == part).map(|v| v.1)
    }

    pub fn restrict(&self, index: IndexSet) -> Edge {
        Edge {
            vertices: self.vertices.iter().copied().filter(|v| index.contains(v.0)).collect(),
        }
    }

    pub fn validate(&self, partition: &VertexPartition) -> Result<()> {
        for &(p, v) in &self.vertices {
            if p >= partition.part_count() {
                return Err(Error::PartOutOfRange(p + 1));
            }
            if v >= partition.size(p) {
                return Err(Error::VertexOutOfRange { part: p + 1, vertex: v, size: partition.size(p) });
            }
        }
        Ok(())
    }

    pub fn code(&self, space: &TupleSpace) -> usize {
        space.encode(&self.vertices.iter().map(|v| v.1).collect::<Vec<_>>())
    }
}

// serialized as [[part, vertex], ...] with 1-based parts, like IndexSet
impl Serialize for Edge {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<(usize, usize)> = self.vertices.iter().map(|&(p, v)| (p + 1, v)).collect();
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Edge {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<(usize, usize)>::deserialize(d)?;
        if v.iter().any(|&(p, _)| p == 0) {
            return Err(serde::de::Error::custom("part numbers are 1-based"));
        }
        Edge::new(v.into_iter().map(|(p, x)| (p - 1, x)).collect()).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (p, v)) in self.vertices.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{}:{}", p + 1, v)?;
        }
        write!(f, "}}")
    }
}

impl fmt::Debug for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

pub fn index_of(e: &Edge) -> IndexSet {
    e.index()
}

/// An r-partite down-closed family of edges of size at most k. The empty edge is always a member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chain {
    partition: VertexPartition,
    k: usize,
    tables: BTreeMap<IndexSet, EdgeTable>,
}

impl Chain {
    pub fn empty(partition: VertexPartition, k: usize) -> Self {
        Chain { partition, k, tables: BTreeMap::new() }
    }

    /// The complete k-chain: every partite set of size at most k.
    pub fn complete(partition: VertexPartition, k: usize) -> Self {
        let tables = IndexSet::all_up_to(partition.part_count(), k)
            .into_iter()
            .map(|a| (a, EdgeTable::full(partition.tuples(a).len())))
            .collect();
        Chain { partition, k, tables }
    }

    /// Builds a chain from per-index code lists and checks down-closure.
    pub fn from_codes(
        partition: VertexPartition,
        k: usize,
        codes: BTreeMap<IndexSet, Vec<usize>>,
    ) -> Result<Self> {
        let chain = Self::from_codes_unchecked(partition, k, codes)?;
        chain.verify_down_closed()?;
        Ok(chain)
    }

    pub(crate) fn from_codes_unchecked(
        partition: VertexPartition,
        k: usize,
        codes: BTreeMap<IndexSet, Vec<usize>>,
    ) -> Result<Self> {
        let mut tables = BTreeMap::new();
        for (a, list) in codes {
            if a.is_empty() {
                continue;
            }
            partition.check_index(a)?;
            if a.len() > k {
                return Err(Error::IndexTooLarge(a, k));
            }
            let len = partition.tuples(a).len();
            if let Some(&c) = list.iter().find(|&&c| c >= len) {
                return Err(Error::Shape(format!("code {c} out of range for index {a}")));
            }
            if !list.is_empty() {
                tables.insert(a, EdgeTable::from_codes(len, list));
            }
        }
        Ok(Chain { partition, k, tables })
    }

    pub(crate) fn from_tables_unchecked(
        partition: VertexPartition,
        k: usize,
        tables: BTreeMap<IndexSet, EdgeTable>,
    ) -> Self {
        let tables = tables.into_iter().filter(|(a, t)| !a.is_empty() && !t.is_empty()).collect();
        Chain { partition, k, tables }
    }

    pub fn partition(&self) -> &VertexPartition {
        &self.partition
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn part_count(&self) -> usize {
        self.partition.part_count()
    }

    /// Indices with at least one edge, ordered by size then lexicographically.
    pub fn indices(&self) -> Vec<IndexSet> {
        let mut v: Vec<IndexSet> = self.tables.keys().copied().collect();
        v.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
        v
    }

    pub fn table(&self, index: IndexSet) -> Option<&EdgeTable> {
        self.tables.get(&index)
    }

    pub fn contains_code(&self, index: IndexSet, code: usize) -> bool {
        if index.is_empty() {
            return true;
        }
        self.tables.get(&index).is_some_and(|t| t.contains(code))
    }

    pub fn contains(&self, e: &Edge) -> bool {
        if e.is_empty() {
            return true;
        }
        if e.validate(&self.partition).is_err() {
            return false;
        }
        let a = e.index();
        self.contains_code(a, e.code(&self.partition.tuples(a)))
    }

    pub fn slice_count(&self, index: IndexSet) -> usize {
        if index.is_empty() {
            return 1;
        }
        self.tables.get(&index).map_or(0, |t| t.count())
    }

    pub fn slice_codes(&self, index: IndexSet) -> Vec<usize> {
        if index.is_empty() {
            return vec![0];
        }
        self.tables.get(&index).map_or_else(Vec::new, |t| t.codes())
    }

    pub fn slice(&self, index: IndexSet) -> Vec<Edge> {
        let space = self.partition.tuples(index);
        self.slice_codes(index).into_iter().map(|c| space.edge(c)).collect()
    }

    /// Number of edges, not counting the empty edge.
    pub fn edge_count(&self) -> usize {
        self.tables.values().map(|t| t.count()).sum()
    }

    /// Size of the largest stored edge.
    pub fn max_edge_size(&self) -> usize {
        self.tables.keys().map(|a| a.len()).max().unwrap_or(0)
    }

    /// All nonempty edges, ordered by index then code.
    pub fn edges(&self) -> Vec<Edge> {
        self.indices().into_iter().flat_map(|a| self.slice(a)).collect()
    }

    fn check_star_index(&self, index: IndexSet) -> Result<()> {
        self.partition.check_index(index)?;
        if index.len() > self.k {
            return Err(Error::IndexTooLarge(index, self.k));
        }
        Ok(())
    }

    /// Codes of index-`index` tuples all of whose proper subsets lie in the chain.
    pub fn star_codes(&self, index: IndexSet) -> Result<Vec<usize>> {
        self.check_star_index(index)?;
        let space = self.partition.tuples(index);
        if index.len() <= 1 {
            return Ok((0..space.len()).collect());
        }
        let last = index.max_part().unwrap();
        let base = index.without(last);
        let Some(base_table) = self.tables.get(&base) else {
            return Ok(Vec::new());
        };
        let base_space = self.partition.tuples(base);
        let faces: Vec<(TupleSpace, &EdgeTable)> = index
            .faces()
            .filter(|f| *f != base)
            .map(|f| (self.partition.tuples(f), self.tables.get(&f)))
            .filter_map(|(s, t)| t.map(|t| (s, t)))
            .collect();
        if faces.len() + 1 != index.len() {
            return Ok(Vec::new());
        }
        let n_last = self.partition.size(last);
        let mut out = Vec::new();
        for bc in base_table.codes() {
            // base parts precede `last`, so the code shifts by the size of the last part
            let prefix = bc * n_last;
            debug_assert_eq!(base_space.len() * n_last, space.len());
            for v in 0..n_last {
                let code = prefix + v;
                if faces.iter().all(|(s, t)| t.contains(space.project(code, s))) {
                    out.push(code);
                }
            }
        }
        Ok(out)
    }

    pub fn star_count(&self, index: IndexSet) -> Result<usize> {
        Ok(self.star_codes(index)?.len())
    }

    pub fn slice_and_star(&self, index: IndexSet) -> Result<(Vec<Edge>, Vec<Edge>)> {
        let star = self.star_codes(index)?;
        let space = self.partition.tuples(index);
        Ok((self.slice(index), star.into_iter().map(|c| space.edge(c)).collect()))
    }

    /// δ_A = |H(A)| / |H_*(A)| as an exact rational.
    pub fn relative_density(&self, index: IndexSet) -> Result<BigRational> {
        let star = self.star_count(index)?;
        if star == 0 {
            return Err(Error::EmptyStar(index));
        }
        Ok(BigRational::new(
            BigInt::from(self.slice_count(index)),
            BigInt::from(star),
        ))
    }

    pub fn verify_down_closed(&self) -> Result<()> {
        for (&a, table) in &self.tables {
            if a.len() > self.k {
                return Err(Error::IndexTooLarge(a, self.k));
            }
            if a.len() < 2 {
                continue;
            }
            let space = self.partition.tuples(a);
            for f in a.faces() {
                let fs = self.partition.tuples(f);
                let ft = self.tables.get(&f);
                for c in table.codes() {
                    if !ft.is_some_and(|t| t.contains(space.project(c, &fs))) {
                        return Err(Error::NotDownClosed(format!(
                            "edge {} is missing its face of index {f}",
                            space.edge(c)
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Edges not contained in a larger edge, in canonical (sorted) order.
    pub fn maximal_edges(&self) -> Vec<Edge> {
        let mut covered: BTreeMap<IndexSet, Vec<bool>> = BTreeMap::new();
        for (&a, table) in &self.tables {
            if a.len() < 2 {
                continue;
            }
            let space = self.partition.tuples(a);
            for f in a.faces() {
                let fs = self.partition.tuples(f);
                let flags = covered.entry(f).or_insert_with(|| vec![false; fs.len()]);
                for c in table.codes() {
                    flags[space.project(c, &fs)] = true;
                }
            }
        }
        let mut out = Vec::new();
        for (&a, table) in &self.tables {
            let space = self.partition.tuples(a);
            let flags = covered.get(&a);
            for c in table.codes() {
                if !flags.is_some_and(|f| f[c]) {
                    out.push(space.edge(c));
                }
            }
        }
        out.sort();
        out
    }

    /// Applies a permutation of vertex ids inside every part.
    pub fn relabel(&self, perms: &[Vec<usize>]) -> Result<Chain> {
        if perms.len() != self.part_count()
            || perms.iter().zip(self.partition.sizes()).any(|(p, &n)| p.len() != n)
        {
            return Err(Error::Shape("one permutation per part is required".into()));
        }
        let mut codes = BTreeMap::new();
        for (&a, table) in &self.tables {
            let space = self.partition.tuples(a);
            let list: Vec<usize> = table
                .codes()
                .into_iter()
                .map(|c| {
                    let coords: Vec<usize> = space
                        .decode(c)
                        .into_iter()
                        .zip(space.parts())
                        .map(|(v, &p)| perms[p][v])
                        .collect();
                    space.encode(&coords)
                })
                .collect();
            codes.insert(a, list);
        }
        Self::from_codes_unchecked(self.partition.clone(), self.k, codes)
    }

    /// Same edges with a larger uniformity bound.
    pub fn with_k(&self, k: usize) -> Result<Chain> {
        if k < self.max_edge_size() {
            return Err(Error::EdgeTooLarge { size: self.max_edge_size(), k });
        }
        Ok(Chain { partition: self.partition.clone(), k, tables: self.tables.clone() })
    }
}

/// The smallest chain containing every input edge.
pub fn down_closure(edges: &[Edge], partition: &VertexPartition, k: usize) -> Result<Chain> {
    let mut codes: BTreeMap<IndexSet, Vec<usize>> = BTreeMap::new();
    for e in edges {
        e.validate(partition)?;
        if e.len() > k {
            return Err(Error::EdgeTooLarge { size: e.len(), k });
        }
        for sub in e.index().nonempty_subsets() {
            let f = e.restrict(sub);
            codes.entry(sub).or_default().push(f.code(&partition.tuples(sub)));
        }
    }
    Chain::from_codes_unchecked(partition.clone(), k, codes)
}

/// Random chain built level by level: each tuple of the current star is kept with the level's probability.
/// `densities[0]` is the vertex level.
pub fn random_levelwise<R: Rng>(
    partition: &VertexPartition,
    k: usize,
    densities: &[f64],
    rng: &mut R,
) -> Chain {
    assert_eq!(densities.len(), k, "one density per level");
    let mut chain = Chain::empty(partition.clone(), k);
    for a in IndexSet::all_up_to(partition.part_count(), k) {
        let d = densities[a.len() - 1];
        let star = chain.star_codes(a).expect("index within k");
        let kept: Vec<usize> = star.into_iter().filter(|_| rng.gen::<f64>() < d).collect();
        if !kept.is_empty() {
            let len = partition.tuples(a).len();
            chain.tables.insert(a, EdgeTable::from_codes(len, kept));
        }
    }
    chain
}
