//! Grid sets, the line/hyperplane reductions to partite hypergraphs, brute-force configuration
//! finders and the removal pipeline.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{down_closure, Chain, Edge, EdgeTable, IndexSet, VertexPartition};
use crate::error::{Error, Result};
use crate::regularity::{
    complete_template, evaluation_tuples, regularize, Classes, Evaluator, PartitionSystem, RegularizeConfig,
    RegularizeTrace,
};

/// Default cap on brute-force work (points × candidate differences × pattern size).
pub const DEFAULT_SCAN_BUDGET: u64 = 1_000_000_000;

/// A subset of the grid [1, N]^d.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSet {
    dim: usize,
    n: i64,
    points: BTreeSet<Vec<i64>>,
}

impl GridSet {
    pub fn new(dim: usize, n: i64, points: Vec<Vec<i64>>) -> Result<Self> {
        if dim == 0 || n < 1 {
            return Err(Error::InvalidArgument(format!("grid needs d ≥ 1 and N ≥ 1, got d = {dim}, N = {n}")));
        }
        let mut set = BTreeSet::new();
        for p in points {
            if p.len() != dim {
                return Err(Error::WrongDimension { expected: dim, got: p.len() });
            }
            if p.iter().any(|&c| c < 1 || c > n) {
                return Err(Error::InvalidArgument(format!("point {p:?} outside [1, {n}]^{dim}")));
            }
            if !set.insert(p.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate point {p:?}")));
            }
        }
        Ok(GridSet { dim, n, points: set })
    }

    pub fn empty(dim: usize, n: i64) -> Result<Self> {
        Self::new(dim, n, Vec::new())
    }

    /// Each grid point kept independently with probability `density`.
    pub fn random<R: Rng>(dim: usize, n: i64, density: f64, rng: &mut R) -> Result<Self> {
        let mut points = Vec::new();
        let mut p = vec![1i64; dim];
        loop {
            if rng.gen::<f64>() < density {
                points.push(p.clone());
            }
            let mut i = dim;
            loop {
                if i == 0 {
                    return Self::new(dim, n, points);
                }
                i -= 1;
                if p[i] < n {
                    p[i] += 1;
                    break;
                }
                p[i] = 1;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> i64 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &BTreeSet<Vec<i64>> {
        &self.points
    }

    pub fn contains(&self, p: &[i64]) -> bool {
        self.points.contains(p)
    }

    pub fn density(&self) -> f64 {
        self.points.len() as f64 / (self.n as f64).powi(self.dim as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Positive,
    Negative,
}

/// The configuration {a} ∪ {a + d·e_i} (or a + dX for a pattern X).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Configuration {
    pub base: Vec<i64>,
    pub d: i64,
    pub magnitude: u64,
    pub orientation: Orientation,
}

impl Configuration {
    pub fn new(base: Vec<i64>, d: i64) -> Self {
        let orientation = if d < 0 { Orientation::Negative } else { Orientation::Positive };
        Configuration { base, d, magnitude: d.unsigned_abs(), orientation }
    }

    /// The points a + d·e_i for i = 1..dim, preceded by a.
    pub fn axis_points(&self) -> Vec<Vec<i64>> {
        let mut out = vec![self.base.clone()];
        for i in 0..self.base.len() {
            let mut p = self.base.clone();
            p[i] += self.d;
            out.push(p);
        }
        out
    }

    pub fn pattern_points(&self, pattern: &[Vec<i64>]) -> Vec<Vec<i64>> {
        pattern
            .iter()
            .map(|x| self.base.iter().zip(x).map(|(a, xi)| a + self.d * xi).collect())
            .collect()
    }
}

/// Geometric object behind a produced vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hyperplane {
    /// {x : x_axis = m}, axis 1-based.
    Axis { axis: usize, m: i64 },
    /// {x : x_1 + … + x_k = m}.
    Diagonal { m: i64 },
}

/// A (k+1)-partite k-uniform hypergraph built from a grid set, with its geometric back map.
#[derive(Clone, Debug)]
pub struct ReductionInstance {
    pub grid: GridSet,
    pub chain: Chain,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackMapVertex {
    pub part: usize,
    pub vertex: usize,
    pub object: Hyperplane,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackMapEdge {
    pub edge: Edge,
    pub point: Vec<i64>,
}

impl ReductionInstance {
    pub fn k(&self) -> usize {
        self.grid.dim
    }

    /// Vertex `v` of part `part` (0-based) as a hyperplane.
    pub fn object(&self, part: usize, v: usize) -> Result<Hyperplane> {
        let k = self.k();
        let size = self.chain.partition().sizes().get(part).copied().ok_or(Error::PartOutOfRange(part + 1))?;
        if v >= size {
            return Err(Error::VertexOutOfRange { part: part + 1, vertex: v, size });
        }
        Ok(if part < k {
            Hyperplane::Axis { axis: part + 1, m: v as i64 + 1 }
        } else {
            Hyperplane::Diagonal { m: v as i64 + k as i64 }
        })
    }

    /// The point where the k hyperplanes of a top edge meet.
    pub fn edge_point(&self, edge: &Edge) -> Result<Vec<i64>> {
        let k = self.k();
        if edge.len() != k {
            return Err(Error::Shape(format!("top edges have {k} vertices, got {}", edge.len())));
        }
        let mut p = vec![0i64; k];
        let mut missing = None;
        let mut diag = None;
        for part in 0..=k {
            match edge.vertex_in(part) {
                None => missing = Some(part),
                Some(v) => match self.object(part, v)? {
                    Hyperplane::Axis { axis, m } => p[axis - 1] = m,
                    Hyperplane::Diagonal { m } => diag = Some(m),
                },
            }
        }
        if let (Some(j), Some(m)) = (missing, diag) {
            if j < k {
                p[j] = m - p.iter().sum::<i64>();
            }
        }
        Ok(p)
    }

    pub fn back_map(&self) -> Result<(Vec<BackMapVertex>, Vec<BackMapEdge>)> {
        let mut vertices = Vec::new();
        for (part, &n) in self.chain.partition().sizes().iter().enumerate() {
            for v in 0..n {
                vertices.push(BackMapVertex { part, vertex: v, object: self.object(part, v)? });
            }
        }
        let mut edges = Vec::new();
        for e in self.chain.edges().into_iter().filter(|e| e.len() == self.k()) {
            let point = self.edge_point(&e)?;
            edges.push(BackMapEdge { edge: e, point });
        }
        Ok((vertices, edges))
    }

    /// All simplices, as vertex tuples (x_1, …, x_{k+1}).
    pub fn simplices(&self) -> Vec<Vec<usize>> {
        let k = self.k();
        let axes = IndexSet::from_bits((1u32 << k) - 1);
        let part = self.chain.partition();
        let top = part.tuples(axes);
        let diag_size = part.size(k);
        let mut out: Vec<Vec<usize>> = self
            .chain
            .slice_codes(axes)
            .par_iter()
            .flat_map_iter(|&c| {
                let base = top.decode(c);
                (0..diag_size).filter_map(move |w| {
                    let mut x = base.clone();
                    x.push(w);
                    let ok = (0..k).all(|i| {
                        let face = axes.without(i).with(k);
                        self.chain.contains_code(face, part.tuples(face).encode_full(&x))
                    });
                    ok.then_some(x)
                })
            })
            .collect();
        out.sort();
        out
    }

    /// The configuration behind a simplex: base (m_1, …, m_k) and d = m − Σ m_i.
    pub fn configuration(&self, simplex: &[usize]) -> Configuration {
        let k = self.k();
        let base: Vec<i64> = simplex[..k].iter().map(|&v| v as i64 + 1).collect();
        let m = simplex[k] as i64 + k as i64;
        let d = m - base.iter().sum::<i64>();
        Configuration::new(base, d)
    }

    pub fn report(&self) -> ConfigurationReport {
        let k = self.k();
        let simplices = self.simplices();
        let mut configurations = Vec::new();
        let mut degenerate = 0;
        let mut faces = HashSet::new();
        let mut face_total = 0;
        for x in &simplices {
            let c = self.configuration(x);
            if c.d == 0 {
                degenerate += 1;
                for i in 0..=k {
                    let mut f = x.clone();
                    f[i] = usize::MAX;
                    faces.insert(f);
                    face_total += 1;
                }
            } else {
                configurations.push(c);
            }
        }
        configurations.sort();
        ConfigurationReport {
            points: self.grid.len(),
            simplices: simplices.len(),
            degenerate,
            degenerate_edge_disjoint: faces.len() == face_total,
            configurations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationReport {
    pub points: usize,
    pub simplices: usize,
    pub degenerate: usize,
    pub degenerate_edge_disjoint: bool,
    /// Non-degenerate configurations, sorted.
    pub configurations: Vec<Configuration>,
}

/// Hyperplanes P_{j,m} (m ∈ [1,N]) and Q_m (m ∈ [k, kN]); k hyperplanes from distinct parts are an
/// edge when they meet in a point of A.
pub fn simplex_reduction(grid: &GridSet) -> Result<ReductionInstance> {
    let k = grid.dim;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("simplex reduction needs dimension ≥ 2, got {k}")));
    }
    let n = grid.n as usize;
    let mut sizes = vec![n; k];
    sizes.push(k * n - k + 1);
    let partition = VertexPartition::new(sizes)?;
    let mut edges = Vec::with_capacity(grid.len() * (k + 1));
    for p in &grid.points {
        let coords: Vec<usize> = p.iter().map(|&c| c as usize - 1).collect();
        let diag = p.iter().sum::<i64>() as usize - k;
        for skip in 0..=k {
            let mut vs: Vec<(usize, usize)> =
                coords.iter().enumerate().filter(|&(j, _)| j != skip).map(|(j, &v)| (j, v)).collect();
            if skip != k {
                vs.push((k, diag));
            }
            edges.push(Edge::new(vs)?);
        }
    }
    let chain = down_closure(&edges, &partition, k)?;
    Ok(ReductionInstance { grid: grid.clone(), chain })
}

/// Vertical, horizontal and diagonal lines; triangles are corners (x,y), (x+d,y), (x,y+d).
pub fn corners_reduction(grid: &GridSet) -> Result<ReductionInstance> {
    if grid.dim != 2 {
        return Err(Error::WrongDimension { expected: 2, got: grid.dim });
    }
    simplex_reduction(grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymmetrizeMode {
    Exhaustive,
    Sampled { samples: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Symmetrization {
    pub center: Vec<i64>,
    pub set: GridSet,
}

/// B = A ∩ (c − A) for the center c maximizing |B| (ties to the smallest c).
pub fn symmetrize(grid: &GridSet, mode: SymmetrizeMode) -> Result<Symmetrization> {
    let size = |c: &[i64]| {
        grid.points
            .iter()
            .filter(|p| {
                let q: Vec<i64> = c.iter().zip(p.iter()).map(|(c, x)| c - x).collect();
                grid.contains(&q)
            })
            .count()
    };
    let center = match mode {
        SymmetrizeMode::Exhaustive => {
            let mut hist: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
            for p in &grid.points {
                for q in &grid.points {
                    let c: Vec<i64> = p.iter().zip(q).map(|(a, b)| a + b).collect();
                    *hist.entry(c).or_insert(0) += 1;
                }
            }
            let best = hist.values().copied().max().unwrap_or(0);
            hist.into_iter().find(|(_, v)| *v == best).map(|(c, _)| c)
        }
        SymmetrizeMode::Sampled { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut best: Option<(usize, Vec<i64>)> = None;
            for _ in 0..samples.max(1) {
                let c: Vec<i64> = (0..grid.dim).map(|_| rng.gen_range(2..=2 * grid.n)).collect();
                let s = size(&c);
                if best.as_ref().map_or(true, |(b, bc)| s > *b || (s == *b && c < *bc)) {
                    best = Some((s, c));
                }
            }
            best.map(|(_, c)| c)
        }
    }
    .unwrap_or_else(|| vec![grid.n + 1; grid.dim]);
    let points: Vec<Vec<i64>> = grid
        .points
        .iter()
        .filter(|p| {
            let q: Vec<i64> = center.iter().zip(p.iter()).map(|(c, x)| c - x).collect();
            grid.contains(&q)
        })
        .cloned()
        .collect();
    Ok(Symmetrization { set: GridSet::new(grid.dim, grid.n, points)?, center })
}

/// B = {(x, y) : x + 2y ∈ A} with x shifted by 2N so that B sits in [1, 3N]².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ap3Reduction {
    pub n: i64,
    pub offset: i64,
    pub grid: GridSet,
}

impl Ap3Reduction {
    /// The progression (a, a+d, a+2d) carried by a corner of B.
    pub fn progression(&self, corner: &Configuration) -> (i64, i64) {
        (corner.base[0] - self.offset + 2 * corner.base[1], corner.d)
    }
}

pub fn ap3_reduction(set: &BTreeSet<i64>, n: i64) -> Result<Ap3Reduction> {
    if n < 1 {
        return Err(Error::InvalidArgument("N must be positive".into()));
    }
    if let Some(a) = set.iter().find(|&&a| a < 1 || a > n) {
        return Err(Error::InvalidArgument(format!("{a} outside [1, {n}]")));
    }
    let offset = 2 * n;
    let mut points = Vec::new();
    for y in 1..=n {
        for a in set {
            let x = a + offset - 2 * y;
            if (1..=3 * n).contains(&x) {
                points.push(vec![x, y]);
            }
        }
    }
    Ok(Ap3Reduction { n, offset, grid: GridSet::new(2, 3 * n, points)? })
}

/// All (a, d), d ≠ 0, with a, a+d, a+2d ∈ A.
pub fn three_term_progressions(set: &BTreeSet<i64>) -> Vec<(i64, i64)> {
    let (lo, hi) = match (set.first(), set.last()) {
        (Some(&l), Some(&h)) => (l, h),
        _ => return Vec::new(),
    };
    let mut out = Vec::new();
    for &a in set {
        for d in (lo - hi)..=(hi - lo) {
            if d != 0 && set.contains(&(a + d)) && set.contains(&(a + 2 * d)) {
                out.push((a, d));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    Corner,
    AxisSimplex,
    Pattern(Vec<Vec<i64>>),
}

/// Exhaustive list of configurations with d ≠ 0, sorted.
pub fn brute_force_find(grid: &GridSet, kind: &PatternKind, budget: u64) -> Result<Vec<Configuration>> {
    let pattern: Vec<Vec<i64>> = match kind {
        PatternKind::Corner | PatternKind::AxisSimplex => {
            if matches!(kind, PatternKind::Corner) && grid.dim != 2 {
                return Err(Error::WrongDimension { expected: 2, got: grid.dim });
            }
            let mut x = vec![vec![0; grid.dim]];
            for i in 0..grid.dim {
                let mut e = vec![0; grid.dim];
                e[i] = 1;
                x.push(e);
            }
            x
        }
        PatternKind::Pattern(x) => {
            validate_pattern(x, grid.dim)?;
            x.clone()
        }
    };
    let span = 2 * (grid.n - 1) + 1;
    let work = grid.len() as u64 * span as u64 * pattern.len() as u64;
    if work > budget {
        return Err(Error::BudgetExceeded(format!("scan needs {work} checks, budget {budget}")));
    }
    if pattern.len() == 1 {
        return Ok(Vec::new());
    }
    let x0 = pattern[0].clone();
    let mut out: Vec<Configuration> = grid
        .points
        .par_iter()
        .flat_map_iter(|p| {
            let x0 = &x0;
            let pattern = &pattern;
            (-(grid.n - 1)..=(grid.n - 1)).filter(|&d| d != 0).filter_map(move |d| {
                let a: Vec<i64> = p.iter().zip(x0).map(|(pi, xi)| pi - d * xi).collect();
                let c = Configuration::new(a, d);
                c.pattern_points(pattern).iter().all(|q| grid.contains(q)).then_some(c)
            })
        })
        .collect();
    out.sort();
    out.dedup();
    Ok(out)
}

fn validate_pattern(x: &[Vec<i64>], dim: usize) -> Result<()> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("pattern is empty".into()));
    }
    if let Some(p) = x.iter().find(|p| p.len() != dim) {
        return Err(Error::WrongDimension { expected: dim, got: p.len() });
    }
    let distinct: BTreeSet<&Vec<i64>> = x.iter().collect();
    if distinct.len() != x.len() {
        return Err(Error::InvalidArgument("pattern points must be distinct".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternMatch {
    pub configuration: Configuration,
    pub points: Vec<Vec<i64>>,
    /// The point of A that φ(0) was translated onto.
    pub translate: Vec<i64>,
    /// Size of the pulled-back grid set searched at that translate.
    pub window_points: usize,
}

/// Finds some a + dX ⊆ A through the affine map φ(w) = x_0 + Σ w_i (x_i − x_0), which sends
/// {0, e_1, …, e_k} onto X. Translates are the points of A, densest window first.
pub fn pattern_reduction(pattern: &[Vec<i64>], grid: &GridSet) -> Result<Option<PatternMatch>> {
    validate_pattern(pattern, grid.dim)?;
    let x0 = &pattern[0];
    if pattern.len() == 1 {
        return Ok(grid.points.iter().next().map(|p| {
            let a: Vec<i64> = p.iter().zip(x0).map(|(pi, xi)| pi - xi).collect();
            PatternMatch {
                points: vec![p.clone()],
                configuration: Configuration::new(a, 1),
                translate: p.clone(),
                window_points: 1,
            }
        }));
    }
    for j in 0..grid.dim {
        let lo = pattern.iter().map(|x| x[j]).min().unwrap();
        let hi = pattern.iter().map(|x| x[j]).max().unwrap();
        if hi - lo > grid.n - 1 {
            return Err(Error::NotRealizable(format!("pattern spans {} in coordinate {} but N = {}", hi - lo, j + 1, grid.n)));
        }
    }
    let k = pattern.len() - 1;
    let cols: Vec<Vec<i64>> = pattern[1..].iter().map(|x| x.iter().zip(x0).map(|(a, b)| a - b).collect()).collect();
    let r = grid.n - 1;
    let side = 2 * r + 1;
    let image = |p: &[i64], w: &[i64]| -> Vec<i64> {
        let mut q = p.to_vec();
        for (wi, col) in w.iter().zip(&cols) {
            for (qj, cj) in q.iter_mut().zip(col) {
                *qj += wi * cj;
            }
        }
        q
    };
    // B at translate p: shifted w with p + M w ∈ A
    let window = |p: &[i64]| -> Vec<Vec<i64>> {
        let mut out = Vec::new();
        let mut w = vec![-r; k];
        loop {
            if grid.contains(&image(p, &w)) {
                out.push(w.iter().map(|v| v + r + 1).collect());
            }
            let mut i = k;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if w[i] < r {
                    w[i] += 1;
                    break;
                }
                w[i] = -r;
            }
        }
    };
    let mut windows: Vec<(Vec<i64>, Vec<Vec<i64>>)> =
        grid.points.par_iter().map(|p| (p.clone(), window(p))).collect();
    windows.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    for (p, pts) in windows {
        let b = GridSet::new(k, side, pts)?;
        let found: Vec<Configuration> = if k >= 2 {
            simplex_reduction(&b)?.report().configurations
        } else {
            brute_force_find(&b, &PatternKind::AxisSimplex, u64::MAX)?
        };
        for c in found {
            let w: Vec<i64> = c.base.iter().map(|v| v - r - 1).collect();
            let q = image(&p, &w);
            let a: Vec<i64> = q.iter().zip(x0).map(|(qi, xi)| qi - c.d * xi).collect();
            let conf = Configuration::new(a, c.d);
            let points = conf.pattern_points(pattern);
            if points.iter().all(|pt| grid.contains(pt)) {
                return Ok(Some(PatternMatch { configuration: conf, points, translate: p, window_points: b.len() }));
            }
        }
    }
    Ok(None)
}

/// Number of simplices (tuples all of whose k-faces are top edges) of a (k+1)-partite chain.
pub fn count_simplices(chain: &Chain) -> Result<u64> {
    Ok(simplex_tuples(chain)?.len() as u64)
}

pub fn simplex_tuples(chain: &Chain) -> Result<Vec<Vec<usize>>> {
    let r = chain.part_count();
    let k = chain.k();
    if r != k + 1 {
        return Err(Error::Shape(format!("expected {} parts for k = {k}, got {r}", k + 1)));
    }
    let part = chain.partition();
    let full = part.full_index();
    let last = full.without(k);
    let top = part.tuples(last);
    let faces: Vec<IndexSet> = (0..k).map(|i| full.without(i)).collect();
    let mut out: Vec<Vec<usize>> = chain
        .slice_codes(last)
        .par_iter()
        .flat_map_iter(|&c| {
            let base = top.decode(c);
            let faces = &faces;
            (0..part.size(k)).filter_map(move |w| {
                let mut x = base.clone();
                x.push(w);
                faces
                    .iter()
                    .all(|&f| chain.contains_code(f, part.tuples(f).encode_full(&x)))
                    .then_some(x)
            })
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Parameters for the removal pipeline; the regularization settings pass through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalConfig {
    pub a: f64,
    pub regularize: RegularizeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideRemoval {
    /// 1-based part left out by this side.
    pub side: usize,
    pub edges_before: usize,
    /// Edges extendable to a tuple whose induced chain fails at an index inside the side.
    pub cause_quasirandom: usize,
    /// Edges carrying δ_{C,x} < γ/m_C for some C inside the side, not already removed.
    pub cause_sparse: usize,
    pub removed: usize,
    pub removed_fraction: f64,
    /// Final failing fraction plus a/2.
    pub allowance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Survivor {
    pub simplex: Vec<usize>,
    /// ∏_j N_j ∏_{A∈J} δ_{A,x}.
    pub counting_lower_bound: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RemovalReport {
    pub k: usize,
    pub a: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub template_size: usize,
    pub simplices_before: u64,
    pub simplices_after: u64,
    pub sides: Vec<SideRemoval>,
    pub survivors: Vec<Survivor>,
    pub cells: Vec<(IndexSet, u32)>,
    pub trace: RegularizeTrace,
    /// Removed top edges per side, 1-based side number to edges.
    #[serde(skip)]
    pub removed_edges: BTreeMap<usize, (Vec<Edge>, Vec<Edge>)>,
    #[serde(skip)]
    pub system: Option<PartitionSystem>,
    #[serde(skip)]
    pub remaining: Option<Chain>,
}

/// Regularizes the top-level split of H, prunes edges by the two removal causes and recounts simplices.
pub fn removal_run(h: &Chain, config: &RemovalConfig) -> Result<RemovalReport> {
    let k = h.k();
    let r = h.part_count();
    if r != k + 1 || k < 1 {
        return Err(Error::Shape(format!("removal needs a (k+1)-partite k-chain, got {r} parts and k = {k}")));
    }
    if !(config.a > 0.0 && config.a < 1.0) {
        return Err(Error::InvalidArgument(format!("a = {} not in (0,1)", config.a)));
    }
    let full = h.partition().full_index();
    if (0..r).all(|i| h.slice_count(full.without(i)) == 0) {
        return Err(Error::InvalidArgument("top level is empty".into()));
    }
    let template = complete_template(r, k)?;
    let template_size = template.edge_count() + 1;
    let epsilon = (0.5 / template_size as f64).min(config.a / 2.0);
    let binom_sum: f64 = (1..=k).map(|i| binomial(k + 1, i)).sum();
    let gamma = config.a / 2.0 / binom_sum;

    let p0 = PartitionSystem::top_split(h);
    let (q, trace) = regularize(&p0, &template, epsilon, &config.regularize)?;
    let classes = Classes::new(&q);
    let exhaustive = RegularizeConfig { exhaustive_limit: usize::MAX, ..config.regularize.clone() };
    let xs = evaluation_tuples(h.partition(), &exhaustive, 0)?;
    let eval = Evaluator::new(&q, &classes, &template, epsilon, config.regularize.eta.clone(), &xs);
    let failing: Vec<Vec<IndexSet>> = xs.par_iter().map(|x| eval.failing_indices(x)).collect();

    let part = h.partition();
    let mut sides = Vec::new();
    let mut removed_edges = BTreeMap::new();
    let mut kept: BTreeMap<IndexSet, Vec<usize>> = BTreeMap::new();
    for i in 0..r {
        let side = full.without(i);
        let space = part.tuples(side);
        let mut cause1: BTreeSet<usize> = BTreeSet::new();
        // a failure at A with i ∉ A does not depend on x_i, so it is charged to side i
        for (x, f) in xs.iter().zip(&failing) {
            if f.iter().any(|a| !a.contains(i)) {
                let c = space.encode_full(x);
                if h.contains_code(side, c) {
                    cause1.insert(c);
                }
            }
        }
        let sparse_index: Vec<IndexSet> = side.nonempty_subsets().collect();
        let codes = h.slice_codes(side);
        let mut cause2 = BTreeSet::new();
        for &c in &codes {
            if cause1.contains(&c) {
                continue;
            }
            let e = space.decode(c);
            let mut x = vec![0usize; r];
            for (t, p) in side.parts().enumerate() {
                x[p] = e[t];
            }
            let sparse = sparse_index.iter().any(|&cidx| {
                let cc = classes.space(cidx).encode_full(&x);
                let s = classes.strong_size[&cidx][classes.strong[&cidx][cc] as usize] as f64;
                let w = classes.weak_size[&cidx][classes.weak[&cidx][cc] as usize] as f64;
                s / w < gamma / q.cell_count(cidx) as f64
            });
            if sparse {
                cause2.insert(c);
            }
        }
        let total_side = space.len() as f64;
        let removed = cause1.len() + cause2.len();
        sides.push(SideRemoval {
            side: i + 1,
            edges_before: codes.len(),
            cause_quasirandom: cause1.len(),
            cause_sparse: cause2.len(),
            removed,
            removed_fraction: removed as f64 / total_side,
            allowance: trace.final_failing_fraction + config.a / 2.0,
        });
        removed_edges.insert(
            i + 1,
            (
                cause1.iter().map(|&c| space.edge(c)).collect(),
                cause2.iter().map(|&c| space.edge(c)).collect(),
            ),
        );
        kept.insert(side, codes.into_iter().filter(|c| !cause1.contains(c) && !cause2.contains(c)).collect());
    }
    let mut tables: BTreeMap<IndexSet, EdgeTable> = BTreeMap::new();
    for a in h.indices() {
        let len = part.tuples(a).len();
        let codes = kept.get(&a).cloned().unwrap_or_else(|| h.slice_codes(a));
        tables.insert(a, EdgeTable::from_codes(len, codes));
    }
    let remaining = Chain::from_tables_unchecked(part.clone(), k, tables);
    let simplices_before = count_simplices(h)?;
    let after = simplex_tuples(&remaining)?;
    let n_total: f64 = part.sizes().iter().map(|&n| n as f64).product();
    let survivors = after
        .iter()
        .map(|x| {
            let mut prod = BigRational::one();
            for a in template.indices() {
                prod *= classes.relative_density(a, x);
            }
            Survivor { simplex: x.clone(), counting_lower_bound: n_total * prod.to_f64().unwrap_or(0.0) }
        })
        .collect();
    Ok(RemovalReport {
        k,
        a: config.a,
        epsilon,
        gamma,
        template_size,
        simplices_before,
        simplices_after: after.len() as u64,
        sides,
        survivors,
        cells: q.indices().into_iter().map(|a| (a, q.cell_count(a))).collect(),
        trace,
        removed_edges,
        system: Some(q),
        remaining: Some(remaining),
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Sides through the last part are complete; the side of the first k parts holds `planted`
/// random edges only, so every simplex runs through one of them.
pub fn sparse_side_instance<R: Rng>(k: usize, n: usize, planted: usize, rng: &mut R) -> Result<Chain> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let r = k + 1;
    let partition = VertexPartition::uniform(r, n)?;
    let full = partition.full_index();
    let mut edges = Vec::new();
    for i in 0..k {
        let space = partition.tuples(full.without(i));
        edges.extend((0..space.len()).map(|c| space.edge(c)));
    }
    let axes = partition.tuples(full.without(k));
    let planted = planted.min(axes.len());
    let mut chosen = BTreeSet::new();
    while chosen.len() < planted {
        chosen.insert(rng.gen_range(0..axes.len()));
    }
    edges.extend(chosen.into_iter().map(|c| axes.edge(c)));
    down_closure(&edges, &partition, k)
}

/// The top edges of each degenerate simplex, keyed by the point it collapses to.
pub fn degenerate_faces(instance: &ReductionInstance) -> HashMap<Vec<i64>, Vec<Edge>> {
    let k = instance.k();
    let part = instance.chain.partition();
    let mut out = HashMap::new();
    for x in instance.simplices() {
        let c = instance.configuration(&x);
        if c.d == 0 {
            let faces = (0..=k)
                .map(|i| {
                    let side = part.full_index().without(i);
                    part.tuples(side).edge(part.tuples(side).encode_full(&x))
                })
                .collect();
            out.insert(c.base, faces);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_trivia() {
        let g = GridSet::empty(2, 3).unwrap();
        let r = corners_reduction(&g).unwrap().report();
        assert_eq!((r.simplices, r.degenerate), (0, 0));
        let g = GridSet::new(2, 3, vec![vec![1, 1]]).unwrap();
        let r = corners_reduction(&g).unwrap().report();
        assert_eq!((r.simplices, r.degenerate), (1, 1));
        let g = GridSet::new(2, 2, vec![vec![1, 1], vec![2, 1], vec![1, 2]]).unwrap();
        let found = brute_force_find(&g, &PatternKind::Corner, DEFAULT_SCAN_BUDGET).unwrap();
        assert_eq!(found, vec![Configuration::new(vec![1, 1], 1)]);
        assert_eq!(corners_reduction(&g).unwrap().report().configurations, found);
    }

    #[test]
    fn part_sizes() {
        let g = GridSet::new(3, 4, vec![vec![1, 2, 3]]).unwrap();
        let inst = simplex_reduction(&g).unwrap();
        assert_eq!(inst.chain.partition().sizes(), &[4, 4, 4, 10]);
        let e = inst.chain.edges().into_iter().find(|e| e.len() == 3 && e.vertex_in(3).is_some()).unwrap();
        assert_eq!(inst.edge_point(&e).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn symmetric_set_is_fixed() {
        let g = GridSet::new(2, 5, vec![vec![1, 2], vec![5, 4], vec![3, 3]]).unwrap();
        let s = symmetrize(&g, SymmetrizeMode::Exhaustive).unwrap();
        assert_eq!(s.center, vec![6, 6]);
        assert_eq!(s.set, g);
    }

    #[test]
    fn single_point_pattern() {
        let g = GridSet::new(1, 5, vec![vec![3]]).unwrap();
        let m = pattern_reduction(&[vec![7]], &g).unwrap().unwrap();
        assert_eq!(m.configuration, Configuration::new(vec![-4], 1));
    }

    #[test]
    fn sparse_side_simplices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [2, 3] {
            let h = sparse_side_instance(k, 4, 3, &mut rng).unwrap();
            assert_eq!(count_simplices(&h).unwrap(), 12);
        }
    }
}
