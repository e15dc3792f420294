//! Homomorphism counting from template chains, the counting-lemma check and weighted expectations.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{Chain, Edge, EdgeTable, IndexSet};
use crate::error::{Error, Result};
use crate::quasirandom::{oct, EdgeFunction, OctStrategy};

/// Maps above this count switch the counting-lemma check to sampling.
pub const DEFAULT_MAP_BUDGET: u128 = 100_000_000;

/// Samples drawn when the map budget is exceeded.
pub const DEFAULT_SAMPLES: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HomomorphismCount {
    pub exact_count: u128,
    pub total_maps: u128,
    pub probability: BigRational,
}

/// A template vertex: (part, id within the template part).
type TVertex = (usize, usize);

enum Factor<'a> {
    Indicator(Option<&'a EdgeTable>),
    Weight(&'a EdgeFunction<f64>),
}

struct Check<'a> {
    slots: Vec<usize>,
    strides: Vec<usize>,
    factor: Factor<'a>,
}

impl Check<'_> {
    fn code(&self, assignment: &[usize]) -> usize {
        self.slots.iter().zip(&self.strides).map(|(&s, &st)| assignment[s] * st).sum()
    }
}

struct Plan<'a> {
    /// Template vertex in each slot.
    order: Vec<TVertex>,
    /// Host part size of each slot, in assignment order.
    domain: Vec<usize>,
    /// Checks completed at each depth.
    at_depth: Vec<Vec<Check<'a>>>,
    /// Product of host sizes over template vertices in no checked edge.
    free_factor: u128,
    total_maps: u128,
}

fn check_alignment(template: &Chain, host: &Chain) -> Result<()> {
    if template.part_count() != host.part_count() {
        return Err(Error::PartMismatch(format!(
            "template has {} parts, host has {}",
            template.part_count(),
            host.part_count()
        )));
    }
    if template.max_edge_size() > host.k() {
        return Err(Error::EdgeTooLarge { size: template.max_edge_size(), k: host.k() });
    }
    Ok(())
}

/// ∏_i N_i^{|E_i|}.
pub fn total_maps(template: &Chain, host: &Chain) -> Result<u128> {
    let mut total: u128 = 1;
    for p in 0..template.part_count() {
        for _ in 0..template.partition().size(p) {
            total = total
                .checked_mul(host.partition().size(p) as u128)
                .ok_or_else(|| Error::BudgetExceeded("map count overflows 128 bits".into()))?;
        }
    }
    Ok(total)
}

fn build_plan<'a>(
    template: &Chain,
    host: &'a Chain,
    factors: Vec<(Edge, Factor<'a>)>,
) -> Result<Plan<'a>> {
    let total = total_maps(template, host)?;
    let mut vertices: BTreeSet<TVertex> = BTreeSet::new();
    for (e, _) in &factors {
        vertices.extend(e.vertices().iter().copied());
    }
    let degree = |v: &TVertex| factors.iter().filter(|(e, _)| e.vertices().contains(v)).count();
    // most-constrained first: the vertex closing the most edges, then highest degree, then smallest
    let mut order: Vec<TVertex> = Vec::new();
    let mut placed: BTreeSet<TVertex> = BTreeSet::new();
    while placed.len() < vertices.len() {
        let best = vertices
            .iter()
            .filter(|v| !placed.contains(v))
            .max_by(|a, b| {
                let closes = |v: &TVertex| {
                    factors
                        .iter()
                        .filter(|(e, _)| {
                            e.vertices().contains(v) && e.vertices().iter().all(|u| u == v || placed.contains(u))
                        })
                        .count()
                };
                closes(a).cmp(&closes(b)).then(degree(a).cmp(&degree(b))).then(b.cmp(a))
            })
            .copied()
            .unwrap();
        placed.insert(best);
        order.push(best);
    }
    let slot_of: BTreeMap<TVertex, usize> = order.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let mut at_depth: Vec<Vec<Check>> = (0..order.len()).map(|_| Vec::new()).collect();
    for (e, factor) in factors {
        if e.is_empty() {
            continue;
        }
        let slots: Vec<usize> = e.vertices().iter().map(|v| slot_of[v]).collect();
        let strides = host.partition().tuples(e.index()).strides().to_vec();
        let depth = *slots.iter().max().unwrap();
        at_depth[depth].push(Check { slots, strides, factor });
    }
    let mut free_factor: u128 = 1;
    for p in 0..template.part_count() {
        for t in 0..template.partition().size(p) {
            if !slot_of.contains_key(&(p, t)) {
                free_factor *= host.partition().size(p) as u128;
            }
        }
    }
    let domain = order.iter().map(|&(p, _)| host.partition().size(p)).collect();
    Ok(Plan { order, domain, at_depth, free_factor, total_maps: total })
}

fn indicator_factors<'a>(template: &Chain, host: &'a Chain) -> Vec<(Edge, Factor<'a>)> {
    template
        .edges()
        .into_iter()
        .map(|e| {
            let t = host.table(e.index());
            (e, Factor::Indicator(t))
        })
        .collect()
}

fn count_rec(plan: &Plan, assignment: &mut Vec<usize>, depth: usize) -> u128 {
    let checks = &plan.at_depth[depth];
    let last = depth + 1 == plan.domain.len();
    let mut total = 0u128;
    for v in 0..plan.domain[depth] {
        assignment[depth] = v;
        let ok = checks.iter().all(|c| match &c.factor {
            Factor::Indicator(t) => t.is_some_and(|t| t.contains(c.code(assignment))),
            Factor::Weight(_) => unreachable!(),
        });
        if ok {
            total += if last { 1 } else { count_rec(plan, assignment, depth + 1) };
        }
    }
    total
}

fn count_with_plan(plan: &Plan) -> u128 {
    if plan.domain.is_empty() {
        return plan.free_factor;
    }
    let n = plan.domain.len();
    let sum: u128 = (0..plan.domain[0])
        .into_par_iter()
        .map(|v| {
            let mut assignment = vec![0usize; n];
            assignment[0] = v;
            let ok = plan.at_depth[0].iter().all(|c| match &c.factor {
                Factor::Indicator(t) => t.is_some_and(|t| t.contains(c.code(&assignment))),
                Factor::Weight(_) => unreachable!(),
            });
            if !ok {
                0
            } else if n == 1 {
                1
            } else {
                count_rec(plan, &mut assignment, 1)
            }
        })
        .sum();
    sum * plan.free_factor
}

/// Exact |Hom(J, H)| by backtracking over template vertices.
pub fn count_homomorphisms(template: &Chain, host: &Chain) -> Result<HomomorphismCount> {
    check_alignment(template, host)?;
    let plan = build_plan(template, host, indicator_factors(template, host))?;
    let exact_count = count_with_plan(&plan);
    Ok(HomomorphismCount {
        exact_count,
        total_maps: plan.total_maps,
        probability: BigRational::new(BigInt::from(exact_count), BigInt::from(plan.total_maps)),
    })
}

fn enumerate_rec(plan: &Plan, assignment: &mut Vec<usize>, depth: usize, visit: &mut dyn FnMut(&[usize])) {
    if depth == plan.domain.len() {
        visit(assignment);
        return;
    }
    for v in 0..plan.domain[depth] {
        assignment[depth] = v;
        let ok = plan.at_depth[depth].iter().all(|c| match &c.factor {
            Factor::Indicator(t) => t.is_some_and(|t| t.contains(c.code(assignment))),
            Factor::Weight(_) => unreachable!(),
        });
        if ok {
            enumerate_rec(plan, assignment, depth + 1, visit);
        }
    }
}

/// Calls `visit` with every homomorphism restricted to the non-isolated template vertices,
/// as a map from template vertex to host vertex.
pub fn enumerate_homomorphisms(
    template: &Chain,
    host: &Chain,
    mut visit: impl FnMut(&BTreeMap<(usize, usize), usize>),
) -> Result<()> {
    check_alignment(template, host)?;
    let plan = build_plan(template, host, indicator_factors(template, host))?;
    let order = plan.order.clone();
    let mut assignment = vec![0usize; plan.domain.len()];
    let mut map = BTreeMap::new();
    let mut visit_slots = |a: &[usize]| {
        map.clear();
        for (slot, v) in order.iter().enumerate() {
            map.insert(*v, a[slot]);
        }
        visit(&map);
    };
    if plan.domain.is_empty() {
        visit_slots(&[]);
        return Ok(());
    }
    enumerate_rec(&plan, &mut assignment, 0, &mut visit_slots);
    Ok(())
}

/// Monte Carlo estimate of the homomorphism probability and its standard error.
pub fn hom_probability_sample(template: &Chain, host: &Chain, samples: usize, seed: u64) -> Result<(f64, f64)> {
    check_alignment(template, host)?;
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be positive".into()));
    }
    let edges = template.edges();
    let checks: Vec<(Vec<TVertex>, Vec<usize>, Option<&EdgeTable>)> = edges
        .iter()
        .map(|e| {
            (
                e.vertices().to_vec(),
                host.partition().tuples(e.index()).strides().to_vec(),
                host.table(e.index()),
            )
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = template.part_count();
    let mut image: Vec<Vec<usize>> = (0..r).map(|p| vec![0; template.partition().size(p)]).collect();
    let mut hits = 0usize;
    for _ in 0..samples {
        for (p, row) in image.iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v = rng.gen_range(0..host.partition().size(p));
            }
        }
        let ok = checks.iter().all(|(vs, strides, t)| {
            let code: usize = vs.iter().zip(strides).map(|(&(p, tv), s)| image[p][tv] * s).sum();
            t.is_some_and(|t| t.contains(code))
        });
        if ok {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    Ok((p, (p * (1.0 - p) / samples as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountingVerdict {
    pub probability: f64,
    /// Exact probability as "p/q" when counted exactly.
    pub probability_exact: Option<String>,
    pub standard_error: Option<f64>,
    /// ∏_{A∈J} δ_A over the nonempty template edges.
    pub expected: f64,
    pub expected_exact: String,
    pub margin: f64,
    pub allowed: f64,
    pub epsilon: f64,
    pub pass: bool,
}

/// ∏ over nonempty template edges of δ_{i(A)} in the host.
pub fn density_product(template: &Chain, host: &Chain) -> Result<BigRational> {
    let mut cache: BTreeMap<IndexSet, BigRational> = BTreeMap::new();
    let mut prod = BigRational::one();
    for e in template.edges() {
        let a = e.index();
        if !cache.contains_key(&a) {
            cache.insert(a, host.relative_density(a)?);
        }
        prod *= cache[&a].clone();
    }
    Ok(prod)
}

pub fn counting_lemma_check(template: &Chain, host: &Chain, epsilon: f64) -> Result<CountingVerdict> {
    counting_lemma_check_with(template, host, epsilon, DEFAULT_MAP_BUDGET, DEFAULT_SAMPLES, 0)
}

pub fn counting_lemma_check_with(
    template: &Chain,
    host: &Chain,
    epsilon: f64,
    map_budget: u128,
    samples: usize,
    seed: u64,
) -> Result<CountingVerdict> {
    check_alignment(template, host)?;
    let expected_exact = density_product(template, host)?;
    let expected = expected_exact.to_f64().unwrap_or(0.0);
    let allowed = epsilon * expected;
    let fits = total_maps(template, host).map(|t| t <= map_budget).unwrap_or(false);
    if fits {
        let count = count_homomorphisms(template, host)?;
        let diff = &count.probability - &expected_exact;
        let margin = diff.abs().to_f64().unwrap_or(f64::INFINITY);
        let allowed_exact = BigRational::from_float(epsilon).unwrap_or_else(BigRational::zero) * &expected_exact;
        Ok(CountingVerdict {
            probability: count.probability.to_f64().unwrap_or(0.0),
            probability_exact: Some(count.probability.to_string()),
            standard_error: None,
            expected,
            expected_exact: expected_exact.to_string(),
            margin,
            allowed,
            epsilon,
            pass: diff.abs() <= allowed_exact,
        })
    } else {
        let (p, se) = hom_probability_sample(template, host, samples, seed)?;
        let margin = (p - expected).abs() + 3.0 * se;
        Ok(CountingVerdict {
            probability: p,
            probability_exact: None,
            standard_error: Some(se),
            expected,
            expected_exact: expected_exact.to_string(),
            margin,
            allowed,
            epsilon,
            pass: margin <= allowed,
        })
    }
}

fn check_weights(
    template: &Chain,
    sub: &Chain,
    g: &BTreeMap<Edge, EdgeFunction<f64>>,
    host: &Chain,
) -> Result<()> {
    if sub.partition() != template.partition() {
        return Err(Error::PartMismatch("sub-chain must live on the template's vertex sets".into()));
    }
    for e in sub.edges() {
        if !template.contains(&e) {
            return Err(Error::InvalidArgument(format!("edge {e} of the sub-chain is not in the template")));
        }
    }
    for (e, f) in g {
        if !sub.contains(e) || e.is_empty() {
            return Err(Error::InvalidArgument(format!("weight given for {e}, which is not in the sub-chain")));
        }
        let a = e.index();
        let sizes: Vec<usize> = a.parts().map(|p| host.partition().size(p)).collect();
        if f.index() != a || f.sizes() != sizes.as_slice() {
            return Err(Error::Shape(format!("weight for {e} must be a function on index {a} of the host")));
        }
        let table = host.table(a);
        if let Some(c) = (0..f.len()).find(|&c| *f.value(c) != 0.0 && !table.is_some_and(|t| t.contains(c))) {
            return Err(Error::Unsupported(format!("weight for {e} is nonzero at code {c}, outside H({a})")));
        }
    }
    Ok(())
}

fn weighted_rec(plan: &Plan, assignment: &mut Vec<usize>, depth: usize, acc: f64) -> f64 {
    let mut total = 0.0;
    for v in 0..plan.domain[depth] {
        assignment[depth] = v;
        let mut w = acc;
        for c in &plan.at_depth[depth] {
            let code = c.code(assignment);
            w *= match &c.factor {
                Factor::Indicator(t) => {
                    if t.is_some_and(|t| t.contains(code)) {
                        1.0
                    } else {
                        0.0
                    }
                }
                Factor::Weight(f) => *f.value(code),
            };
            if w == 0.0 {
                break;
            }
        }
        if w != 0.0 {
            total += if depth + 1 == plan.domain.len() { w } else { weighted_rec(plan, assignment, depth + 1, w) };
        }
    }
    total
}

fn weighted_with_plan(plan: &Plan) -> f64 {
    if plan.domain.is_empty() {
        return 1.0;
    }
    let n = plan.domain.len();
    let parts: Vec<f64> = (0..plan.domain[0])
        .into_par_iter()
        .map(|v| {
            let mut assignment = vec![0usize; n];
            let mut sub_plan_total = 0.0;
            // run depth 0 for this value only
            assignment[0] = v;
            let mut w = 1.0;
            for c in &plan.at_depth[0] {
                let code = c.code(&assignment);
                w *= match &c.factor {
                    Factor::Indicator(t) => f64::from(u8::from(t.is_some_and(|t| t.contains(code)))),
                    Factor::Weight(f) => *f.value(code),
                };
            }
            if w != 0.0 {
                sub_plan_total = if n == 1 { w } else { weighted_rec(plan, &mut assignment, 1, w) };
            }
            sub_plan_total
        })
        .collect();
    let covered: f64 = plan.domain.iter().map(|&n| n as f64).product();
    parts.into_iter().sum::<f64>() / covered
}

/// E_τ ∏_{A∈J1} g^A(τ) ∏_{A∈J∖J1} H^A(τ). Edges of J1 without an entry in `g` use H^A.
pub fn weighted_hom_expectation(
    template: &Chain,
    sub: &Chain,
    g: &BTreeMap<Edge, EdgeFunction<f64>>,
    host: &Chain,
) -> Result<f64> {
    check_alignment(template, host)?;
    check_weights(template, sub, g, host)?;
    let factors = template
        .edges()
        .into_iter()
        .map(|e| {
            let f = match g.get(&e) {
                Some(w) if sub.contains(&e) => Factor::Weight(w),
                _ => Factor::Indicator(host.table(e.index())),
            };
            (e, f)
        })
        .collect();
    let plan = build_plan(template, host, factors)?;
    Ok(weighted_with_plan(&plan))
}

/// E_τ ∏_{A∈J1} g^A(τ), with the same defaults as `weighted_hom_expectation`.
pub fn sub_chain_expectation(
    template: &Chain,
    sub: &Chain,
    g: &BTreeMap<Edge, EdgeFunction<f64>>,
    host: &Chain,
) -> Result<f64> {
    check_alignment(template, host)?;
    check_weights(template, sub, g, host)?;
    let factors = sub
        .edges()
        .into_iter()
        .map(|e| {
            let f = match g.get(&e) {
                Some(w) => Factor::Weight(w),
                None => Factor::Indicator(host.table(e.index())),
            };
            (e, f)
        })
        .collect();
    let plan = build_plan(template, host, factors)?;
    Ok(weighted_with_plan(&plan))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplacementCheck {
    pub weighted: f64,
    pub replaced: f64,
    pub error: f64,
    pub bound: f64,
    pub outside_count: usize,
    pub holds: bool,
}

/// Compares E_τ∏_{J1}g∏_{J∖J1}H with E_τ∏_{J1}g·∏_{J∖J1}δ against ε|J∖J1|∏_J δ.
pub fn replacement_check(
    template: &Chain,
    sub: &Chain,
    g: &BTreeMap<Edge, EdgeFunction<f64>>,
    host: &Chain,
    epsilon: f64,
) -> Result<ReplacementCheck> {
    let weighted = weighted_hom_expectation(template, sub, g, host)?;
    let inner = sub_chain_expectation(template, sub, g, host)?;
    let mut outside = BigRational::one();
    let mut outside_count = 0;
    for e in template.edges() {
        if !sub.contains(&e) {
            outside *= host.relative_density(e.index())?;
            outside_count += 1;
        }
    }
    let replaced = inner * outside.to_f64().unwrap_or(0.0);
    let all = density_product(template, host)?.to_f64().unwrap_or(0.0);
    let bound = epsilon * outside_count as f64 * all;
    let error = (weighted - replaced).abs();
    Ok(ReplacementCheck { weighted, replaced, error, bound, outside_count, holds: error <= bound })
}

/// Four vertex sets X, Y, Z, T with subsets P, Q, R, S, a bipartite graph G_XT ⊆ P×S,
/// graphs G_YT ⊆ Q×S and G_ZT ⊆ R×S, and a function f on X×Y×Z supported on P×Q×R.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourPartInstance {
    pub sizes: [usize; 4],
    pub p: Vec<bool>,
    pub q: Vec<bool>,
    pub r: Vec<bool>,
    pub s: Vec<bool>,
    pub g_xt: Vec<bool>,
    pub g_yt: Vec<bool>,
    pub g_zt: Vec<bool>,
    pub f: Vec<f64>,
}

impl FourPartInstance {
    pub fn random<R: Rng>(rng: &mut R, max_size: usize) -> Self {
        let sizes = [0; 4].map(|_| rng.gen_range(1..=max_size));
        let subset = |rng: &mut R, n: usize| -> Vec<bool> {
            let d = rng.gen_range(0.2..0.9);
            let mut v: Vec<bool> = (0..n).map(|_| rng.gen_bool(d)).collect();
            let i = rng.gen_range(0..n);
            v[i] = true;
            v
        };
        let [nx, ny, nz, nt] = sizes;
        let p = subset(rng, nx);
        let q = subset(rng, ny);
        let r = subset(rng, nz);
        let s = subset(rng, nt);
        let graph = |rng: &mut R, a: &[bool], b: &[bool]| -> Vec<bool> {
            let d = rng.gen_range(0.05..0.7);
            let mut out = Vec::with_capacity(a.len() * b.len());
            for &x in a {
                for &y in b {
                    out.push(x && y && rng.gen_bool(d));
                }
            }
            out
        };
        let g_xt = graph(rng, &p, &s);
        let g_yt = graph(rng, &q, &s);
        let g_zt = graph(rng, &r, &s);
        let mut f = Vec::with_capacity(nx * ny * nz);
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let inside = p[x] && q[y] && r[z];
                    f.push(if inside && rng.gen_bool(0.5) { rng.gen_range(-1.0..=1.0) } else { 0.0 });
                }
            }
        }
        FourPartInstance { sizes, p, q, r, s, g_xt, g_yt, g_zt, f }
    }

    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz, nt] = self.sizes;
        let shapes = [
            (self.p.len(), nx),
            (self.q.len(), ny),
            (self.r.len(), nz),
            (self.s.len(), nt),
            (self.g_xt.len(), nx * nt),
            (self.g_yt.len(), ny * nt),
            (self.g_zt.len(), nz * nt),
            (self.f.len(), nx * ny * nz),
        ];
        if shapes.iter().any(|(a, b)| a != b) || self.sizes.contains(&0) {
            return Err(Error::Shape("four-part instance arrays do not match the sizes".into()));
        }
        let nonempty = [&self.p, &self.q, &self.r, &self.s];
        if nonempty.iter().any(|v| !v.contains(&true)) {
            return Err(Error::InvalidArgument("P, Q, R and S must be nonempty".into()));
        }
        let inside = |g: &[bool], a: &[bool]| {
            (0..a.len()).all(|i| (0..nt).all(|t| !g[i * nt + t] || (a[i] && self.s[t])))
        };
        if !inside(&self.g_xt, &self.p) || !inside(&self.g_yt, &self.q) || !inside(&self.g_zt, &self.r) {
            return Err(Error::Unsupported("graphs must lie inside the chosen subsets".into()));
        }
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let v = self.f[(x * ny + y) * nz + z];
                    if v.abs() > 1.0 {
                        return Err(Error::ValueOutOfRange(format!("{v}")));
                    }
                    if v != 0.0 && !(self.p[x] && self.q[y] && self.r[z]) {
                        return Err(Error::Unsupported("f must vanish outside P×Q×R".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn density(v: &[bool]) -> f64 {
        v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
    }

    /// g = G_XT − δ_XT on P×S, 0 elsewhere, where δ_XT is the density of G_XT in P×S.
    pub fn centered_xt(&self) -> Result<EdgeFunction<f64>> {
        let [nx, _, _, nt] = self.sizes;
        let ps = self.p.iter().filter(|&&b| b).count() * self.s.iter().filter(|&&b| b).count();
        let d = self.g_xt.iter().filter(|&&b| b).count() as f64 / ps as f64;
        let mut values = vec![0.0; nx * nt];
        for x in 0..nx {
            for t in 0..nt {
                if self.p[x] && self.s[t] {
                    values[x * nt + t] = f64::from(u8::from(self.g_xt[x * nt + t])) - d;
                }
            }
        }
        EdgeFunction::new(IndexSet::from_bits(3), vec![nx, nt], values)
    }

    /// E_{x,y,z,t} f(x,y,z) g(x,t) G(y,t) G(z,t).
    pub fn expectation(&self) -> Result<f64> {
        self.validate()?;
        let [nx, ny, nz, nt] = self.sizes;
        let g = self.centered_xt()?;
        let mut total = 0.0;
        for t in 0..nt {
            for x in 0..nx {
                let gx = *g.value(x * nt + t);
                if gx == 0.0 {
                    continue;
                }
                for y in 0..ny {
                    if !self.g_yt[y * nt + t] {
                        continue;
                    }
                    for z in 0..nz {
                        if self.g_zt[z * nt + t] {
                            total += self.f[(x * ny + y) * nz + z] * gx;
                        }
                    }
                }
            }
        }
        Ok(total / (nx * ny * nz * nt) as f64)
    }

    /// δ_X²δ_Y⁴δ_Z⁴δ_T²·Oct(g).
    pub fn bound(&self) -> Result<f64> {
        self.validate()?;
        let (dx, dy, dz, dt) = (
            Self::density(&self.p),
            Self::density(&self.q),
            Self::density(&self.r),
            Self::density(&self.s),
        );
        let o = oct(&self.centered_xt()?, OctStrategy::Contraction)?;
        Ok(dx.powi(2) * dy.powi(4) * dz.powi(4) * dt.powi(2) * o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{down_closure, VertexPartition};

    fn tri_template() -> Chain {
        let p = VertexPartition::uniform(3, 1).unwrap();
        let es: Vec<Edge> = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(a, b)| Edge::new(vec![(a, 0), (b, 0)]).unwrap())
            .collect();
        down_closure(&es, &p, 2).unwrap()
    }

    #[test]
    fn single_vertex_template() {
        let host_p = VertexPartition::new(vec![5, 4]).unwrap();
        let host = down_closure(
            &[Edge::new(vec![(0, 1)]).unwrap(), Edge::new(vec![(0, 3)]).unwrap()],
            &host_p,
            2,
        )
        .unwrap();
        let tp = VertexPartition::new(vec![1, 1]).unwrap();
        let t = down_closure(&[Edge::new(vec![(0, 0)]).unwrap()], &tp, 1).unwrap();
        let c = count_homomorphisms(&t, &host).unwrap();
        assert_eq!(c.exact_count, 2 * 4);
        assert_eq!(c.total_maps, 20);
    }

    #[test]
    fn edgeless_template() {
        let host = Chain::complete(VertexPartition::new(vec![3, 4]).unwrap(), 2);
        let t = Chain::empty(VertexPartition::new(vec![2, 1]).unwrap(), 1);
        let c = count_homomorphisms(&t, &host).unwrap();
        assert_eq!(c.exact_count, 9 * 4);
        assert_eq!(c.probability, BigRational::one());
    }

    #[test]
    fn complete_host_counting() {
        let host = Chain::complete(VertexPartition::uniform(3, 4).unwrap(), 2);
        let v = counting_lemma_check(&tri_template(), &host, 0.01).unwrap();
        assert!(v.pass);
        assert_eq!(v.margin, 0.0);
        let (p, se) = hom_probability_sample(&tri_template(), &host, 100, 1).unwrap();
        assert_eq!((p, se), (1.0, 0.0));
    }

    #[test]
    fn misaligned_parts() {
        let host = Chain::complete(VertexPartition::uniform(2, 4).unwrap(), 2);
        assert!(matches!(count_homomorphisms(&tri_template(), &host), Err(Error::PartMismatch(_))));
    }

    #[test]
    fn enumeration_matches_count() {
        let p = VertexPartition::uniform(3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let host = crate::chain::random_levelwise(&p, 2, &[1.0, 0.6], &mut rng);
        let mut n = 0u128;
        enumerate_homomorphisms(&tri_template(), &host, |_| n += 1).unwrap();
        assert_eq!(n, count_homomorphisms(&tri_template(), &host).unwrap().exact_count);
    }

    #[test]
    fn zero_weight_gives_zero() {
        let p = VertexPartition::uniform(3, 3).unwrap();
        let host = Chain::complete(p.clone(), 2);
        let t = tri_template();
        let e = Edge::new(vec![(0, 0), (1, 0)]).unwrap();
        let sub = down_closure(&[e.clone()], t.partition(), 2).unwrap();
        let mut g = BTreeMap::new();
        g.insert(e, EdgeFunction::zeros(&p, IndexSet::from_bits(3)).unwrap());
        assert_eq!(weighted_hom_expectation(&t, &sub, &g, &host).unwrap(), 0.0);
    }
}
