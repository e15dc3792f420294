//! Octahedral quasirandomness: Oct, deviation functions, threshold schedules and reports.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::chain::{Chain, IndexSet, VertexPartition};
use crate::error::{Error, Result};

/// Numbers Oct can be evaluated over.
pub trait Scalar:
    Clone
    + Send
    + Sync
    + Debug
    + PartialEq
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_rational(q: &BigRational) -> Self;
    fn from_count(n: usize) -> Self;
    fn abs_at_most_one(&self) -> bool;
    fn to_float(&self) -> f64;

    /// Oct by direct enumeration.
    fn naive_oct(sizes: &[usize], values: &[Self]) -> Self {
        oct_naive(sizes, values)
    }
}

impl Scalar for f64 {
    fn from_rational(q: &BigRational) -> Self {
        ToPrimitive::to_f64(q).unwrap_or(f64::NAN)
    }
    fn from_count(n: usize) -> Self {
        n as f64
    }
    fn abs_at_most_one(&self) -> bool {
        self.abs() <= 1.0
    }
    fn to_float(&self) -> f64 {
        *self
    }

    // the signed sum cancels badly when Oct is near 0, so enumerate in double-double
    fn naive_oct(sizes: &[usize], values: &[Self]) -> Self {
        let dd: Vec<DoubleDouble> = values.iter().map(|&v| DoubleDouble::new(v, 0.0)).collect();
        oct_naive(sizes, &dd).to_float()
    }
}

impl Scalar for BigRational {
    fn from_rational(q: &BigRational) -> Self {
        q.clone()
    }
    fn from_count(n: usize) -> Self {
        BigRational::from_integer(BigInt::from(n))
    }
    fn abs_at_most_one(&self) -> bool {
        self.abs() <= BigRational::one()
    }
    fn to_float(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

/// Unevaluated sum hi + lo of two f64s, about 106 bits of precision.
#[derive(Clone, Copy, Debug, PartialEq)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl DoubleDouble {
    fn new(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        DoubleDouble { hi: s, lo: lo - (s - hi) }
    }

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        DoubleDouble { hi: s, lo: (a - (s - bb)) + (b - bb) }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let s = Self::two_sum(self.hi, o.hi);
        let t = Self::two_sum(self.lo, o.lo);
        let u = Self::new(s.hi, s.lo + t.hi);
        Self::new(u.hi, u.lo + t.lo)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        DoubleDouble { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        Self::new(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self - o * DoubleDouble { hi: q1, lo: 0.0 };
        let q2 = r.hi / o.hi;
        let r = r - o * DoubleDouble { hi: q2, lo: 0.0 };
        let q3 = r.hi / o.hi;
        Self::new(q1, q2) + DoubleDouble { hi: q3, lo: 0.0 }
    }
}

impl Zero for DoubleDouble {
    fn zero() -> Self {
        DoubleDouble { hi: 0.0, lo: 0.0 }
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0 && self.lo == 0.0
    }
}

impl One for DoubleDouble {
    fn one() -> Self {
        DoubleDouble { hi: 1.0, lo: 0.0 }
    }
}

impl Scalar for DoubleDouble {
    fn from_rational(q: &BigRational) -> Self {
        let hi = ToPrimitive::to_f64(q).unwrap_or(f64::NAN);
        let lo = BigRational::from_float(hi).map_or(0.0, |h| ToPrimitive::to_f64(&(q - h)).unwrap_or(0.0));
        Self::new(hi, lo)
    }
    fn from_count(n: usize) -> Self {
        let hi = n as f64;
        DoubleDouble { hi, lo: (n as i128 - hi as i128) as f64 }
    }
    fn abs_at_most_one(&self) -> bool {
        self.hi.abs() < 1.0 || (self.hi.abs() == 1.0 && self.lo * self.hi <= 0.0)
    }
    fn to_float(&self) -> f64 {
        self.hi + self.lo
    }
}

/// Natural log of a rational in (0, ∞), robust to numerators and denominators beyond f64 range.
pub fn ln_rational(q: &BigRational) -> f64 {
    fn ln_int(n: &BigInt) -> f64 {
        let bits = n.bits();
        if bits < 1000 {
            n.to_f64().unwrap().ln()
        } else {
            let shift = bits - 64;
            let top: BigInt = n >> shift;
            top.to_f64().unwrap().ln() + shift as f64 * std::f64::consts::LN_2
        }
    }
    if q.is_zero() {
        return f64::NEG_INFINITY;
    }
    ln_int(q.numer()) - ln_int(q.denom())
}

/// A bounded function on the tuples of one index, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFunction<T = f64> {
    index: IndexSet,
    sizes: Vec<usize>,
    values: Vec<T>,
    supported_in_star: bool,
}

impl<T: Scalar> EdgeFunction<T> {
    pub fn new(index: IndexSet, sizes: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if index.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if sizes.len() != index.len() || sizes.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("index {index} needs {} positive sizes", index.len())));
        }
        let len: usize = sizes.iter().product();
        if values.len() != len {
            return Err(Error::Shape(format!("expected {len} values, got {}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.abs_at_most_one()) {
            return Err(Error::ValueOutOfRange(format!("{v:?}")));
        }
        Ok(EdgeFunction { index, sizes, values, supported_in_star: false })
    }

    pub fn on_partition(partition: &VertexPartition, index: IndexSet, values: Vec<T>) -> Result<Self> {
        partition.check_index(index)?;
        let sizes = index.parts().map(|p| partition.size(p)).collect();
        Self::new(index, sizes, values)
    }

    pub fn zeros(partition: &VertexPartition, index: IndexSet) -> Result<Self> {
        let len = partition.tuples(index).len();
        Self::on_partition(partition, index, vec![T::zero(); len])
    }

    pub fn index(&self) -> IndexSet {
        self.index
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn value(&self, code: usize) -> &T {
        &self.values[code]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn supported_in_star(&self) -> bool {
        self.supported_in_star
    }

    /// Checks that the function vanishes off the star of its index and records the fact.
    pub fn mark_supported_in_star(mut self, chain: &Chain) -> Result<Self> {
        let star = chain.star_codes(self.index)?;
        let mut inside = vec![false; self.len()];
        for c in star {
            inside[c] = true;
        }
        if let Some(c) = (0..self.len()).find(|&c| !inside[c] && !self.values[c].is_zero()) {
            return Err(Error::Unsupported(format!("nonzero at code {c} outside the star of {}", self.index)));
        }
        self.supported_in_star = true;
        Ok(self)
    }

    pub fn scaled(&self, c: &T) -> Result<Self> {
        let values = self.values.iter().map(|v| v.clone() * c.clone()).collect();
        let mut out = Self::new(self.index, self.sizes.clone(), values)?;
        out.supported_in_star = self.supported_in_star;
        Ok(out)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U) -> Result<EdgeFunction<U>> {
        let mut out = EdgeFunction::new(self.index, self.sizes.clone(), self.values.iter().map(f).collect())?;
        out.supported_in_star = self.supported_in_star;
        Ok(out)
    }

    pub fn to_f64(&self) -> EdgeFunction<f64> {
        EdgeFunction {
            index: self.index,
            sizes: self.sizes.clone(),
            values: self.values.iter().map(|v| v.to_float()).collect(),
            supported_in_star: self.supported_in_star,
        }
    }

    pub fn sum(&self) -> T {
        self.values.iter().fold(T::zero(), |a, v| a + v.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OctStrategy {
    /// Direct enumeration of all 2s-fold vertex choices.
    Naive,
    /// Coordinate doubling; materializes when the pair table fits the default budget, streams otherwise.
    Contraction,
    Materialized,
    Streaming,
}

/// Scalars the materialized contraction may allocate.
pub const DEFAULT_OCT_BUDGET: usize = 1 << 24;

/// Oct(f): the average over all pairs (x_i^0, x_i^1), i ∈ A, of the product of f over the 2^s corners.
pub fn oct<T: Scalar>(f: &EdgeFunction<T>, strategy: OctStrategy) -> Result<T> {
    oct_with_budget(f, strategy, DEFAULT_OCT_BUDGET)
}

pub fn oct_with_budget<T: Scalar>(f: &EdgeFunction<T>, strategy: OctStrategy, budget: usize) -> Result<T> {
    if f.index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    match strategy {
        OctStrategy::Naive => Ok(T::naive_oct(&f.sizes, &f.values)),
        _ => {
            let (sizes, values) = support_box(&f.sizes, &f.values);
            if values.is_empty() {
                return Ok(T::zero());
            }
            let s = sizes.len();
            let table: usize = sizes[..s - 1].iter().map(|n| n * n).product::<usize>() * sizes[s - 1];
            let materialize = match strategy {
                OctStrategy::Materialized => true,
                OctStrategy::Streaming => false,
                _ => table <= budget,
            };
            let raw = if materialize {
                contract_materialized(&sizes, values)
            } else {
                contract_streaming(&sizes, &values)
            };
            // normalize by the full space: (box pairs)/(full pairs) times the box average
            let mut norm = T::one();
            for &n in &f.sizes {
                norm = norm * T::from_count(n) * T::from_count(n);
            }
            Ok(raw / norm)
        }
    }
}

/// Restricts to the product of the coordinate projections of the support.
fn support_box<T: Scalar>(sizes: &[usize], values: &[T]) -> (Vec<usize>, Vec<T>) {
    let s = sizes.len();
    let mut strides = vec![1usize; s];
    for i in (0..s.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * sizes[i + 1];
    }
    let mut used: Vec<Vec<bool>> = sizes.iter().map(|&n| vec![false; n]).collect();
    let mut any = false;
    for (c, v) in values.iter().enumerate() {
        if !v.is_zero() {
            any = true;
            for i in 0..s {
                used[i][c / strides[i] % sizes[i]] = true;
            }
        }
    }
    if !any {
        return (sizes.to_vec(), Vec::new());
    }
    let keep: Vec<Vec<usize>> = used
        .iter()
        .map(|u| u.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
        .collect();
    let box_sizes: Vec<usize> = keep.iter().map(|k| k.len()).collect();
    if box_sizes == sizes {
        return (box_sizes, values.to_vec());
    }
    let len: usize = box_sizes.iter().product();
    let mut out = Vec::with_capacity(len);
    let mut digits = vec![0usize; s];
    for _ in 0..len {
        let code: usize = (0..s).map(|i| keep[i][digits[i]] * strides[i]).sum();
        out.push(values[code].clone());
        for i in (0..s).rev() {
            digits[i] += 1;
            if digits[i] < box_sizes[i] {
                break;
            }
            digits[i] = 0;
        }
    }
    (box_sizes, out)
}

fn oct_naive<T: Scalar>(sizes: &[usize], values: &[T]) -> T {
    let s = sizes.len();
    let mut strides = vec![1usize; s];
    for i in (0..s - 1).rev() {
        strides[i] = strides[i + 1] * sizes[i + 1];
    }
    // digits[2i], digits[2i+1] are x_i^0, x_i^1
    let mut digits = vec![0usize; 2 * s];
    let total_choices: usize = sizes.iter().map(|n| n * n).product();
    let mut total = T::zero();
    for _ in 0..total_choices {
        let mut prod = T::one();
        for eps in 0..(1usize << s) {
            let code: usize = (0..s).map(|i| digits[2 * i + (eps >> i & 1)] * strides[i]).sum();
            prod = prod * values[code].clone();
            if prod.is_zero() {
                break;
            }
        }
        total = total + prod;
        for d in (0..2 * s).rev() {
            digits[d] += 1;
            if digits[d] < sizes[d / 2] {
                break;
            }
            digits[d] = 0;
        }
    }
    let mut norm = T::one();
    for &n in sizes {
        norm = norm * T::from_count(n) * T::from_count(n);
    }
    total / norm
}

const SUM_CHUNK: usize = 1 << 12;

/// Partials come in chunk order, so folding left to right gives the same result for any thread count.
fn ordered_sum<T: Scalar>(parts: Vec<T>) -> T {
    parts.into_iter().fold(T::zero(), |a, b| a + b)
}

/// Unnormalized Oct via the fully materialized pair table.
fn contract_materialized<T: Scalar>(sizes: &[usize], values: Vec<T>) -> T {
    let s = sizes.len();
    let mut g = values;
    let mut pairs = 1usize;
    for i in 0..s - 1 {
        let n = sizes[i];
        let rest: usize = sizes[i + 1..].iter().product();
        let prev = &g;
        let next: Vec<T> = (0..pairs * n * n)
            .into_par_iter()
            .flat_map_iter(|pab| {
                let p = pab / (n * n);
                let a = pab / n % n;
                let b = pab % n;
                let ra = (p * n + a) * rest;
                let rb = (p * n + b) * rest;
                (0..rest).map(move |x| prev[ra + x].clone() * prev[rb + x].clone())
            })
            .collect();
        g = next;
        pairs *= n * n;
    }
    let last = sizes[s - 1];
    let partial: Vec<T> = g
        .par_chunks(SUM_CHUNK * last)
        .map(|chunk| {
            chunk.chunks(last).fold(T::zero(), |acc, row| {
                let t = row.iter().fold(T::zero(), |a, v| a + v.clone());
                acc + t.clone() * t
            })
        })
        .collect();
    ordered_sum(partial)
}

/// Unnormalized Oct without materializing the pair table; outer pairs run in parallel.
fn contract_streaming<T: Scalar>(sizes: &[usize], values: &[T]) -> T {
    if sizes.len() == 1 {
        let t = values.iter().fold(T::zero(), |a, v| a + v.clone());
        return t.clone() * t;
    }
    let n = sizes[0];
    let rest = values.len() / n;
    let outer: Vec<T> = (0..n)
        .into_par_iter()
        .map(|a| {
            let mut acc = T::zero();
            let mut buf = vec![T::zero(); rest];
            for b in a..n {
                for x in 0..rest {
                    buf[x] = values[a * rest + x].clone() * values[b * rest + x].clone();
                }
                let v = stream_rec(&sizes[1..], &buf);
                acc = if a == b { acc + v } else { acc + v.clone() + v };
            }
            acc
        })
        .collect();
    ordered_sum(outer)
}

fn stream_rec<T: Scalar>(sizes: &[usize], h: &[T]) -> T {
    if sizes.len() == 1 {
        let t = h.iter().fold(T::zero(), |a, v| a + v.clone());
        return t.clone() * t;
    }
    if h.iter().all(|v| v.is_zero()) {
        return T::zero();
    }
    let n = sizes[0];
    let rest = h.len() / n;
    let mut acc = T::zero();
    let mut buf = vec![T::zero(); rest];
    for a in 0..n {
        for b in a..n {
            for x in 0..rest {
                buf[x] = h[a * rest + x].clone() * h[b * rest + x].clone();
            }
            let v = stream_rec(&sizes[1..], &buf);
            acc = if a == b { acc + v } else { acc + v.clone() + v };
        }
    }
    acc
}

/// f^A: 1 − δ_A on H(A), −δ_A on H_*(A) ∖ H(A), 0 elsewhere.
pub fn deviation_function<T: Scalar>(chain: &Chain, index: IndexSet) -> Result<EdgeFunction<T>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let delta = chain.relative_density(index)?;
    let len = chain.partition().tuples(index).len();
    let mut values = vec![T::zero(); len];
    let low = T::from_rational(&-delta.clone());
    let high = T::from_rational(&(BigRational::one() - delta));
    for c in chain.star_codes(index)? {
        values[c] = low.clone();
    }
    for c in chain.slice_codes(index) {
        values[c] = high.clone();
    }
    let mut f = EdgeFunction::on_partition(chain.partition(), index, values)?;
    f.supported_in_star = true;
    Ok(f)
}

/// Indicator of H_*(A).
pub fn star_indicator<T: Scalar>(chain: &Chain, index: IndexSet) -> Result<EdgeFunction<T>> {
    let len = chain.partition().tuples(index).len();
    let mut values = vec![T::zero(); len];
    for c in chain.star_codes(index)? {
        values[c] = T::one();
    }
    let mut f = EdgeFunction::on_partition(chain.partition(), index, values)?;
    f.supported_in_star = true;
    Ok(f)
}

/// A nonnegative number carried by its natural log; zero is `-inf`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LogValue(pub f64);

impl LogValue {
    pub const ZERO: LogValue = LogValue(f64::NEG_INFINITY);

    pub fn from_value(v: f64) -> Self {
        if v <= 0.0 {
            LogValue::ZERO
        } else {
            LogValue(v.ln())
        }
    }

    pub fn ln(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }

    pub fn value(self) -> f64 {
        self.0.exp()
    }

    /// (m, e) with value = m·2^e, m in [0.5, 1) and e integral; zero is (0, 0).
    /// The exponent is a float because it can exceed every machine integer.
    pub fn mantissa_exp2(self) -> (f64, f64) {
        if self.is_zero() {
            return (0.0, 0.0);
        }
        let l2 = self.0 / std::f64::consts::LN_2;
        let e = l2.floor() + 1.0;
        let m = ((l2 - e) * std::f64::consts::LN_2).exp();
        (m, e)
    }

    pub fn from_mantissa_exp2(m: f64, e: f64) -> Self {
        if m == 0.0 {
            LogValue::ZERO
        } else {
            LogValue(m.ln() + e * std::f64::consts::LN_2)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MantissaExp {
    mantissa: f64,
    exp2: f64,
}

impl Serialize for LogValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (mantissa, exp2) = self.mantissa_exp2();
        MantissaExp { mantissa, exp2 }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LogValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = MantissaExp::deserialize(d)?;
        Ok(LogValue::from_mantissa_exp2(m.mantissa, m.exp2))
    }
}

/// Neumaier-compensated summation.
#[derive(Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleLevel {
    pub level: usize,
    pub epsilon: LogValue,
    pub eta: LogValue,
}

/// The ε_j and η_j sequences, stored as natural logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub k: usize,
    pub epsilon: f64,
    pub template_size: usize,
    /// One entry per template edge: its index and the density used for it.
    pub densities: Vec<(IndexSet, f64)>,
    /// Levels k down to 1.
    pub levels: Vec<ScheduleLevel>,
}

impl ThresholdSchedule {
    fn level(&self, level: usize) -> &ScheduleLevel {
        &self.levels[self.k - level]
    }

    pub fn log_epsilon(&self, level: usize) -> f64 {
        self.level(level).epsilon.ln()
    }

    pub fn log_eta(&self, level: usize) -> f64 {
        self.level(level).eta.ln()
    }
}

/// ε_k = ε; ε_{k−j} = 2^{−jk−1}|J|^{−1}(ε_{k−j+1}∏_{|A|≥k−j+1}δ_A)^{2^{jk}};
/// η_{k−j} = ½(ε_{k−j}∏_{|A|≥k−j}δ_A)^{2^{k(j+1)}}, products over template edges.
pub fn threshold_schedule(
    epsilon: f64,
    template_size: usize,
    densities: &[(IndexSet, f64)],
    k: usize,
) -> Result<ThresholdSchedule> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} not in (0,1]")));
    }
    if k == 0 || k > 6 {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..=6")));
    }
    if template_size == 0 {
        return Err(Error::InvalidArgument("template size must be positive".into()));
    }
    let mut logs = Vec::with_capacity(densities.len());
    for &(a, d) in densities {
        if d.is_nan() || d <= 0.0 {
            return Err(Error::ZeroDensity(a));
        }
        if d > 1.0 {
            return Err(Error::InvalidArgument(format!("density {d} above 1 at {a}")));
        }
        logs.push((a.len(), d.ln()));
    }
    schedule_from_logs(epsilon.ln(), template_size, &logs, k).map(|levels| ThresholdSchedule {
        k,
        epsilon,
        template_size,
        densities: densities.to_vec(),
        levels,
    })
}

fn schedule_from_logs(
    log_eps: f64,
    template_size: usize,
    log_densities: &[(usize, f64)],
    k: usize,
) -> Result<Vec<ScheduleLevel>> {
    let ln2 = std::f64::consts::LN_2;
    let ln_j = (template_size as f64).ln();
    let sum_from = |level: usize| {
        let mut acc = Neumaier::default();
        for &(size, l) in log_densities {
            if size >= level {
                acc.add(l);
            }
        }
        acc.total()
    };
    let mut levels = Vec::with_capacity(k);
    let mut prev_eps = log_eps;
    for j in 0..k {
        let level = k - j;
        let le = if j == 0 {
            log_eps
        } else {
            let mut acc = Neumaier::default();
            acc.add(-((j * k + 1) as f64) * ln2);
            acc.add(-ln_j);
            let mut inner = Neumaier::default();
            inner.add(prev_eps);
            inner.add(sum_from(level + 1));
            acc.add(2f64.powi((j * k) as i32) * inner.total());
            acc.total()
        };
        let mut inner = Neumaier::default();
        inner.add(le);
        inner.add(sum_from(level));
        let mut eta = Neumaier::default();
        eta.add(-ln2);
        eta.add(2f64.powi((k * (j + 1)) as i32) * inner.total());
        let eta = eta.total();
        if !le.is_finite() || !eta.is_finite() {
            return Err(Error::InvalidArgument("schedule overflowed".into()));
        }
        levels.push(ScheduleLevel { level, epsilon: LogValue(le), eta: LogValue(eta) });
        prev_eps = le;
    }
    Ok(levels)
}

/// Oct and η* at one index, independent of ε.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexMeasurement {
    pub index: IndexSet,
    /// Exact δ_A as "p/q", absent when the star is empty.
    pub delta: Option<String>,
    pub delta_f64: Option<f64>,
    pub oct: f64,
    /// Oct of the star indicator, reported without a verdict.
    pub oct_star: f64,
    /// ∏_{C⊆A} δ_C^{2^{|C|}}.
    pub reference: LogValue,
    pub eta_star: LogValue,
    pub degenerate: bool,
}

/// Everything a report needs apart from ε and k.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Measurement {
    pub indices: Vec<IndexMeasurement>,
    /// One entry per nonempty template edge: its index and ln δ (None when undefined or zero).
    pub template_log_densities: Vec<(IndexSet, Option<f64>)>,
    /// Edge count of the template including the empty edge.
    pub template_size: usize,
}

pub fn measure(chain: &Chain, template: &Chain) -> Result<Measurement> {
    check_template(chain, template)?;
    let mut log_delta = std::collections::BTreeMap::new();
    let mut density_of = |a: IndexSet| -> Result<Option<BigRational>> {
        if let Some(v) = log_delta.get(&a) {
            return Ok(Clone::clone(v));
        }
        let d = match chain.relative_density(a) {
            Ok(d) => Some(d),
            Err(Error::EmptyStar(_)) => None,
            Err(e) => return Err(e),
        };
        log_delta.insert(a, d.clone());
        Ok(d)
    };
    let mut indices = Vec::new();
    for a in template.indices() {
        let delta = density_of(a)?;
        let mut reference = Neumaier::default();
        let mut degenerate = false;
        for c in a.nonempty_subsets() {
            match density_of(c)? {
                Some(d) if !d.is_zero() => reference.add((1u64 << c.len()) as f64 * ln_rational(&d)),
                _ => degenerate = true,
            }
        }
        let (oct_v, oct_star) = match &delta {
            Some(_) => {
                let f = deviation_function::<f64>(chain, a)?;
                let star = star_indicator::<f64>(chain, a)?;
                (
                    oct(&f, OctStrategy::Contraction)?.max(0.0),
                    oct(&star, OctStrategy::Contraction)?.max(0.0),
                )
            }
            None => (0.0, 0.0),
        };
        let reference = if degenerate { LogValue::ZERO } else { LogValue(reference.total()) };
        let eta_star = if degenerate || oct_v <= 0.0 {
            LogValue::ZERO
        } else {
            LogValue(oct_v.ln() - reference.ln())
        };
        indices.push(IndexMeasurement {
            index: a,
            delta: delta.as_ref().map(|d| d.to_string()),
            delta_f64: delta.as_ref().map(Scalar::to_float),
            oct: oct_v,
            oct_star,
            reference,
            eta_star,
            degenerate,
        });
    }
    let mut template_log_densities = Vec::new();
    for e in template.edges() {
        let a = e.index();
        let l = density_of(a)?.filter(|d| !d.is_zero()).map(|d| ln_rational(&d));
        template_log_densities.push((a, l));
    }
    Ok(Measurement { indices, template_log_densities, template_size: template.edge_count() + 1 })
}

fn check_template(chain: &Chain, template: &Chain) -> Result<()> {
    if template.part_count() != chain.part_count() {
        return Err(Error::PartMismatch(format!(
            "template has {} parts, chain has {}",
            template.part_count(),
            chain.part_count()
        )));
    }
    if template.max_edge_size() > chain.k() {
        return Err(Error::EdgeTooLarge { size: template.max_edge_size(), k: chain.k() });
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexReport {
    #[serde(flatten)]
    pub measured: IndexMeasurement,
    pub threshold: Option<LogValue>,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuasirandomnessReport {
    pub epsilon: f64,
    pub k: usize,
    pub template_size: usize,
    pub schedule: Option<ThresholdSchedule>,
    pub indices: Vec<IndexReport>,
    pub verdict: bool,
}

pub fn quasirandomness_report(chain: &Chain, template: &Chain, epsilon: f64) -> Result<QuasirandomnessReport> {
    let m = measure(chain, template)?;
    report_at(&m, epsilon, chain.k())
}

/// Builds the verdict for a measurement at ε, with the schedule anchored at level k.
pub fn report_at(m: &Measurement, epsilon: f64, k: usize) -> Result<QuasirandomnessReport> {
    let schedule = if m.template_log_densities.iter().all(|(_, l)| l.is_some()) {
        let dens: Vec<(IndexSet, f64)> =
            m.template_log_densities.iter().map(|(a, l)| (*a, l.unwrap().exp())).collect();
        let logs: Vec<(usize, f64)> = m.template_log_densities.iter().map(|(a, l)| (a.len(), l.unwrap())).collect();
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} not in (0,1]")));
        }
        let levels = schedule_from_logs(epsilon.ln(), m.template_size, &logs, k)?;
        Some(ThresholdSchedule { k, epsilon, template_size: m.template_size, densities: dens, levels })
    } else {
        None
    };
    let mut indices = Vec::new();
    for im in &m.indices {
        let threshold = schedule.as_ref().and_then(|s| {
            (im.index.len() <= s.k).then(|| LogValue(s.log_eta(im.index.len())))
        });
        let pass = !im.degenerate && threshold.is_some_and(|t| im.eta_star.ln() <= t.ln());
        indices.push(IndexReport { measured: im.clone(), threshold, pass });
    }
    let verdict = indices.iter().all(|r| r.pass);
    Ok(QuasirandomnessReport { epsilon, k, template_size: m.template_size, schedule, indices, verdict })
}

/// Smallest ε in (0,1] at which the report passes: `Some(0.0)` if it passes at every ε, `None` if never.
pub fn measured_epsilon(m: &Measurement, k: usize) -> Result<Option<f64>> {
    if m.indices.iter().any(|i| i.degenerate) || m.template_log_densities.iter().any(|(_, l)| l.is_none()) {
        return Ok(None);
    }
    if m.indices.iter().all(|i| i.eta_star.is_zero()) {
        return Ok(Some(0.0));
    }
    let logs: Vec<(usize, f64)> = m.template_log_densities.iter().map(|(a, l)| (a.len(), l.unwrap())).collect();
    let passes = |log_eps: f64| -> Result<bool> {
        let levels = schedule_from_logs(log_eps, m.template_size, &logs, k)?;
        Ok(m.indices.iter().all(|im| {
            let lvl = &levels[k - im.index.len()];
            im.eta_star.ln() <= lvl.eta.ln()
        }))
    };
    if !passes(0.0)? {
        return Ok(None);
    }
    let mut hi = 0.0;
    let mut lo = -1.0;
    while passes(lo)? {
        hi = lo;
        lo *= 2.0;
        if lo < -1e300 {
            return Ok(Some(0.0));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if passes(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{down_closure, Edge};

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn constant_function() {
        let f = EdgeFunction::new(IndexSet::from_bits(3), vec![3, 3], vec![1.0; 9]).unwrap();
        assert_eq!(oct(&f, OctStrategy::Contraction).unwrap(), 1.0);
        let f = EdgeFunction::new(IndexSet::from_bits(3), vec![3, 2], vec![q(1, 2); 6]).unwrap();
        for s in [OctStrategy::Naive, OctStrategy::Materialized, OctStrategy::Streaming] {
            assert_eq!(oct(&f, s).unwrap(), q(1, 16));
        }
    }

    #[test]
    fn out_of_range_value() {
        assert!(EdgeFunction::new(IndexSet::singleton(0), vec![2], vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn deviation_of_complete_is_zero() {
        let p = VertexPartition::uniform(3, 3).unwrap();
        let c = Chain::complete(p, 2);
        let f = deviation_function::<BigRational>(&c, IndexSet::from_bits(3)).unwrap();
        assert!(f.values().iter().all(Zero::is_zero));
    }

    #[test]
    fn deviation_with_empty_slice() {
        let p = VertexPartition::uniform(2, 2).unwrap();
        let c = down_closure(&[Edge::new(vec![(0, 0)]).unwrap(), Edge::new(vec![(1, 0)]).unwrap()], &p, 2).unwrap();
        let f = deviation_function::<BigRational>(&c, IndexSet::from_bits(3)).unwrap();
        assert!(f.values().iter().all(Zero::is_zero));
    }

    #[test]
    fn unit_density_schedule() {
        let k = 3;
        let m = 9;
        let eps: f64 = 0.3;
        let s = threshold_schedule(eps, m, &[(IndexSet::singleton(0), 1.0)], k).unwrap();
        assert_eq!(s.log_epsilon(k), eps.ln());
        let want = -((k + 1) as f64) * std::f64::consts::LN_2 - (m as f64).ln() + 2f64.powi(k as i32) * eps.ln();
        assert!((s.log_epsilon(k - 1) - want).abs() < 1e-12 * want.abs());
    }

    #[test]
    fn schedule_rejects_zero_density() {
        assert!(matches!(
            threshold_schedule(0.5, 3, &[(IndexSet::singleton(0), 0.0)], 2),
            Err(Error::ZeroDensity(_))
        ));
    }

    #[test]
    fn log_value_round_trip() {
        for v in [LogValue::ZERO, LogValue(-1e30), LogValue(0.0), LogValue(-3.25)] {
            let s = serde_json::to_string(&v).unwrap();
            let back: LogValue = serde_json::from_str(&s).unwrap();
            if v.is_zero() {
                assert!(back.is_zero());
            } else {
                assert!((back.ln() - v.ln()).abs() <= 1e-12 * v.ln().abs().max(1.0));
            }
        }
    }

    #[test]
    fn ln_rational_large() {
        let big = BigRational::new(BigInt::one() << 3000u32, BigInt::from(3));
        let want = 3000.0 * std::f64::consts::LN_2 - 3f64.ln();
        assert!((ln_rational(&big) - want).abs() < 1e-9);
    }
}
