//! Text and JSON formats for chains, grids and partition systems, plus report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::applications::GridSet;
use crate::chain::{down_closure, Chain, Edge, IndexSet, VertexPartition};
use crate::error::{Error, Result};
use crate::regularity::{CellLabels, PartitionSystem, RegularizeTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    Chain,
    Grid,
    PartitionSystem,
}

#[derive(Clone, Debug)]
pub enum Artifact {
    Chain(Chain),
    Grid(GridSet),
    PartitionSystem(PartitionSystem),
}

pub fn parse_artifact(path: &Path, kind: ArtifactKind) -> Result<Artifact> {
    let text = std::fs::read_to_string(path)?;
    Ok(match kind {
        ArtifactKind::Chain => Artifact::Chain(parse_chain(&text)?),
        ArtifactKind::Grid => Artifact::Grid(parse_grid(&text)?),
        ArtifactKind::PartitionSystem => Artifact::PartitionSystem(parse_partition_system(&text)?),
    })
}

pub fn read_chain(path: &Path) -> Result<Chain> {
    parse_chain(&std::fs::read_to_string(path)?)
}

pub fn read_grid(path: &Path) -> Result<GridSet> {
    parse_grid(&std::fs::read_to_string(path)?)
}

pub fn read_partition_system(path: &Path) -> Result<PartitionSystem> {
    parse_partition_system(&std::fs::read_to_string(path)?)
}

fn header_fields(line: &str, kind: &str, lineno: usize) -> Result<(BTreeMap<String, String>, BTreeSet<String>)> {
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some(kind) {
        return Err(Error::Parse { line: lineno, msg: format!("expected a `{kind}` header") });
    }
    let mut kv = BTreeMap::new();
    let mut flags = BTreeSet::new();
    for t in tokens {
        match t.split_once('=') {
            Some((k, v)) => {
                kv.insert(k.to_string(), v.to_string());
            }
            None => {
                flags.insert(t.to_string());
            }
        }
    }
    Ok((kv, flags))
}

fn field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, line: usize) -> Result<T> {
    kv.get(key)
        .ok_or_else(|| Error::Parse { line, msg: format!("header lacks `{key}=`") })?
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("bad value for `{key}`") })
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

#[derive(Serialize, Deserialize)]
struct ChainJson {
    kind: ArtifactKind,
    parts: Vec<usize>,
    k: usize,
    #[serde(default)]
    closed: bool,
    edges: Vec<Edge>,
}

/// Text: `chain parts=3,3,3 k=2 [closed]`, then one edge per line as `part:vertex` tokens
/// (parts 1-based, vertices 0-based). JSON input is recognized by a leading `{`.
pub fn parse_chain(text: &str) -> Result<Chain> {
    if text.trim_start().starts_with('{') {
        let f: ChainJson = serde_json::from_str(text)?;
        if f.kind != ArtifactKind::Chain {
            return Err(Error::Parse { line: 1, msg: "kind is not `chain`".into() });
        }
        return build_chain(VertexPartition::new(f.parts)?, f.k, f.closed, f.edges.into_iter().map(|e| (0, e)).collect());
    }
    let mut lines = content_lines(text);
    let (lineno, head) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    let (kv, flags) = header_fields(head, "chain", lineno)?;
    let parts: Vec<usize> = kv
        .get("parts")
        .ok_or(Error::Parse { line: lineno, msg: "header lacks `parts=`".into() })?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Parse { line: lineno, msg: format!("bad part size `{s}`") }))
        .collect::<Result<_>>()?;
    let k: usize = field(&kv, "k", lineno)?;
    let closed = flags.contains("closed");
    let mut edges = Vec::new();
    for (n, line) in lines {
        let mut vs = Vec::new();
        for tok in line.split_whitespace() {
            let (p, v) = tok.split_once(':').ok_or(Error::Parse { line: n, msg: format!("bad vertex `{tok}`") })?;
            let p: usize = p.parse().map_err(|_| Error::Parse { line: n, msg: format!("bad part in `{tok}`") })?;
            let v: usize = v.parse().map_err(|_| Error::Parse { line: n, msg: format!("bad vertex in `{tok}`") })?;
            if p == 0 {
                return Err(Error::Parse { line: n, msg: "parts are 1-based".into() });
            }
            vs.push((p - 1, v));
        }
        let e = Edge::new(vs).map_err(|e| Error::Parse { line: n, msg: e.to_string() })?;
        edges.push((n, e));
    }
    build_chain(VertexPartition::new(parts)?, k, closed, edges)
}

fn build_chain(partition: VertexPartition, k: usize, closed: bool, edges: Vec<(usize, Edge)>) -> Result<Chain> {
    let mut seen = BTreeSet::new();
    let mut unique = Vec::new();
    for (line, e) in edges {
        e.validate(&partition).map_err(|err| Error::Parse { line, msg: err.to_string() })?;
        if e.len() > k {
            return Err(Error::Parse { line, msg: format!("edge {e} exceeds k = {k}") });
        }
        if e.is_empty() {
            continue;
        }
        if !seen.insert(e.clone()) {
            log::warn!("duplicate edge {e} dropped");
            continue;
        }
        unique.push(e);
    }
    if closed {
        let mut codes: BTreeMap<IndexSet, Vec<usize>> = BTreeMap::new();
        for e in &unique {
            codes.entry(e.index()).or_default().push(e.code(&partition.tuples(e.index())));
        }
        Chain::from_codes(partition, k, codes)
    } else {
        down_closure(&unique, &partition, k)
    }
}

/// Canonical text form: every nonempty edge, sorted, under a `closed` header.
pub fn serialize_chain(chain: &Chain) -> String {
    let sizes: Vec<String> = chain.partition().sizes().iter().map(|s| s.to_string()).collect();
    let mut out = format!("chain parts={} k={} closed\n", sizes.join(","), chain.k());
    let mut edges = chain.edges();
    edges.retain(|e| !e.is_empty());
    edges.sort();
    for e in edges {
        let toks: Vec<String> = e.vertices().iter().map(|(p, v)| format!("{}:{}", p + 1, v)).collect();
        out.push_str(&toks.join(" "));
        out.push('\n');
    }
    out
}

pub fn chain_to_json(chain: &Chain) -> Result<String> {
    let mut edges = chain.edges();
    edges.retain(|e| !e.is_empty());
    edges.sort();
    let f = ChainJson {
        kind: ArtifactKind::Chain,
        parts: chain.partition().sizes().to_vec(),
        k: chain.k(),
        closed: true,
        edges,
    };
    Ok(serde_json::to_string_pretty(&f)? + "\n")
}

/// `grid dim=<d> n=<N>`, then one whitespace-separated coordinate row per point.
pub fn parse_grid(text: &str) -> Result<GridSet> {
    if text.trim_start().starts_with('{') {
        #[derive(Deserialize)]
        struct GridJson {
            dim: usize,
            n: i64,
            points: Vec<Vec<i64>>,
        }
        let g: GridJson = serde_json::from_str(text)?;
        return dedup_grid(g.dim, g.n, g.points.into_iter().map(|p| (0, p)).collect());
    }
    let mut lines = content_lines(text);
    let (lineno, head) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    let (kv, _) = header_fields(head, "grid", lineno)?;
    let dim: usize = field(&kv, "dim", lineno)?;
    let n: i64 = field(&kv, "n", lineno)?;
    let mut points = Vec::new();
    for (line, l) in lines {
        let p: Vec<i64> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse { line, msg: format!("bad coordinate `{t}`") }))
            .collect::<Result<_>>()?;
        if p.len() != dim {
            return Err(Error::Parse { line, msg: format!("expected {dim} coordinates, got {}", p.len()) });
        }
        if p.iter().any(|&c| c < 1 || c > n) {
            return Err(Error::Parse { line, msg: format!("coordinate outside [1, {n}]") });
        }
        points.push((line, p));
    }
    dedup_grid(dim, n, points)
}

fn dedup_grid(dim: usize, n: i64, points: Vec<(usize, Vec<i64>)>) -> Result<GridSet> {
    let mut seen = BTreeSet::new();
    let mut unique = Vec::new();
    for (_, p) in points {
        if seen.insert(p.clone()) {
            unique.push(p);
        } else {
            log::warn!("duplicate point {p:?} dropped");
        }
    }
    GridSet::new(dim, n, unique)
}

pub fn serialize_grid(grid: &GridSet) -> String {
    let mut out = format!("grid dim={} n={}\n", grid.dim(), grid.side());
    for p in grid.points() {
        let row: Vec<String> = p.iter().map(|c| c.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Serialize, Deserialize)]
struct CellsJson {
    index: IndexSet,
    count: u32,
    /// (label, run length) pairs over the row-major tuple order.
    runs: Vec<(u32, usize)>,
}

#[derive(Serialize, Deserialize)]
struct SystemJson {
    kind: ArtifactKind,
    parts: Vec<usize>,
    k: usize,
    cells: Vec<CellsJson>,
}

pub fn serialize_partition_system(sys: &PartitionSystem) -> Result<String> {
    let mut cells = Vec::new();
    for a in sys.indices() {
        let c = sys.cells(a);
        let mut runs: Vec<(u32, usize)> = Vec::new();
        for &l in &c.labels {
            match runs.last_mut() {
                Some((x, n)) if *x == l => *n += 1,
                _ => runs.push((l, 1)),
            }
        }
        cells.push(CellsJson { index: a, count: c.count, runs });
    }
    let f = SystemJson {
        kind: ArtifactKind::PartitionSystem,
        parts: sys.partition().sizes().to_vec(),
        k: sys.k(),
        cells,
    };
    Ok(serde_json::to_string_pretty(&f)? + "\n")
}

pub fn parse_partition_system(text: &str) -> Result<PartitionSystem> {
    let f: SystemJson = serde_json::from_str(text)?;
    if f.kind != ArtifactKind::PartitionSystem {
        return Err(Error::Parse { line: 1, msg: "kind is not `partition-system`".into() });
    }
    let mut labels = BTreeMap::new();
    for c in f.cells {
        let mut v = Vec::new();
        for (l, n) in c.runs {
            v.extend(std::iter::repeat(l).take(n));
        }
        labels.insert(c.index, CellLabels { count: c.count, labels: v });
    }
    PartitionSystem::from_labels(VertexPartition::new(f.parts)?, f.k, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// Pretty JSON with a trailing newline; field order follows the struct declarations.
pub fn emit_json<T: Serialize>(report: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(report)?;
    v.push(b'\n');
    Ok(v)
}

/// One row per iteration: iteration, total energy, failing fraction, refined index, level, gain, changed.
pub fn trace_csv(trace: &RegularizeTrace) -> String {
    let mut out = String::from("iteration,energy,failing_fraction,refined_index,level,gain,changed\n");
    for r in &trace.records {
        let index = r
            .refined_index
            .map(|a| a.parts().map(|p| (p + 1).to_string()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration,
            r.energy,
            r.failing_fraction,
            index,
            r.level.map(|l| l.to_string()).unwrap_or_default(),
            r.gain_f64.map(|g| g.to_string()).unwrap_or_default(),
            r.changed.map(|c| c.to_string()).unwrap_or_default(),
        );
    }
    out
}

/// Settings behind one CLI run; embedded in every emitted report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: String,
    pub inputs: Vec<String>,
    pub seed: u64,
    pub budget_maps: u128,
    pub budget_retries: usize,
    pub max_iters: usize,
    pub eta: Option<Vec<f64>>,
    pub epsilon: Option<f64>,
    pub format: Format,
    pub out: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget_maps == 0 || self.budget_retries == 0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument("budgets must be positive".into()));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::InvalidArgument(format!("epsilon {e} not in (0, 1)")));
            }
        }
        if let Some(eta) = &self.eta {
            if let Some(bad) = eta.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
                return Err(Error::InvalidArgument(format!("eta {bad} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// A report together with the configuration that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub config: ExperimentConfig,
    pub pass: bool,
    pub report: T,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_chain_round_trip() {
        let text = "chain parts=2,3 k=2 closed\n";
        let c = parse_chain(text).unwrap();
        assert_eq!(c.edge_count(), 0);
        assert_eq!(serialize_chain(&c), text);
    }

    #[test]
    fn closure_applied_without_flag() {
        let c = parse_chain("chain parts=2,2,2 k=3\n1:0 2:1 3:1\n").unwrap();
        assert_eq!(c.edge_count(), 7);
        let err = parse_chain("chain parts=2,2,2 k=3 closed\n1:0 2:1 3:1\n").unwrap_err();
        assert!(matches!(err, Error::NotDownClosed(_)));
    }

    #[test]
    fn duplicates_are_dropped() {
        let c = parse_chain("chain parts=2,2 k=2\n1:0 2:1\n2:1 1:0\n").unwrap();
        assert_eq!(c.edge_count(), 3);
        let g = parse_grid("grid dim=2 n=3\n1 2\n1 2\n").unwrap();
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse_chain("graph parts=2 k=1\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_chain("chain parts=2,2 k=2\n1:5\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_grid("grid dim=2 n=3\n1 4\n"), Err(Error::Parse { line: 2, .. })));
    }
}
