//! Concept graphs, knowledge-graph cropping, and Random Walk with Restart.
//!
//! A [`ConceptGraph`] is undirected and weighted. Walks use the column-stochastic
//! transition built from edge weights; a node without edges sends all of its
//! mass back to the restart node. Steady states are computed by power iteration.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{ConsistencyMatrix, SourceTag};
use crate::error::{Error, Result};
use crate::model::LabelVocabulary;

/// Relations kept by default when cropping a ConceptNet-style dump.
pub const DEFAULT_POSITIVE_RELATIONS: &str = include_str!("../config/positive_relations.txt");

/// Parses a relation list: one name per line, `#` starts a comment.
pub fn parse_relation_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| normalize_relation(l).to_owned())
        .collect()
}

pub fn default_positive_relations() -> BTreeSet<String> {
    parse_relation_list(DEFAULT_POSITIVE_RELATIONS)
}

fn normalize_relation(rel: &str) -> &str {
    let rel = rel.trim_end_matches('/');
    rel.strip_prefix("/r/").unwrap_or(rel)
}

/// Truncates a ConceptNet concept URI to `/c/<lang>/<term>`, dropping
/// part-of-speech and sense suffixes.
pub fn normalize_concept(uri: &str) -> &str {
    if !uri.starts_with("/c/") {
        return uri;
    }
    match uri.match_indices('/').nth(3) {
        Some((i, _)) => &uri[..i],
        None => uri,
    }
}

/// Weighted undirected graph over concept identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGraph {
    nodes: Vec<String>,
    edges: Vec<(usize, usize, f64)>,
    index: HashMap<String, usize>,
    // adjacency: (neighbor, weight), per node
    adjacency: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
}

impl ConceptGraph {
    pub fn new(nodes: Vec<String>, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = nodes.len();
        let mut index = HashMap::with_capacity(n);
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate graph node `{node}`")));
            }
        }
        let mut seen = BTreeSet::new();
        let mut adjacency = vec![Vec::new(); n];
        let mut degree = vec![0.0; n];
        for &(a, b, w) in &edges {
            if a >= n || b >= n {
                return Err(Error::Validation(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("self-loop on node {a}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Validation(format!(
                    "edge ({a}, {b}) has non-positive weight {w}"
                )));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Validation(format!("duplicate edge ({a}, {b})")));
            }
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
            degree[a] += w;
            degree[b] += w;
        }
        Ok(Self {
            nodes,
            edges,
            index,
            adjacency,
            degree,
        })
    }

    /// Builds a graph from arbitrary weighted pairs: parallel edges are summed,
    /// direction is discarded, self-loops and non-positive weights are dropped.
    pub fn from_weighted_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str, f64)>,
    ) -> Self {
        let mut nodes: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut intern = |name: &str, nodes: &mut Vec<String>| -> usize {
            if let Some(&i) = index.get(name) {
                return i;
            }
            nodes.push(name.to_owned());
            index.insert(name.to_owned(), nodes.len() - 1);
            nodes.len() - 1
        };
        for (a, b, w) in pairs {
            if a == b || !(w > 0.0 && w.is_finite()) {
                continue;
            }
            let ia = intern(a, &mut nodes);
            let ib = intern(b, &mut nodes);
            *weights.entry((ia.min(ib), ia.max(ib))).or_insert(0.0) += w;
        }
        let edges = weights.into_iter().map(|((a, b), w)| (a, b, w)).collect();
        Self::new(nodes, edges).expect("collapsed edges satisfy graph invariants")
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn node_index(&self, concept: &str) -> Option<usize> {
        self.index.get(concept).copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].iter().any(|&(n, _)| n == b)
    }

    /// Writes `a<TAB>RelatedTo<TAB>b<TAB>weight` lines. Relation types are
    /// collapsed during cropping, so every line carries `RelatedTo`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for &(a, b, weight) in &self.edges {
            writeln!(
                w,
                "{}\tRelatedTo\t{}\t{}",
                self.nodes[a], self.nodes[b], weight
            )?;
        }
        Ok(())
    }
}

/// One assertion from an external knowledge graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEdge {
    pub start: String,
    pub relation: String,
    pub end: String,
    pub weight: f64,
}

impl RawEdge {
    pub fn new(start: &str, relation: &str, end: &str, weight: f64) -> Self {
        Self {
            start: start.into(),
            relation: relation.into(),
            end: end.into(),
            weight,
        }
    }
}

fn has_language(concept: &str, tag: &str) -> bool {
    concept
        .strip_prefix("/c/")
        .and_then(|rest| rest.strip_prefix(tag))
        .is_some_and(|rest| rest.is_empty() || rest.starts_with('/'))
}

/// Keeps edges whose relation is in `positive_relations` and, when
/// `language_tag` is given, whose endpoints are both `/c/<tag>/…` concepts.
pub fn crop_graph(
    raw_edges: impl IntoIterator<Item = RawEdge>,
    language_tag: Option<&str>,
    positive_relations: &BTreeSet<String>,
) -> ConceptGraph {
    let kept: Vec<RawEdge> = raw_edges
        .into_iter()
        .filter(|e| positive_relations.contains(normalize_relation(&e.relation)))
        .filter(|e| {
            language_tag.is_none_or(|tag| has_language(&e.start, tag) && has_language(&e.end, tag))
        })
        .collect();
    let graph = ConceptGraph::from_weighted_pairs(
        kept.iter()
            .map(|e| (e.start.as_str(), e.end.as_str(), e.weight)),
    );
    if graph.node_count() == 0 {
        log::warn!("cropped graph is empty: no edge passed the relation/language filter");
    }
    graph
}

/// Reads the simple TSV edge list `concept_a<TAB>relation<TAB>concept_b<TAB>weight`.
/// Blank lines and `#` comments are skipped; a missing weight means 1.
pub fn read_tsv_edges<R: BufRead>(reader: R) -> Result<Vec<RawEdge>> {
    let mut edges = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<tsv>", e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 || cols.len() > 4 {
            return Err(Error::Validation(format!(
                "tsv line {}: expected 3 or 4 tab-separated columns, found {}",
                lineno + 1,
                cols.len()
            )));
        }
        let weight = match cols.get(3) {
            Some(w) => w.trim().parse::<f64>().map_err(|e| {
                Error::Validation(format!("tsv line {}: bad weight `{w}`: {e}", lineno + 1))
            })?,
            None => 1.0,
        };
        edges.push(RawEdge::new(cols[0], cols[1], cols[2], weight));
    }
    Ok(edges)
}

#[derive(Deserialize)]
struct AssertionMeta {
    #[serde(default = "one")]
    weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Parses one line of a ConceptNet 5 assertions CSV dump
/// (`assertion<TAB>relation<TAB>start<TAB>end<TAB>{json}`).
pub fn parse_conceptnet_line(line: &str) -> Result<RawEdge> {
    let cols: Vec<&str> = line.splitn(5, '\t').collect();
    if cols.len() != 5 {
        return Err(Error::Validation(format!(
            "expected 5 tab-separated columns, found {}",
            cols.len()
        )));
    }
    let meta: AssertionMeta = serde_json::from_str(cols[4])?;
    Ok(RawEdge::new(
        normalize_concept(cols[2]),
        normalize_relation(cols[1]),
        normalize_concept(cols[3]),
        meta.weight,
    ))
}

/// Streams a ConceptNet dump through [`crop_graph`] without holding the whole
/// dump in memory.
pub fn crop_conceptnet<R: BufRead>(
    reader: R,
    language_tag: Option<&str>,
    positive_relations: &BTreeSet<String>,
) -> Result<ConceptGraph> {
    let mut kept = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<conceptnet>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        // cheap prefilter on the relation column before parsing the JSON
        let relation = line.split('\t').nth(1).map(normalize_relation);
        if !relation.is_some_and(|r| positive_relations.contains(r)) {
            continue;
        }
        let edge = parse_conceptnet_line(&line)
            .map_err(|e| Error::Validation(format!("conceptnet line {}: {e}", lineno + 1)))?;
        kept.push(edge);
    }
    Ok(crop_graph(kept, language_tag, positive_relations))
}

/// Restart probability and stopping rule for RWR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RwrConfig {
    pub restart_prob: f64,
    /// L1 threshold on the fixed-point residual.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RwrConfig {
    fn default() -> Self {
        Self {
            restart_prob: 0.15,
            tolerance: 1e-9,
            max_iterations: 10_000,
        }
    }
}

impl RwrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.restart_prob > 0.0 && self.restart_prob < 1.0) {
            return Err(Error::Config(format!(
                "restart probability must lie in (0, 1), got {}",
                self.restart_prob
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "RWR tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config(
                "RWR max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One application of `r ↦ c·e_s + (1−c)·W·r`.
fn rwr_step(graph: &ConceptGraph, start: usize, c: f64, r: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let walk = 1.0 - c;
    let mut to_start = c;
    for (j, &mass) in r.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let deg = graph.degree[j];
        if deg == 0.0 {
            to_start += walk * mass;
            continue;
        }
        let share = walk * mass / deg;
        for &(i, w) in &graph.adjacency[j] {
            out[i] += share * w;
        }
    }
    out[start] += to_start;
}

/// Steady-state visit probabilities of a walk restarting at `start`.
pub fn rwr_steady_state(graph: &ConceptGraph, start: usize, cfg: &RwrConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = graph.node_count();
    if start >= n {
        return Err(Error::Validation(format!(
            "start node {start} out of range for a graph of {n} nodes"
        )));
    }
    let mut r = vec![0.0; n];
    r[start] = 1.0;
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        rwr_step(graph, start, cfg.restart_prob, &r, &mut next);
        residual = r.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut r, &mut next);
        if residual <= cfg.tolerance {
            return Ok(r);
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iterations,
        residual,
    })
}

/// L1 norm of `r − (c·e_s + (1−c)·W·r)`.
pub fn rwr_residual(graph: &ConceptGraph, start: usize, restart_prob: f64, r: &[f64]) -> f64 {
    let mut next = vec![0.0; r.len()];
    rwr_step(graph, start, restart_prob, r, &mut next);
    r.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum()
}

/// How the asymmetric RWR proximities are made symmetric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetrize {
    /// `(R + Rᵀ) / 2`
    #[default]
    Mean,
    /// elementwise `max(R, Rᵀ)`
    Max,
}

/// What to do with a label whose concept is not in the graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingConceptPolicy {
    /// Log a warning and leave the label's row and column at zero.
    #[default]
    Warn,
    Error,
}

/// Consistency from RWR proximities between the vocabulary's concepts.
pub fn graph_consistency(
    graph: &ConceptGraph,
    vocab: &LabelVocabulary,
    cfg: &RwrConfig,
    symmetrize: Symmetrize,
    missing: MissingConceptPolicy,
) -> Result<ConsistencyMatrix> {
    graph_consistency_tagged(
        graph,
        vocab,
        cfg,
        symmetrize,
        missing,
        SourceTag::KnowledgeGraph,
    )
}

pub(crate) fn graph_consistency_tagged(
    graph: &ConceptGraph,
    vocab: &LabelVocabulary,
    cfg: &RwrConfig,
    symmetrize: Symmetrize,
    missing: MissingConceptPolicy,
    source: SourceTag,
) -> Result<ConsistencyMatrix> {
    cfg.validate()?;
    if vocab.concept_map().is_none() {
        return Err(Error::Config(
            "graph consistency needs a vocabulary with a concept map".into(),
        ));
    }
    let n = vocab.len();
    let mut nodes = Vec::with_capacity(n);
    for l in 0..n {
        let concept = vocab.concept_of(l).expect("concept map covers every label");
        let node = graph.node_index(concept);
        if node.is_none() {
            match missing {
                MissingConceptPolicy::Error => {
                    return Err(Error::MissingConcept {
                        label: vocab.label(l).into(),
                        concept: concept.into(),
                    })
                }
                MissingConceptPolicy::Warn => log::warn!(
                    "label `{}`: concept `{concept}` not in graph, its consistency row is zero",
                    vocab.label(l)
                ),
            }
        }
        nodes.push(node);
    }

    let walks: Vec<Option<Vec<f64>>> = nodes
        .par_iter()
        .map(|node| node.map(|s| rwr_steady_state(graph, s, cfg)).transpose())
        .collect::<Result<_>>()?;

    let mut proximity = vec![vec![0.0; n]; n];
    for (l, walk) in walks.iter().enumerate() {
        let Some(r) = walk else { continue };
        for (m, node) in nodes.iter().enumerate() {
            if let Some(j) = node {
                proximity[l][m] = r[*j];
            }
        }
    }
    let mut values = vec![vec![0.0; n]; n];
    for l in 0..n {
        for m in 0..n {
            values[l][m] = match symmetrize {
                Symmetrize::Mean => 0.5 * (proximity[l][m] + proximity[m][l]),
                Symmetrize::Max => proximity[l][m].max(proximity[m][l]),
            };
        }
    }
    ConsistencyMatrix::new(values, vocab.clone(), source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn positive(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn two_node() -> ConceptGraph {
        ConceptGraph::new(vec!["A".into(), "B".into()], vec![(0, 1, 1.0)]).unwrap()
    }

    /// Dense solve of `(I − (1−c)W) r = c·e_s`, built directly from the edge list.
    fn dense_rwr(graph: &ConceptGraph, start: usize, c: f64) -> Vec<f64> {
        let n = graph.node_count();
        let mut w = DMatrix::<f64>::zeros(n, n);
        let mut deg = vec![0.0; n];
        for &(a, b, wt) in graph.edges() {
            deg[a] += wt;
            deg[b] += wt;
        }
        for &(a, b, wt) in graph.edges() {
            w[(b, a)] += wt / deg[a];
            w[(a, b)] += wt / deg[b];
        }
        for j in 0..n {
            if deg[j] == 0.0 {
                w[(start, j)] = 1.0;
            }
        }
        let m = DMatrix::<f64>::identity(n, n) - w * (1.0 - c);
        let mut rhs = DVector::<f64>::zeros(n);
        rhs[start] = c;
        m.lu().solve(&rhs).unwrap().iter().copied().collect()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> ConceptGraph {
        let nodes = (0..n).map(|i| format!("n{i}")).collect();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.gen_bool(0.2) {
                    edges.push((a, b, rng.gen_range(0.1..3.0)));
                }
            }
        }
        ConceptGraph::new(nodes, edges).unwrap()
    }

    #[test]
    fn crop_filters_relations() {
        let g = crop_graph(
            vec![
                RawEdge::new("a", "RelatedTo", "b", 1.0),
                RawEdge::new("a", "Antonym", "c", 1.0),
            ],
            None,
            &positive(&["RelatedTo"]),
        );
        assert_eq!(g.nodes(), ["a", "b"]);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn crop_collapses_parallel_edges() {
        let g = crop_graph(
            vec![
                RawEdge::new("a", "RelatedTo", "b", 1.0),
                RawEdge::new("b", "/r/RelatedTo", "a", 2.0),
            ],
            None,
            &positive(&["RelatedTo"]),
        );
        assert_eq!(g.edges(), [(0, 1, 3.0)]);
    }

    #[test]
    fn crop_language_filter() {
        let g = crop_graph(
            vec![
                RawEdge::new("/c/en/car", "IsA", "/c/en/vehicle", 2.0),
                RawEdge::new("/c/en/car", "RelatedTo", "/c/de/auto", 1.0),
                RawEdge::new("/c/fr/voiture", "RelatedTo", "/c/fr/route", 1.0),
                RawEdge::new("/c/english/x", "RelatedTo", "/c/en/y", 1.0),
            ],
            Some("en"),
            &default_positive_relations(),
        );
        assert_eq!(g.nodes(), ["/c/en/car", "/c/en/vehicle"]);
    }

    #[test]
    fn crop_to_empty_is_ok() {
        let g = crop_graph(
            vec![RawEdge::new("a", "Antonym", "b", 1.0)],
            None,
            &default_positive_relations(),
        );
        assert_eq!(g.node_count(), 0);
    }

    #[test]
    fn default_relations_exclude_negative() {
        let rel = default_positive_relations();
        assert_eq!(rel.len(), 16);
        assert!(rel.contains("RelatedTo") && rel.contains("HasPrerequisite"));
        for neg in [
            "Antonym",
            "DistinctFrom",
            "NotCapableOf",
            "NotHasProperty",
            "NotDesires",
            "ObstructedBy",
        ] {
            assert!(!rel.contains(neg));
        }
    }

    #[test]
    fn conceptnet_line_parsing() {
        let line = "/a/[/r/IsA/,/c/en/car/n/,/c/en/vehicle/]\t/r/IsA\t/c/en/car/n/wn/artifact\t/c/en/vehicle\t{\"dataset\": \"/d/wordnet/3.1\", \"weight\": 2.0}";
        let e = parse_conceptnet_line(line).unwrap();
        assert_eq!(e, RawEdge::new("/c/en/car", "IsA", "/c/en/vehicle", 2.0));
        let dump = format!(
            "{line}\n/a/x\t/r/Antonym\t/c/en/car\t/c/en/bicycle\t{{\"weight\": 1.0}}\n/a/y\t/r/RelatedTo\t/c/en/car\t/c/ja/車\t{{\"weight\": 1.0}}\n"
        );
        let g =
            crop_conceptnet(dump.as_bytes(), Some("en"), &default_positive_relations()).unwrap();
        assert_eq!(g.nodes(), ["/c/en/car", "/c/en/vehicle"]);
        assert_eq!(g.edges(), [(0, 1, 2.0)]);
    }

    #[test]
    fn tsv_round_trip() {
        let text = "# comment\na\tRelatedTo\tb\t1.5\nb\tIsA\tc\n";
        let edges = read_tsv_edges(text.as_bytes()).unwrap();
        assert_eq!(edges[1].weight, 1.0);
        let g = crop_graph(edges, None, &default_positive_relations());
        let mut out = Vec::new();
        g.write_tsv(&mut out).unwrap();
        let again = crop_graph(
            read_tsv_edges(out.as_slice()).unwrap(),
            None,
            &default_positive_relations(),
        );
        assert_eq!(again, g);
        assert!(read_tsv_edges("a\tb\n".as_bytes()).is_err());
    }

    #[test]
    fn graph_invariants_enforced() {
        let nodes = vec!["a".to_string(), "b".to_string()];
        assert!(ConceptGraph::new(nodes.clone(), vec![(0, 0, 1.0)]).is_err());
        assert!(ConceptGraph::new(nodes.clone(), vec![(0, 1, 1.0), (1, 0, 1.0)]).is_err());
        assert!(ConceptGraph::new(nodes.clone(), vec![(0, 1, 0.0)]).is_err());
        assert!(ConceptGraph::new(nodes, vec![(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn two_node_closed_form() {
        let r = rwr_steady_state(&two_node(), 0, &RwrConfig::default()).unwrap();
        let ra = 0.15 / (1.0 - 0.85f64.powi(2));
        assert!((r[0] - ra).abs() < 1e-8, "{r:?}");
        assert!((r[1] - (1.0 - ra)).abs() < 1e-8);
        assert!((r[0] - 0.540_540_540_5).abs() < 1e-9);
    }

    #[test]
    fn single_node() {
        let g = ConceptGraph::new(vec!["x".into()], vec![]).unwrap();
        assert_eq!(
            rwr_steady_state(&g, 0, &RwrConfig::default()).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn three_cycle_symmetry() {
        let g = ConceptGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)],
        )
        .unwrap();
        for s in 0..3 {
            let r = rwr_steady_state(&g, s, &RwrConfig::default()).unwrap();
            let others: Vec<f64> = (0..3).filter(|&i| i != s).map(|i| r[i]).collect();
            assert!((others[0] - others[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn rwr_config_validation() {
        let bad = RwrConfig {
            restart_prob: 1.0,
            ..RwrConfig::default()
        };
        assert!(rwr_steady_state(&two_node(), 0, &bad).is_err());
        assert!(rwr_steady_state(&two_node(), 5, &RwrConfig::default()).is_err());
    }

    #[test]
    fn non_convergence_reports_residual() {
        let cfg = RwrConfig {
            max_iterations: 3,
            ..RwrConfig::default()
        };
        match rwr_steady_state(&two_node(), 0, &cfg) {
            Err(Error::NonConvergence {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 3);
                assert!(residual > cfg.tolerance);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn power_iteration_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = RwrConfig::default();
        for _ in 0..20 {
            let n = rng.gen_range(1..=50);
            let g = random_graph(&mut rng, n);
            let s = rng.gen_range(0..n);
            let r = rwr_steady_state(&g, s, &cfg).unwrap();
            let d = dense_rwr(&g, s, cfg.restart_prob);
            for (a, b) in r.iter().zip(&d) {
                assert!((a - b).abs() < 1e-8);
            }
            assert!(rwr_residual(&g, s, cfg.restart_prob, &r) <= cfg.tolerance);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn ab_vocab() -> LabelVocabulary {
        let map = [
            ("x".to_string(), "A".to_string()),
            ("y".to_string(), "B".to_string()),
        ]
        .into();
        LabelVocabulary::new(["x", "y"])
            .unwrap()
            .with_concept_map(map)
            .unwrap()
    }

    #[test]
    fn two_label_consistency() {
        let s = graph_consistency(
            &two_node(),
            &ab_vocab(),
            &RwrConfig::default(),
            Symmetrize::Mean,
            MissingConceptPolicy::Warn,
        )
        .unwrap();
        assert!((s.get(0, 1) - 0.459_459_459_5).abs() < 1e-8);
        assert_eq!(s.get(0, 1), s.get(1, 0));
        assert!((s.get(0, 0) - 0.540_540_540_5).abs() < 1e-8);
        assert_eq!(s.source(), SourceTag::KnowledgeGraph);
    }

    #[test]
    fn isolated_label_row() {
        let g =
            ConceptGraph::new(vec!["A".into(), "B".into(), "Z".into()], vec![(0, 1, 1.0)]).unwrap();
        let map = [
            ("x".to_string(), "A".to_string()),
            ("y".to_string(), "B".to_string()),
            ("z".to_string(), "Z".to_string()),
        ]
        .into();
        let v = LabelVocabulary::new(["x", "y", "z"])
            .unwrap()
            .with_concept_map(map)
            .unwrap();
        let s = graph_consistency(
            &g,
            &v,
            &RwrConfig::default(),
            Symmetrize::Max,
            MissingConceptPolicy::Warn,
        )
        .unwrap();
        assert_eq!(s.get(2, 2), 1.0);
        for l in 0..2 {
            assert_eq!(s.get(2, l), 0.0);
            assert_eq!(s.get(l, 2), 0.0);
        }
    }

    #[test]
    fn missing_concept_policy() {
        let map = [
            ("x".to_string(), "A".to_string()),
            ("y".to_string(), "Q".to_string()),
        ]
        .into();
        let v = LabelVocabulary::new(["x", "y"])
            .unwrap()
            .with_concept_map(map)
            .unwrap();
        let s = graph_consistency(
            &two_node(),
            &v,
            &RwrConfig::default(),
            Symmetrize::Mean,
            MissingConceptPolicy::Warn,
        )
        .unwrap();
        assert_eq!(s.rows()[1], vec![0.0, 0.0]);
        assert_eq!(s.get(0, 1), 0.0);
        assert!(matches!(
            graph_consistency(
                &two_node(),
                &v,
                &RwrConfig::default(),
                Symmetrize::Mean,
                MissingConceptPolicy::Error
            ),
            Err(Error::MissingConcept { .. })
        ));
        let no_map = LabelVocabulary::new(["A", "B"]).unwrap();
        assert!(graph_consistency(
            &two_node(),
            &no_map,
            &RwrConfig::default(),
            Symmetrize::Mean,
            MissingConceptPolicy::Warn
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rwr_is_probability_vector(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n);
            let s = rng.gen_range(0..n);
            let cfg = RwrConfig::default();
            let r = rwr_steady_state(&g, s, &cfg).unwrap();
            prop_assert!(r.iter().all(|&x| x >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= cfg.tolerance);
            prop_assert!(rwr_residual(&g, s, cfg.restart_prob, &r) <= cfg.tolerance);
        }

        #[test]
        fn consistency_invariant_to_node_order(seed in any::<u64>(), n in 3usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let nodes: Vec<String> = perm.iter().map(|&p| g.nodes()[p].clone()).collect();
            let inv: Vec<usize> = {
                let mut inv = vec![0; n];
                for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
                inv
            };
            let edges = g.edges().iter().map(|&(a, b, w)| (inv[a], inv[b], w)).collect();
            let permuted = ConceptGraph::new(nodes, edges).unwrap();
            let labels: Vec<String> = (0..3).map(|i| format!("l{i}")).collect();
            let map = labels.iter().enumerate().map(|(i, l)| (l.clone(), format!("n{i}"))).collect();
            let vocab = LabelVocabulary::new(labels).unwrap().with_concept_map(map).unwrap();
            for sym in [Symmetrize::Mean, Symmetrize::Max] {
                let a = graph_consistency(&g, &vocab, &RwrConfig::default(), sym, MissingConceptPolicy::Warn).unwrap();
                let b = graph_consistency(&permuted, &vocab, &RwrConfig::default(), sym, MissingConceptPolicy::Warn).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        prop_assert!((a.get(i, j) - b.get(i, j)).abs() < 1e-12);
                        prop_assert_eq!(a.get(i, j), a.get(j, i));
                        prop_assert!((0.0..=1.0).contains(&a.get(i, j)));
                    }
                }
            }
        }
    }
}
