//! Hybrid consistency: a concept graph grown from the dataset's own
//! co-occurrence counts, then walked exactly like an external knowledge graph.

use serde::{Deserialize, Serialize};

use crate::consistency::{ConsistencyMatrix, SourceTag};
use crate::error::{Error, Result};
use crate::frequency::CoOccurrenceStats;
use crate::graph::{
    graph_consistency_tagged, ConceptGraph, MissingConceptPolicy, RwrConfig, Symmetrize,
};
use crate::model::LabelVocabulary;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeighting {
    /// Every admitted edge has weight 1.
    #[default]
    Binary,
    /// Edge weight is the co-occurrence count.
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Labels are connected only when their co-occurrence count exceeds this.
    pub gamma: f64,
    pub edge_weighting: EdgeWeighting,
    pub rwr: RwrConfig,
    pub symmetrize: Symmetrize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            edge_weighting: EdgeWeighting::Binary,
            rwr: RwrConfig::default(),
            symmetrize: Symmetrize::Mean,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        self.rwr.validate()
    }
}

/// One node per label, with an edge `l, l'` whenever `n(l, l') > gamma`.
pub fn build_cooccurrence_graph(
    stats: &CoOccurrenceStats,
    vocab: &LabelVocabulary,
    cfg: &HybridConfig,
) -> Result<ConceptGraph> {
    cfg.validate()?;
    stats.check_vocab(vocab)?;
    let n = vocab.len();
    let mut edges = Vec::new();
    for l in 0..n {
        for m in (l + 1)..n {
            let count = stats.pair_counts[l][m];
            if count as f64 > cfg.gamma {
                let w = match cfg.edge_weighting {
                    EdgeWeighting::Binary => 1.0,
                    EdgeWeighting::Count => count as f64,
                };
                edges.push((l, m, w));
            }
        }
    }
    ConceptGraph::new(vocab.labels().to_vec(), edges)
}

/// RWR consistency over the co-occurrence graph.
pub fn hybrid_consistency(
    stats: &CoOccurrenceStats,
    vocab: &LabelVocabulary,
    cfg: &HybridConfig,
) -> Result<ConsistencyMatrix> {
    let graph = build_cooccurrence_graph(stats, vocab, cfg)?;
    let identity = vocab.clone().with_identity_concepts();
    let s = graph_consistency_tagged(
        &graph,
        &identity,
        &cfg.rwr,
        cfg.symmetrize,
        MissingConceptPolicy::Error,
        SourceTag::Hybrid,
    )?;
    // report against the caller's vocabulary, not the identity-mapped copy
    ConsistencyMatrix::new(s.rows().to_vec(), vocab.clone(), SourceTag::Hybrid)
}
