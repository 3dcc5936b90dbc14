//! Co-occurrence statistics and the frequency-based (PMI-style) consistency matrix.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{ConsistencyMatrix, SourceTag};
use crate::error::{Error, Result};
use crate::model::{GroundTruthInstance, LabelVocabulary};

/// How same-class pairs `n(l, l)` are counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CooccurrenceMode {
    /// `Σ_img c·(c−1)/2`: only instances sharing an image form pairs.
    #[default]
    PerImage,
    /// `n(l)·(n(l)−1)/2` over the global count.
    Pooled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Base10,
}

impl LogBase {
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Base10 => x.log10(),
        }
    }
}

/// Instance counts `n(l)`, symmetric pair counts `n(l, l')` and total `N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoOccurrenceStats {
    pub instance_counts: Vec<u64>,
    pub pair_counts: Vec<Vec<u64>>,
    pub total_instances: u64,
}

impl CoOccurrenceStats {
    pub fn zeros(num_labels: usize) -> Self {
        Self {
            instance_counts: vec![0; num_labels],
            pair_counts: vec![vec![0; num_labels]; num_labels],
            total_instances: 0,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.instance_counts.len()
    }

    /// Stats of a single image from its per-class instance counts.
    fn from_image_counts(counts: &[u64]) -> Self {
        let n = counts.len();
        let mut stats = Self::zeros(n);
        for l in 0..n {
            stats.instance_counts[l] = counts[l];
            stats.pair_counts[l][l] = counts[l] * counts[l].saturating_sub(1) / 2;
            for m in (l + 1)..n {
                let p = counts[l] * counts[m];
                stats.pair_counts[l][m] = p;
                stats.pair_counts[m][l] = p;
            }
        }
        stats.total_instances = counts.iter().sum();
        stats
    }

    /// Elementwise sum; associative and commutative.
    pub fn merge(mut self, other: &Self) -> Self {
        for (a, b) in self.instance_counts.iter_mut().zip(&other.instance_counts) {
            *a += b;
        }
        for (ra, rb) in self.pair_counts.iter_mut().zip(&other.pair_counts) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += b;
            }
        }
        self.total_instances += other.total_instances;
        self
    }

    pub fn check_vocab(&self, vocab: &LabelVocabulary) -> Result<()> {
        let n = vocab.len();
        if self.instance_counts.len() != n
            || self.pair_counts.len() != n
            || self.pair_counts.iter().any(|r| r.len() != n)
        {
            return Err(Error::DimensionMismatch(format!(
                "statistics cover {} labels, vocabulary has {n}",
                self.instance_counts.len()
            )));
        }
        Ok(())
    }
}

/// Counts instances and co-occurrences per image, then merges.
pub fn collect_stats(
    gt: &[GroundTruthInstance],
    vocab: &LabelVocabulary,
    mode: CooccurrenceMode,
) -> Result<CoOccurrenceStats> {
    let n = vocab.len();
    let mut per_image: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for (i, inst) in gt.iter().enumerate() {
        if inst.class_id >= n {
            return Err(Error::VocabularyMismatch(format!(
                "instance {i} has class id {} but the vocabulary has {n} labels",
                inst.class_id
            )));
        }
        per_image
            .entry(inst.image_id.as_str())
            .or_insert_with(|| vec![0; n])[inst.class_id] += 1;
    }
    let images: Vec<&Vec<u64>> = per_image.values().collect();
    let mut stats = images
        .par_iter()
        .map(|c| CoOccurrenceStats::from_image_counts(c))
        .reduce(|| CoOccurrenceStats::zeros(n), |a, b| a.merge(&b));
    if mode == CooccurrenceMode::Pooled {
        for l in 0..n {
            let c = stats.instance_counts[l];
            stats.pair_counts[l][l] = c * c.saturating_sub(1) / 2;
        }
    }
    Ok(stats)
}

/// `S[l][l'] = max(log(n(l,l')·N / (n(l)·n(l'))), 0)`, with `S = 0` wherever a
/// count in the ratio is zero.
pub fn frequency_consistency(
    stats: &CoOccurrenceStats,
    vocab: &LabelVocabulary,
    log_base: LogBase,
) -> Result<ConsistencyMatrix> {
    stats.check_vocab(vocab)?;
    if stats.total_instances == 0 {
        return Err(Error::EmptyStatistics);
    }
    let n = stats.num_labels();
    let total = stats.total_instances as f64;
    let mut values = vec![vec![0.0; n]; n];
    for l in 0..n {
        for m in l..n {
            let (nl, nm, nlm) = (
                stats.instance_counts[l],
                stats.instance_counts[m],
                stats.pair_counts[l][m],
            );
            let s = if nl == 0 || nm == 0 || nlm == 0 {
                0.0
            } else {
                let ratio = nlm as f64 * total / (nl as f64 * nm as f64);
                log_base.log(ratio).max(0.0)
            };
            values[l][m] = s;
            values[m][l] = s;
        }
    }
    ConsistencyMatrix::new(values, vocab.clone(), SourceTag::Frequency)
}
