//! Seeded hyperparameter search over the re-optimization parameters.
//!
//! Trial parameters are drawn up front from a ChaCha8 stream, so running the
//! trials in parallel cannot change what is sampled or the resulting table.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyMatrix;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::frequency::CoOccurrenceStats;
use crate::hybrid::{hybrid_consistency, HybridConfig};
use crate::model::{GroundTruthInstance, ImageDetections, LabelVocabulary};
use crate::reopt::{reoptimize_all, ReoptConfig};

/// A continuous parameter: either fixed or sampled from `[low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Range {
    Point(f64),
    Interval { low: f64, high: f64 },
}

impl Range {
    fn validate(&self, name: &str) -> Result<()> {
        match *self {
            Range::Point(v) if v.is_finite() => Ok(()),
            Range::Interval { low, high } if low.is_finite() && high.is_finite() && low < high => {
                Ok(())
            }
            _ => Err(Error::Config(format!("{name}: invalid range {self:?}"))),
        }
    }

    fn upper(&self) -> f64 {
        match *self {
            Range::Point(v) => v,
            Range::Interval { high, .. } => high,
        }
    }

    fn lower(&self) -> f64 {
        match *self {
            Range::Point(v) => v,
            Range::Interval { low, .. } => low,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, log: bool) -> f64 {
        match *self {
            Range::Point(v) => v,
            Range::Interval { low, high } if log => rng.gen_range(low.ln()..high.ln()).exp(),
            Range::Interval { low, high } => rng.gen_range(low..high),
        }
    }

    /// `n` evenly spaced values including both ends (log-spaced if `log`).
    fn grid(&self, n: usize, log: bool) -> Vec<f64> {
        match *self {
            Range::Point(v) => vec![v],
            Range::Interval { low, high } => {
                let (a, b) = if log {
                    (low.ln(), high.ln())
                } else {
                    (low, high)
                };
                (0..n)
                    .map(|i| {
                        let v = if n == 1 {
                            a
                        } else {
                            a + (b - a) * i as f64 / (n - 1) as f64
                        };
                        if log {
                            v.exp()
                        } else {
                            v
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Map,
    MeanRecall,
    /// `(1 - recall_weight) * mAP + recall_weight * mean recall`.
    Weighted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Random,
    /// Full Cartesian product; intervals are split into `grid_points` values
    /// and `budget` is ignored.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub epsilon: Range,
    pub epsilon_log_uniform: bool,
    pub top_k: Vec<usize>,
    pub neighbor_boxes: Vec<usize>,
    pub classes_considered: Vec<usize>,
    pub post_score_threshold: Range,
    /// Only meaningful with a hybrid consistency source.
    pub gamma: Option<Range>,
    pub budget: usize,
    pub seed: u64,
    pub objective: Objective,
    pub recall_weight: f64,
    pub mode: SearchMode,
    pub grid_points: usize,
    pub allow_epsilon_above_one: bool,
    /// Solver settings shared by all trials; sampled fields override it.
    pub base: ReoptConfig,
    pub eval: EvalConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            epsilon: Range::Interval {
                low: 0.05,
                high: 0.99,
            },
            epsilon_log_uniform: false,
            top_k: vec![100],
            neighbor_boxes: vec![5, 10, 20, 50, 99],
            classes_considered: vec![1, 2, 3, 5],
            post_score_threshold: Range::Point(0.0),
            gamma: None,
            budget: 100,
            seed: 0,
            objective: Objective::Map,
            recall_weight: 0.5,
            mode: SearchMode::Random,
            grid_points: 5,
            allow_epsilon_above_one: false,
            base: ReoptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        self.epsilon.validate("epsilon")?;
        self.post_score_threshold.validate("post_score_threshold")?;
        if let Some(g) = &self.gamma {
            g.validate("gamma")?;
            if g.lower() < 0.0 {
                return Err(Error::Config("gamma must be nonnegative".into()));
            }
        }
        for (name, list) in [
            ("top_k", &self.top_k),
            ("neighbor_boxes", &self.neighbor_boxes),
            ("classes_considered", &self.classes_considered),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!("{name}: empty choice list")));
            }
        }
        if self.epsilon.lower() <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.epsilon.upper() >= 1.0 && !self.allow_epsilon_above_one {
            return Err(Error::Config(
                "epsilon range reaches 1; set allow_epsilon_above_one to search that regime".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.recall_weight) {
            return Err(Error::Config("recall_weight must lie in [0, 1]".into()));
        }
        if self.mode == SearchMode::Grid && self.grid_points == 0 {
            return Err(Error::Config("grid_points must be at least 1".into()));
        }
        self.eval.validate()
    }

    pub fn objective_of(&self, report: &EvalReport) -> f64 {
        match self.objective {
            Objective::Map => report.map,
            Objective::MeanRecall => report.mean_recall,
            Objective::Weighted => {
                (1.0 - self.recall_weight) * report.map + self.recall_weight * report.mean_recall
            }
        }
    }
}

/// Where each trial's consistency matrix comes from.
#[derive(Debug, Clone)]
pub enum ConsistencySource {
    Fixed(ConsistencyMatrix),
    /// Rebuilt per trial so that gamma can be searched.
    Hybrid {
        stats: CoOccurrenceStats,
        vocab: LabelVocabulary,
        config: HybridConfig,
    },
}

impl ConsistencySource {
    fn vocab(&self) -> &LabelVocabulary {
        match self {
            ConsistencySource::Fixed(s) => s.vocab(),
            ConsistencySource::Hybrid { vocab, .. } => vocab,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub epsilon: f64,
    pub top_k: usize,
    pub neighbor_boxes: usize,
    pub classes_considered: usize,
    pub post_score_threshold: f64,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub map: f64,
    pub mean_recall: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: usize,
    pub params: TrialParams,
    /// `None` when the trial failed.
    pub summary: Option<TrialSummary>,
    pub error: Option<String>,
    pub wall_time_secs: f64,
}

impl TrialRecord {
    pub fn objective(&self) -> Option<f64> {
        self.summary.map(|s| s.objective)
    }
}

/// Parameters of every trial, in trial-id order.
pub fn sample_params(spec: &SweepSpec) -> Result<Vec<TrialParams>> {
    spec.validate()?;
    match spec.mode {
        SearchMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let pick = |rng: &mut ChaCha8Rng, list: &[usize]| list[rng.gen_range(0..list.len())];
            Ok((0..spec.budget)
                .map(|_| TrialParams {
                    epsilon: spec.epsilon.sample(&mut rng, spec.epsilon_log_uniform),
                    top_k: pick(&mut rng, &spec.top_k),
                    neighbor_boxes: pick(&mut rng, &spec.neighbor_boxes),
                    classes_considered: pick(&mut rng, &spec.classes_considered),
                    post_score_threshold: spec.post_score_threshold.sample(&mut rng, false),
                    gamma: spec.gamma.map(|g| g.sample(&mut rng, false)),
                })
                .collect())
        }
        SearchMode::Grid => {
            let n = spec.grid_points;
            let gammas: Vec<Option<f64>> = match spec.gamma {
                Some(g) => g.grid(n, false).into_iter().map(Some).collect(),
                None => vec![None],
            };
            let mut out = Vec::new();
            for epsilon in spec.epsilon.grid(n, spec.epsilon_log_uniform) {
                for &top_k in &spec.top_k {
                    for &neighbor_boxes in &spec.neighbor_boxes {
                        for &classes_considered in &spec.classes_considered {
                            for post_score_threshold in spec.post_score_threshold.grid(n, false) {
                                for &gamma in &gammas {
                                    out.push(TrialParams {
                                        epsilon,
                                        top_k,
                                        neighbor_boxes,
                                        classes_considered,
                                        post_score_threshold,
                                        gamma,
                                    });
                                }
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Re-optimizes and evaluates one parameter set from scratch.
pub fn evaluate_params(
    dets: &[ImageDetections],
    gt: &[GroundTruthInstance],
    source: &ConsistencySource,
    spec: &SweepSpec,
    params: &TrialParams,
) -> Result<EvalReport> {
    let built;
    let s = match source {
        ConsistencySource::Fixed(s) => {
            if params.gamma.is_some() {
                return Err(Error::Config(
                    "gamma can only be searched with a hybrid consistency source".into(),
                ));
            }
            s
        }
        ConsistencySource::Hybrid {
            stats,
            vocab,
            config,
        } => {
            let cfg = HybridConfig {
                gamma: params.gamma.unwrap_or(config.gamma),
                ..*config
            };
            built = hybrid_consistency(stats, vocab, &cfg)?;
            &built
        }
    };
    let cfg = ReoptConfig {
        epsilon: params.epsilon,
        top_k_detections: params.top_k,
        neighbor_boxes: params.neighbor_boxes,
        classes_considered: params.classes_considered,
        post_score_threshold: params.post_score_threshold,
        allow_epsilon_above_one: spec.allow_epsilon_above_one,
        ..spec.base
    };
    let result = reoptimize_all(dets, s, &cfg)?;
    evaluate(&result.images, gt, s.vocab(), &spec.eval)
}

/// Runs every trial and returns them best first. Failed trials are kept,
/// sorted after all successful ones.
pub fn run_sweep(
    dets: &[ImageDetections],
    gt: &[GroundTruthInstance],
    source: &ConsistencySource,
    spec: &SweepSpec,
) -> Result<Vec<TrialRecord>> {
    let params = sample_params(spec)?;
    if spec.gamma.is_some() && matches!(source, ConsistencySource::Fixed(_)) {
        return Err(Error::Config(
            "gamma can only be searched with a hybrid consistency source".into(),
        ));
    }
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    for img in dets {
        img.validate(source.vocab())?;
    }
    let mut trials: Vec<TrialRecord> = params
        .par_iter()
        .enumerate()
        .map(|(id, p)| {
            let start = Instant::now();
            let outcome = evaluate_params(dets, gt, source, spec, p).and_then(|r| {
                let objective = spec.objective_of(&r);
                if objective.is_finite() {
                    Ok(TrialSummary {
                        map: r.map,
                        mean_recall: r.mean_recall,
                        objective,
                    })
                } else {
                    Err(Error::Validation(format!(
                        "objective is not finite: {objective}"
                    )))
                }
            });
            let wall_time_secs = start.elapsed().as_secs_f64();
            match outcome {
                Ok(summary) => TrialRecord {
                    id,
                    params: *p,
                    summary: Some(summary),
                    error: None,
                    wall_time_secs,
                },
                Err(e) => {
                    log::warn!("trial {id} failed: {e}");
                    TrialRecord {
                        id,
                        params: *p,
                        summary: None,
                        error: Some(e.to_string()),
                        wall_time_secs,
                    }
                }
            }
        })
        .collect();
    if trials.iter().all(|t| t.summary.is_none()) {
        return Err(Error::AllTrialsFailed(trials.len()));
    }
    trials.sort_by(|a, b| match (a.objective(), b.objective()) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(trials)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One CSV row per trial, in the given order. Wall time is optional since
/// it varies from run to run.
pub fn write_trials_csv<W: Write>(
    writer: W,
    trials: &[TrialRecord],
    include_wall_time: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "rank",
        "id",
        "epsilon",
        "top_k",
        "neighbor_boxes",
        "classes_considered",
        "post_score_threshold",
        "gamma",
        "status",
        "map",
        "mean_recall",
        "objective",
        "error",
    ];
    if include_wall_time {
        header.push("wall_time_secs");
    }
    w.write_record(&header)?;
    for (rank, t) in trials.iter().enumerate() {
        let p = &t.params;
        let mut row = vec![
            (rank + 1).to_string(),
            t.id.to_string(),
            p.epsilon.to_string(),
            p.top_k.to_string(),
            p.neighbor_boxes.to_string(),
            p.classes_considered.to_string(),
            p.post_score_threshold.to_string(),
            opt(p.gamma),
            if t.summary.is_some() { "ok" } else { "failed" }.to_owned(),
            opt(t.summary.map(|s| s.map)),
            opt(t.summary.map(|s| s.mean_recall)),
            opt(t.objective()),
            t.error.clone().unwrap_or_default(),
        ];
        if include_wall_time {
            row.push(t.wall_time_secs.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
