//! Detection metrics: greedy IoU matching, AUC-style average precision,
//! recall, size-stratified AP, and score-change statistics.
//!
//! Each detection is labelled with its top foreground class and scored by
//! that class's probability. Only the `max_detections` highest-ranked
//! detections of an image are evaluated.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    top_k_indices, BoundingBox, GroundTruthInstance, ImageDetections, LabelVocabulary,
};
use crate::reopt::{ReoptResult, ScoreDelta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl AreaRange {
    pub fn new(name: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            min,
            max,
        }
    }

    fn contains(&self, area: f64) -> bool {
        area >= self.min && area <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub max_detections: usize,
    pub area_ranges: Vec<AreaRange>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: 101,
            max_detections: 100,
            area_ranges: vec![
                AreaRange::new("small", 0.0, 32.0 * 32.0),
                AreaRange::new("medium", 32.0 * 32.0, 96.0 * 96.0),
                AreaRange::new("large", 96.0 * 96.0, f64::INFINITY),
            ],
        }
    }
}

impl EvalConfig {
    /// Default configuration evaluated at a single IoU threshold.
    pub fn single_threshold(iou: f64) -> Self {
        Self {
            iou_thresholds: vec![iou],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config(
                "at least one IoU threshold is required".into(),
            ));
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "IoU thresholds must be sorted ascending and unique".into(),
            ));
        }
        if self.recall_points < 2 {
            return Err(Error::Config("recall_points must be at least 2".into()));
        }
        Ok(())
    }
}

/// Greedy matching of one class in one image under a single IoU threshold.
///
/// Detections are visited by descending score (ties: lower index first).
/// Each takes the unmatched ground truth of highest IoU ≥ `iou_threshold`
/// (ties: lower index), preferring non-ignored ground truth. Returns the
/// matched ground-truth index per detection.
fn greedy_match(
    det_boxes: &[(f64, BoundingBox)],
    gt_boxes: &[(BoundingBox, bool)],
    iou_threshold: f64,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..det_boxes.len()).collect();
    order.sort_by(|&a, &b| det_boxes[b].0.total_cmp(&det_boxes[a].0));
    let mut taken = vec![false; gt_boxes.len()];
    let mut matched = vec![None; det_boxes.len()];
    for d in order {
        let dbox = &det_boxes[d].1;
        let mut best: Option<(usize, f64, bool)> = None;
        for (g, (gbox, ignored)) in gt_boxes.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = dbox.iou(gbox);
            if iou < iou_threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, best_iou, best_ignored)) => {
                    (best_ignored && !ignored) || (best_ignored == *ignored && iou > best_iou)
                }
            };
            if better {
                best = Some((g, iou, *ignored));
            }
        }
        if let Some((g, _, _)) = best {
            taken[g] = true;
            matched[d] = Some(g);
        }
    }
    matched
}

/// Matches one image's detections against its ground truth.
/// Returns `(det_index, gt_index)` for every detection, in detection order.
pub fn match_detections(
    dets: &ImageDetections,
    gt: &[GroundTruthInstance],
    iou_threshold: f64,
    background: Option<usize>,
) -> Vec<(usize, Option<usize>)> {
    let mut result: Vec<(usize, Option<usize>)> =
        (0..dets.detections.len()).map(|i| (i, None)).collect();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.detections.iter().enumerate() {
        if let Some((c, _)) = d.top_class(background) {
            by_class.entry(c).or_default().push(i);
        }
    }
    for (class, det_idx) in by_class {
        let gt_idx: Vec<usize> = (0..gt.len())
            .filter(|&g| gt[g].class_id == class && gt[g].image_id == dets.image_id)
            .collect();
        let det_boxes: Vec<(f64, BoundingBox)> = det_idx
            .iter()
            .map(|&i| {
                (
                    dets.detections[i].rank_score(background),
                    dets.detections[i].bbox,
                )
            })
            .collect();
        let gt_boxes: Vec<(BoundingBox, bool)> =
            gt_idx.iter().map(|&g| (gt[g].bbox, false)).collect();
        for (k, m) in greedy_match(&det_boxes, &gt_boxes, iou_threshold)
            .into_iter()
            .enumerate()
        {
            result[det_idx[k]].1 = m.map(|j| gt_idx[j]);
        }
    }
    result
}

/// AUC-style AP from scored detections of one class.
///
/// `entries` holds `(score, is_true_positive)`; they are ranked by
/// descending score with ties kept in the given order. Precision is replaced
/// by its monotone envelope and sampled at `recall_points` evenly spaced
/// recall values in [0, 1]. `None` when there is no ground truth.
pub fn average_precision(
    entries: &[(f64, bool)],
    num_gt: usize,
    recall_points: usize,
) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[b].0.total_cmp(&entries[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &i in &order {
        if entries[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for j in 0..recall_points {
        let r = j as f64 / (recall_points - 1) as f64;
        let k = recall.partition_point(|&x| x < r);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    Some(sum / recall_points as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub ap: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeMetrics {
    pub range: String,
    pub ap: Option<f64>,
}

/// Match counts at the first IoU threshold over all areas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub matched_detections: usize,
    pub unmatched_detections: usize,
    pub matched_ground_truth: usize,
    pub unmatched_ground_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub mean_recall: f64,
    pub per_class: Vec<ClassMetrics>,
    pub per_size: Vec<SizeMetrics>,
    pub counts: MatchCounts,
}

/// Per (class, area range, IoU threshold) accumulation over images.
#[derive(Default, Clone)]
struct Bucket {
    // (score, image order, det index, is_tp)
    dets: Vec<(f64, usize, usize, bool)>,
    num_gt: usize,
}

impl Bucket {
    fn ap(&self, recall_points: usize) -> Option<f64> {
        let mut d = self.dets.clone();
        d.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let entries: Vec<(f64, bool)> = d.iter().map(|e| (e.0, e.3)).collect();
        average_precision(&entries, self.num_gt, recall_points)
    }

    fn recall(&self) -> Option<f64> {
        (self.num_gt > 0)
            .then(|| self.dets.iter().filter(|e| e.3).count() as f64 / self.num_gt as f64)
    }

    fn merge(&mut self, other: Bucket) {
        self.dets.extend(other.dets);
        self.num_gt += other.num_gt;
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Full metric surface over a detection set.
pub fn evaluate(
    dets: &[ImageDetections],
    gt: &[GroundTruthInstance],
    vocab: &LabelVocabulary,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let background = vocab.background();
    let num_classes = vocab.len();
    // area range 0 is "all"
    let mut ranges = vec![AreaRange::new("all", 0.0, f64::INFINITY)];
    ranges.extend(cfg.area_ranges.iter().cloned());
    let n_thr = cfg.iou_thresholds.len();
    let bucket_index = |c: usize, a: usize, t: usize| (c * ranges.len() + a) * n_thr + t;
    let n_buckets = num_classes * ranges.len() * n_thr;

    let mut gt_by_image: BTreeMap<&str, Vec<&GroundTruthInstance>> = BTreeMap::new();
    for g in gt {
        if g.class_id >= num_classes {
            return Err(Error::VocabularyMismatch(format!(
                "ground-truth class id {} outside vocabulary of {num_classes}",
                g.class_id
            )));
        }
        gt_by_image.entry(g.image_id.as_str()).or_default().push(g);
    }
    let mut det_by_image: HashMap<&str, &ImageDetections> = HashMap::new();
    for d in dets {
        d.validate(vocab)?;
        if det_by_image.insert(d.image_id.as_str(), d).is_some() {
            return Err(Error::Validation(format!(
                "image `{}` appears twice",
                d.image_id
            )));
        }
    }
    // images ordered by id so results do not depend on input order
    let images: Vec<&str> = gt_by_image
        .keys()
        .copied()
        .chain(det_by_image.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let per_image: Vec<(Vec<Bucket>, MatchCounts)> = images
        .par_iter()
        .enumerate()
        .map(|(image_order, &image)| {
            let mut buckets = vec![Bucket::default(); n_buckets];
            let mut counts = MatchCounts::default();
            let empty = Vec::new();
            let gts = gt_by_image.get(image).unwrap_or(&empty);
            let kept: Vec<(usize, usize, f64, BoundingBox)> = match det_by_image.get(image) {
                Some(img) => top_k_indices(img, cfg.max_detections, background)
                    .into_iter()
                    .filter_map(|i| {
                        let d = &img.detections[i];
                        d.top_class(background).map(|(c, s)| (i, c, s, d.bbox))
                    })
                    .collect(),
                None => Vec::new(),
            };
            for class in 0..num_classes {
                let cdets: Vec<&(usize, usize, f64, BoundingBox)> =
                    kept.iter().filter(|d| d.1 == class).collect();
                let cgts: Vec<&&GroundTruthInstance> =
                    gts.iter().filter(|g| g.class_id == class).collect();
                if cdets.is_empty() && cgts.is_empty() {
                    continue;
                }
                let det_boxes: Vec<(f64, BoundingBox)> = cdets.iter().map(|d| (d.2, d.3)).collect();
                for (a, range) in ranges.iter().enumerate() {
                    let gt_boxes: Vec<(BoundingBox, bool)> = cgts
                        .iter()
                        .map(|g| (g.bbox, !range.contains(g.bbox.area())))
                        .collect();
                    let num_gt = gt_boxes.iter().filter(|g| !g.1).count();
                    for (t, &thr) in cfg.iou_thresholds.iter().enumerate() {
                        let matches = greedy_match(&det_boxes, &gt_boxes, thr);
                        let bucket = &mut buckets[bucket_index(class, a, t)];
                        bucket.num_gt += num_gt;
                        for (k, m) in matches.iter().enumerate() {
                            let ignore = match m {
                                Some(g) => gt_boxes[*g].1,
                                None => !range.contains(det_boxes[k].1.area()),
                            };
                            if !ignore {
                                bucket.dets.push((
                                    det_boxes[k].0,
                                    image_order,
                                    cdets[k].0,
                                    m.is_some(),
                                ));
                            }
                        }
                        if a == 0 && t == 0 {
                            let hits = matches.iter().filter(|m| m.is_some()).count();
                            counts.matched_detections += hits;
                            counts.unmatched_detections += matches.len() - hits;
                            counts.matched_ground_truth += hits;
                            counts.unmatched_ground_truth += num_gt - hits;
                        }
                    }
                }
            }
            (buckets, counts)
        })
        .collect();

    let mut buckets = vec![Bucket::default(); n_buckets];
    let mut counts = MatchCounts::default();
    for (bs, c) in per_image {
        for (acc, b) in buckets.iter_mut().zip(bs) {
            acc.merge(b);
        }
        counts.matched_detections += c.matched_detections;
        counts.unmatched_detections += c.unmatched_detections;
        counts.matched_ground_truth += c.matched_ground_truth;
        counts.unmatched_ground_truth += c.unmatched_ground_truth;
    }

    let class_ap = |c: usize, a: usize| -> Option<f64> {
        let aps: Vec<f64> = (0..n_thr)
            .filter_map(|t| buckets[bucket_index(c, a, t)].ap(cfg.recall_points))
            .collect();
        mean(aps.into_iter())
    };
    let per_class: Vec<ClassMetrics> = vocab
        .foreground()
        .map(|c| ClassMetrics {
            class: vocab.label(c).to_owned(),
            ap: class_ap(c, 0),
            recall: mean((0..n_thr).filter_map(|t| buckets[bucket_index(c, 0, t)].recall())),
        })
        .collect();
    let map = mean(per_class.iter().filter_map(|m| m.ap)).unwrap_or(0.0);
    let mean_recall = mean(per_class.iter().filter_map(|m| m.recall)).unwrap_or(0.0);
    let per_size = cfg
        .area_ranges
        .iter()
        .enumerate()
        .map(|(i, r)| SizeMetrics {
            range: r.name.clone(),
            ap: mean(vocab.foreground().filter_map(|c| class_ap(c, i + 1))),
        })
        .collect();
    Ok(EvalReport {
        map,
        mean_recall,
        per_class,
        per_size,
        counts,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{:.2}", v * 100.0))
}

fn pct_delta(v: Option<f64>, base: Option<f64>) -> String {
    match (v, base) {
        (Some(v), Some(b)) => format!("{:.2} ({:+.2})", v * 100.0, (v - b) * 100.0),
        _ => pct(v),
    }
}

impl EvalReport {
    /// Human-readable table, metric values ×100.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:>10} {:>10}", "", "mAP", "Recall");
        for s in &self.per_size {
            let _ = write!(out, " {:>10}", s.range);
        }
        out.push('\n');
        let _ = write!(
            out,
            "{:<12} {:>10} {:>10}",
            "overall",
            pct(Some(self.map)),
            pct(Some(self.mean_recall))
        );
        for s in &self.per_size {
            let _ = write!(out, " {:>10}", pct(s.ap));
        }
        out.push_str("\n\n");
        let _ = writeln!(out, "{:<12} {:>10} {:>10}", "class", "AP", "Recall");
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<12} {:>10} {:>10}",
                c.class,
                pct(c.ap),
                pct(c.recall)
            );
        }
        let c = &self.counts;
        let _ = writeln!(
            out,
            "\nmatched detections {} / unmatched {}; matched ground truth {} / missed {}",
            c.matched_detections,
            c.unmatched_detections,
            c.matched_ground_truth,
            c.unmatched_ground_truth
        );
        out
    }

    /// Side-by-side table of `self` against a baseline; brackets hold the
    /// difference from the baseline.
    pub fn compare_table(&self, baseline: &EvalReport) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:>16} {:>16}", "", "mAP", "Recall");
        for s in &self.per_size {
            let _ = write!(out, " {:>16}", s.range);
        }
        out.push('\n');
        let _ = write!(
            out,
            "{:<12} {:>16} {:>16}",
            "baseline",
            pct(Some(baseline.map)),
            pct(Some(baseline.mean_recall))
        );
        for s in &baseline.per_size {
            let _ = write!(out, " {:>16}", pct(s.ap));
        }
        out.push('\n');
        let _ = write!(
            out,
            "{:<12} {:>16} {:>16}",
            "re-optimized",
            pct_delta(Some(self.map), Some(baseline.map)),
            pct_delta(Some(self.mean_recall), Some(baseline.mean_recall))
        );
        for (s, b) in self.per_size.iter().zip(&baseline.per_size) {
            let _ = write!(out, " {:>16}", pct_delta(s.ap, b.ap));
        }
        out.push_str("\n\n");
        let _ = writeln!(out, "{:<12} {:>16} {:>16}", "class", "AP", "Recall");
        for (c, b) in self.per_class.iter().zip(&baseline.per_class) {
            let _ = writeln!(
                out,
                "{:<12} {:>16} {:>16}",
                c.class,
                pct_delta(c.ap, b.ap),
                pct_delta(c.recall, b.recall)
            );
        }
        out
    }
}

/// Descriptive statistics of confidence-score changes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreChangeStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    pub count: usize,
}

impl ScoreChangeStats {
    pub fn from_changes(changes: &[f64]) -> Self {
        if changes.is_empty() {
            return Self::default();
        }
        let n = changes.len() as f64;
        let mean = changes.iter().sum::<f64>() / n;
        let var = changes.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            max: changes.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: changes.iter().copied().fold(f64::INFINITY, f64::min),
            std_dev: var.sqrt(),
            count: changes.len(),
        }
    }
}

/// Changes of the max-class score over each image's `top_k` detections
/// (ranked by their original score), reconstructed from per-entry deltas.
pub fn score_change_stats_from_deltas(
    before: &[ImageDetections],
    deltas: &[ScoreDelta],
    top_k: usize,
    background: Option<usize>,
) -> Result<ScoreChangeStats> {
    let images: HashMap<&str, &ImageDetections> =
        before.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut after: HashMap<(&str, usize), Vec<Option<f64>>> = HashMap::new();
    for d in deltas {
        let img = images.get(d.image_id.as_str()).ok_or_else(|| {
            Error::Alignment(format!(
                "image `{}` missing from the original detections",
                d.image_id
            ))
        })?;
        let det = img.detections.get(d.det_index).ok_or_else(|| {
            Error::Alignment(format!(
                "image `{}` has no detection {}",
                d.image_id, d.det_index
            ))
        })?;
        match det.scores.get(d.class) {
            Some(&b) if b == d.before => {}
            _ => {
                return Err(Error::Alignment(format!(
                    "image `{}` detection {} class {}: recorded original score {} does not match",
                    d.image_id, d.det_index, d.class, d.before
                )))
            }
        }
        after
            .entry((d.image_id.as_str(), d.det_index))
            .or_insert_with(|| vec![None; det.scores.len()])[d.class] = Some(d.after);
    }
    let mut changes = Vec::new();
    for img in before {
        for i in top_k_indices(img, top_k, background) {
            let det = &img.detections[i];
            let Some(row) = after.get(&(img.image_id.as_str(), i)) else {
                return Err(Error::Alignment(format!(
                    "image `{}` detection {i} was not re-optimized",
                    img.image_id
                )));
            };
            let new_max = row
                .iter()
                .enumerate()
                .filter(|(l, _)| Some(*l) != background)
                .map(|(_, v)| {
                    v.ok_or_else(|| {
                        Error::Alignment(format!(
                            "image `{}` detection {i} has incomplete deltas",
                            img.image_id
                        ))
                    })
                })
                .try_fold(f64::NEG_INFINITY, |acc, v| v.map(|v| acc.max(v)))?;
            changes.push(new_max - det.rank_score(background));
        }
    }
    Ok(ScoreChangeStats::from_changes(&changes))
}

pub fn score_change_stats(
    before: &[ImageDetections],
    after: &ReoptResult,
    top_k: usize,
    background: Option<usize>,
) -> Result<ScoreChangeStats> {
    score_change_stats_from_deltas(before, &after.per_detection_deltas, top_k, background)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Detection;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn det(b: BoundingBox, scores: &[f64]) -> Detection {
        Detection::new(b, scores.to_vec())
    }

    fn gt(image: &str, b: BoundingBox, class_id: usize) -> GroundTruthInstance {
        GroundTruthInstance {
            image_id: image.into(),
            bbox: b,
            class_id,
        }
    }

    fn img(id: &str, dets: Vec<Detection>) -> ImageDetections {
        ImageDetections {
            image_id: id.into(),
            image_width: 1000.0,
            image_height: 1000.0,
            detections: dets,
        }
    }

    fn vocab() -> LabelVocabulary {
        LabelVocabulary::new(["car", "person"]).unwrap()
    }

    #[test]
    fn exact_overlap_matches() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), 0)];
        let d = img("a", vec![det(bx(0.0, 0.0, 10.0, 10.0), &[0.9, 0.1])]);
        assert_eq!(match_detections(&d, &g, 0.5, None), vec![(0, Some(0))]);
    }

    #[test]
    fn class_gate() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), 1)];
        let d = img("a", vec![det(bx(0.0, 0.0, 10.0, 10.0), &[0.9, 0.1])]);
        assert_eq!(match_detections(&d, &g, 0.5, None), vec![(0, None)]);
    }

    #[test]
    fn greedy_by_score() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), 0)];
        let d = img(
            "a",
            vec![
                det(bx(0.0, 0.0, 10.0, 10.0), &[0.8, 0.1]),
                det(bx(1.0, 0.0, 10.0, 10.0), &[0.9, 0.1]),
            ],
        );
        assert_eq!(
            match_detections(&d, &g, 0.5, None),
            vec![(0, None), (1, Some(0))]
        );
    }

    #[test]
    fn highest_iou_then_lowest_index() {
        let g = vec![
            gt("a", bx(2.0, 0.0, 10.0, 10.0), 0),
            gt("a", bx(0.0, 0.0, 10.0, 10.0), 0),
            gt("a", bx(0.0, 0.0, 10.0, 10.0), 0),
        ];
        let d = img("a", vec![det(bx(0.0, 0.0, 10.0, 10.0), &[0.9, 0.0])]);
        assert_eq!(match_detections(&d, &g, 0.5, None), vec![(0, Some(1))]);
    }

    #[test]
    fn ap_single_perfect() {
        assert_eq!(average_precision(&[(0.9, true)], 1, 101), Some(1.0));
    }

    #[test]
    fn ap_no_detections() {
        assert_eq!(average_precision(&[], 3, 101), Some(0.0));
        assert_eq!(average_precision(&[(0.3, false)], 0, 101), None);
    }

    #[test]
    fn ap_hand_curve() {
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2, 101).unwrap();
        let expected = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expected).abs() < 1e-12);
        assert!((ap - 0.8350).abs() < 1e-4);
    }

    /// Two images; every ground truth detected exactly.
    fn perfect_fixture() -> (Vec<ImageDetections>, Vec<GroundTruthInstance>) {
        let gts = vec![
            gt("a", bx(0.0, 0.0, 20.0, 20.0), 0),
            gt("a", bx(100.0, 100.0, 50.0, 80.0), 1),
            gt("b", bx(10.0, 10.0, 200.0, 120.0), 0),
            gt("b", bx(300.0, 300.0, 30.0, 30.0), 1),
        ];
        let dets = vec![
            img(
                "a",
                vec![
                    det(bx(0.0, 0.0, 20.0, 20.0), &[0.9, 0.05]),
                    det(bx(100.0, 100.0, 50.0, 80.0), &[0.2, 0.7]),
                ],
            ),
            img(
                "b",
                vec![
                    det(bx(10.0, 10.0, 200.0, 120.0), &[0.6, 0.3]),
                    det(bx(300.0, 300.0, 30.0, 30.0), &[0.1, 0.95]),
                ],
            ),
        ];
        (dets, gts)
    }

    #[test]
    fn perfect_fixture_scores_one() {
        let (dets, gts) = perfect_fixture();
        let r = evaluate(&dets, &gts, &vocab(), &EvalConfig::default()).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.mean_recall, 1.0);
        assert_eq!(r.counts.matched_ground_truth, 4);
        assert_eq!(r.counts.unmatched_detections, 0);
    }

    #[test]
    fn half_undetected_recall() {
        let (mut dets, gts) = perfect_fixture();
        dets[0].detections.truncate(1); // drops the person in image a
        dets[1].detections.truncate(1); // drops the person in image b
        dets[0]
            .detections
            .push(det(bx(500.0, 500.0, 10.0, 10.0), &[0.0, 0.5]));
        // car: 2/2 found, person: 0/2 found
        let r = evaluate(&dets, &gts, &vocab(), &EvalConfig::default()).unwrap();
        assert_eq!(r.mean_recall, 0.5);
        assert_eq!(r.per_class[1].ap, Some(0.0));
        assert_eq!(r.counts.unmatched_ground_truth, 2);
    }

    #[test]
    fn size_ranges() {
        let gts = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), 0)];
        let dets = vec![img("a", vec![det(bx(0.0, 0.0, 10.0, 10.0), &[0.9, 0.0])])];
        let r = evaluate(&dets, &gts, &vocab(), &EvalConfig::default()).unwrap();
        let by_name: HashMap<&str, Option<f64>> = r
            .per_size
            .iter()
            .map(|s| (s.range.as_str(), s.ap))
            .collect();
        assert_eq!(by_name["small"], Some(1.0));
        assert_eq!(by_name["medium"], None);
        assert_eq!(by_name["large"], None);
    }

    #[test]
    fn empty_ground_truth_is_error() {
        assert!(matches!(
            evaluate(&[], &[], &vocab(), &EvalConfig::default()),
            Err(Error::EmptyGroundTruth)
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = EvalConfig::default();
        c.iou_thresholds = vec![0.7, 0.5];
        assert!(c.validate().is_err());
        c.iou_thresholds = vec![0.5];
        c.recall_points = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn max_detections_applied() {
        let gts = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), 0)];
        let dets = vec![img(
            "a",
            vec![
                det(bx(50.0, 50.0, 10.0, 10.0), &[0.9, 0.0]),
                det(bx(0.0, 0.0, 10.0, 10.0), &[0.5, 0.0]),
            ],
        )];
        let cfg = EvalConfig {
            max_detections: 1,
            ..EvalConfig::single_threshold(0.5)
        };
        let r = evaluate(&dets, &gts, &vocab(), &cfg).unwrap();
        assert_eq!(r.per_class[0].recall, Some(0.0));
    }

    #[test]
    fn change_stats_population() {
        let s = ScoreChangeStats::from_changes(&[0.1, -0.1]);
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.max, 0.1);
        assert_eq!(s.min, -0.1);
        assert!((s.std_dev - 0.1).abs() < 1e-15);
        assert_eq!(s.count, 2);
    }

    #[test]
    fn change_stats_unchanged_is_zero() {
        let (dets, _) = perfect_fixture();
        let deltas: Vec<ScoreDelta> = dets
            .iter()
            .flat_map(|img| {
                img.detections.iter().enumerate().flat_map(move |(i, d)| {
                    d.scores.iter().enumerate().map(move |(c, &s)| ScoreDelta {
                        image_id: img.image_id.clone(),
                        det_index: i,
                        class: c,
                        before: s,
                        after: s,
                    })
                })
            })
            .collect();
        let s = score_change_stats_from_deltas(&dets, &deltas, 100, None).unwrap();
        assert_eq!(
            (s.mean, s.max, s.min, s.std_dev, s.count),
            (0.0, 0.0, 0.0, 0.0, 4)
        );

        let mut bad = deltas.clone();
        bad[0].before = 0.123;
        assert!(matches!(
            score_change_stats_from_deltas(&dets, &bad, 100, None),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            score_change_stats_from_deltas(&dets, &deltas[2..], 100, None),
            Err(Error::Alignment(_))
        ));
    }
}
