//! Detection data model and label vocabulary.
//!
//! Any backbone feeds the engine through these types: a box with a dense
//! per-class score vector, grouped per image. Ranking a detection always uses
//! the maximum of its score vector, skipping the background class when the
//! vocabulary declares one.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered class names; the position of a label is its class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary", into = "RawVocabulary")]
pub struct LabelVocabulary {
    labels: Vec<String>,
    concept_map: Option<BTreeMap<String, String>>,
    background: Option<usize>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawVocabulary {
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    concept_map: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background: Option<String>,
}

impl TryFrom<RawVocabulary> for LabelVocabulary {
    type Error = Error;

    fn try_from(raw: RawVocabulary) -> Result<Self> {
        let mut vocab = LabelVocabulary::new(raw.labels)?;
        if let Some(map) = raw.concept_map {
            vocab = vocab.with_concept_map(map)?;
        }
        if let Some(bg) = raw.background {
            vocab = vocab.with_background(&bg)?;
        }
        Ok(vocab)
    }
}

impl From<LabelVocabulary> for RawVocabulary {
    fn from(v: LabelVocabulary) -> Self {
        let background = v.background.map(|i| v.labels[i].clone());
        RawVocabulary {
            labels: v.labels,
            concept_map: v.concept_map,
            background,
        }
    }
}

impl LabelVocabulary {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::Validation(format!("label {i} is empty")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate label `{label}`")));
            }
        }
        Ok(Self {
            labels,
            concept_map: None,
            background: None,
            index,
        })
    }

    /// Attaches a label → graph-concept map. Its keys must be exactly the label set.
    pub fn with_concept_map(mut self, map: BTreeMap<String, String>) -> Result<Self> {
        let missing: Vec<&str> = self
            .labels
            .iter()
            .filter(|l| !map.contains_key(*l))
            .map(String::as_str)
            .collect();
        let extra: Vec<&str> = map
            .keys()
            .filter(|k| !self.index.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::VocabularyMismatch(format!(
                "concept map keys differ from labels (missing: {missing:?}, unknown: {extra:?})"
            )));
        }
        self.concept_map = Some(map);
        Ok(self)
    }

    /// Maps every label to itself as its concept id.
    pub fn with_identity_concepts(self) -> Self {
        let map = self.labels.iter().map(|l| (l.clone(), l.clone())).collect();
        Self {
            concept_map: Some(map),
            ..self
        }
    }

    pub fn with_background(mut self, label: &str) -> Result<Self> {
        let idx = self.index_of(label).ok_or_else(|| {
            Error::VocabularyMismatch(format!("background label `{label}` not in vocabulary"))
        })?;
        self.background = Some(idx);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, class_id: usize) -> &str {
        &self.labels[class_id]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn concept_map(&self) -> Option<&BTreeMap<String, String>> {
        self.concept_map.as_ref()
    }

    pub fn concept_of(&self, class_id: usize) -> Option<&str> {
        self.concept_map
            .as_ref()
            .and_then(|m| m.get(&self.labels[class_id]))
            .map(String::as_str)
    }

    pub fn background(&self) -> Option<usize> {
        self.background
    }

    /// Class ids that take part in ranking and re-optimization.
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.labels.len()).filter(move |&i| Some(i) != self.background)
    }
}

/// Axis-aligned box in pixels: top-left corner plus width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from corner coordinates `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite()) {
            return Err(Error::Validation(format!(
                "box origin must be finite, got ({}, {})",
                self.x, self.y
            )));
        }
        if !(self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite()) {
            return Err(Error::Validation(format!(
                "degenerate box: w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        BoundingBox::new(x, y, w, h).map_err(serde::de::Error::custom)
    }
}

/// One box with its full per-class score vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "bbox")]
    pub bbox: BoundingBox,
    pub scores: Vec<f64>,
}

impl Detection {
    pub fn new(bbox: BoundingBox, scores: Vec<f64>) -> Self {
        Self { bbox, scores }
    }

    /// Highest-scoring class and its score, ignoring `background`.
    /// Ties go to the lowest class id.
    pub fn top_class(&self, background: Option<usize>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (l, &s) in self.scores.iter().enumerate() {
            if Some(l) == background {
                continue;
            }
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((l, s));
            }
        }
        best
    }

    /// Score used for ranking: the maximum over foreground classes.
    pub fn rank_score(&self, background: Option<usize>) -> f64 {
        self.top_class(background).map_or(0.0, |(_, s)| s)
    }
}

/// All detections for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    #[serde(rename = "width")]
    pub image_width: f64,
    #[serde(rename = "height")]
    pub image_height: f64,
    pub detections: Vec<Detection>,
}

impl ImageDetections {
    /// Checks the image and every detection against `vocab`.
    pub fn validate(&self, vocab: &LabelVocabulary) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::Validation("image_id must be non-empty".into()));
        }
        for (i, det) in self.detections.iter().enumerate() {
            if det.scores.len() != vocab.len() {
                return Err(Error::VocabularyMismatch(format!(
                    "image `{}` detection {i}: {} scores for a vocabulary of {}",
                    self.image_id,
                    det.scores.len(),
                    vocab.len()
                )));
            }
            if let Some((l, s)) = det
                .scores
                .iter()
                .enumerate()
                .find(|(_, s)| !(0.0..=1.0).contains(*s))
            {
                return Err(Error::Validation(format!(
                    "image `{}` detection {i}: score {s} for class {l} outside [0, 1]",
                    self.image_id
                )));
            }
            det.bbox.validate().map_err(|e| {
                Error::Validation(format!("image `{}` detection {i}: {e}", self.image_id))
            })?;
        }
        Ok(())
    }
}

/// One annotated object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// Indices of the `k` highest-ranked detections, in original order.
/// Ties are broken by original index (earlier wins).
pub fn top_k_indices(dets: &ImageDetections, k: usize, background: Option<usize>) -> Vec<usize> {
    let n = dets.detections.len();
    if k >= n {
        return (0..n).collect();
    }
    let scores: Vec<f64> = dets
        .detections
        .iter()
        .map(|d| d.rank_score(background))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps index order among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Keeps the `k` highest-ranked detections of an image.
pub fn top_k_by_score(
    dets: &ImageDetections,
    k: usize,
    background: Option<usize>,
) -> ImageDetections {
    let kept = top_k_indices(dets, k, background);
    ImageDetections {
        image_id: dets.image_id.clone(),
        image_width: dets.image_width,
        image_height: dets.image_height,
        detections: kept.iter().map(|&i| dets.detections[i].clone()).collect(),
    }
}
