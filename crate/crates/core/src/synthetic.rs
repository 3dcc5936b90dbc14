//! Seeded synthetic datasets: ground truth drawn from a few scene types with
//! characteristic label mixes, plus noisy detector output over it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, Detection, GroundTruthInstance, ImageDetections, LabelVocabulary};

const LABELS: [&str; 6] = ["car", "truck", "bus", "person", "rider", "bicycle"];
// labels that tend to appear together
const SCENES: [&[usize]; 3] = [&[0, 1, 2], &[3, 4, 5], &[0, 3, 5]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub images: usize,
    pub seed: u64,
    pub max_objects: usize,
    pub false_positives: usize,
    pub image_size: f64,
    /// Chance that a detection puts most of its mass on a wrong class.
    pub confusion: f64,
    /// Std-dev-like jitter of detection boxes, as a fraction of box size.
    pub box_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 20,
            seed: 0,
            max_objects: 6,
            false_positives: 2,
            image_size: 512.0,
            confusion: 0.25,
            box_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub vocab: LabelVocabulary,
    pub image_ids: Vec<String>,
    pub ground_truth: Vec<GroundTruthInstance>,
    pub detections: Vec<ImageDetections>,
}

fn random_box(rng: &mut ChaCha8Rng, size: f64) -> BoundingBox {
    let w = rng.gen_range(0.04..0.35) * size;
    let h = rng.gen_range(0.04..0.35) * size;
    let x = rng.gen_range(0.0..size - w);
    let y = rng.gen_range(0.0..size - h);
    BoundingBox::new(x, y, w, h).expect("positive extent")
}

fn jitter(rng: &mut ChaCha8Rng, b: &BoundingBox, amount: f64) -> BoundingBox {
    let mut j = |v: f64, scale: f64| v + rng.gen_range(-amount..=amount) * scale;
    let x = j(b.x, b.w);
    let y = j(b.y, b.h);
    let w = j(b.w, b.w).max(1.0);
    let h = j(b.h, b.h).max(1.0);
    BoundingBox::new(x, y, w, h).expect("positive extent")
}

/// Dense score vector summing to at most one with `peak` on `class`.
fn scores_for(rng: &mut ChaCha8Rng, n: usize, class: usize, peak: f64) -> Vec<f64> {
    let mut rest: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    rest[class] = 0.0;
    let total: f64 = rest.iter().sum();
    let spare = (1.0 - peak) * rng.gen_range(0.3..1.0);
    let mut s: Vec<f64> = rest
        .iter()
        .map(|r| if total > 0.0 { r / total * spare } else { 0.0 })
        .collect();
    s[class] = peak;
    s
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    if cfg.images == 0 || cfg.max_objects == 0 {
        return Err(Error::Config(
            "synthetic dataset needs images and objects".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.confusion) || !(cfg.image_size > 16.0) {
        return Err(Error::Config(
            "confusion must lie in [0, 1] and image_size exceed 16".into(),
        ));
    }
    let vocab = LabelVocabulary::new(LABELS)?;
    let n = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut image_ids = Vec::with_capacity(cfg.images);
    let mut ground_truth = Vec::new();
    let mut detections = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let id = format!("img_{i:04}");
        let scene = SCENES[rng.gen_range(0..SCENES.len())];
        let count = rng.gen_range(1..=cfg.max_objects);
        let mut dets = Vec::new();
        for _ in 0..count {
            let class = *scene.choose(&mut rng).expect("non-empty scene");
            let gt_box = random_box(&mut rng, cfg.image_size);
            ground_truth.push(GroundTruthInstance {
                image_id: id.clone(),
                bbox: gt_box,
                class_id: class,
            });
            let shown = if rng.gen_bool(cfg.confusion) {
                rng.gen_range(0..n)
            } else {
                class
            };
            let peak = rng.gen_range(0.3..0.95);
            let mut scores = scores_for(&mut rng, n, shown, peak);
            if shown != class {
                // the true class keeps a sizeable runner-up share
                let share = (1.0 - peak).min(scores[class] + rng.gen_range(0.0..0.3));
                let others: f64 = scores
                    .iter()
                    .enumerate()
                    .filter(|&(l, _)| l != shown && l != class)
                    .map(|(_, v)| v)
                    .sum();
                let room = (1.0 - peak - share).max(0.0);
                for (l, v) in scores.iter_mut().enumerate() {
                    if l != shown && l != class && others > 0.0 {
                        *v *= (room / others).min(1.0);
                    }
                }
                scores[class] = share;
            }
            dets.push(Detection::new(
                jitter(&mut rng, &gt_box, cfg.box_jitter),
                scores,
            ));
        }
        for _ in 0..cfg.false_positives {
            let class = rng.gen_range(0..n);
            let peak = rng.gen_range(0.05..0.6);
            let scores = scores_for(&mut rng, n, class, peak);
            dets.push(Detection::new(random_box(&mut rng, cfg.image_size), scores));
        }
        dets.shuffle(&mut rng);
        detections.push(ImageDetections {
            image_id: id.clone(),
            image_width: cfg.image_size,
            image_height: cfg.image_size,
            detections: dets,
        });
        image_ids.push(id);
    }
    Ok(SyntheticDataset {
        vocab,
        image_ids,
        ground_truth,
        detections,
    })
}
