//! File formats through which backbones and annotation sets reach the engine.
//!
//! * detections: `{ "vocabulary": [...], "images": [ { "image_id", "width", "height",
//!   "detections": [ { "bbox": [x, y, w, h], "scores": [...] } ] } ] }`
//! * ground truth: COCO-style instances (`images`, `annotations`, `categories`);
//!   only ids, file names, `bbox`, `category_id` and category `name` are read
//! * vocabulary: `{ "labels": [...], "concept_map": {...}, "background": "..." }`

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{BoundingBox, GroundTruthInstance, ImageDetections, LabelVocabulary};

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    BufReader::new(file)
        .read_to_string(&mut text)
        .map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, &e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct DetectionsFile {
    vocabulary: Vec<String>,
    images: Vec<ImageDetections>,
}

/// Reads a detections file together with the vocabulary it declares.
pub fn read_detections(path: &Path) -> Result<(LabelVocabulary, Vec<ImageDetections>)> {
    let file: DetectionsFile = read_json(path)?;
    let vocab = LabelVocabulary::new(file.vocabulary)?;
    for img in &file.images {
        img.validate(&vocab)?;
    }
    Ok((vocab, file.images))
}

/// Reads a detections file and checks it against `vocab`.
pub fn load_detections(path: &Path, vocab: &LabelVocabulary) -> Result<Vec<ImageDetections>> {
    let file: DetectionsFile = read_json(path)?;
    if file.vocabulary != vocab.labels() {
        return Err(Error::VocabularyMismatch(format!(
            "{} declares {:?}, expected {:?}",
            path.display(),
            file.vocabulary,
            vocab.labels()
        )));
    }
    for img in &file.images {
        img.validate(vocab)?;
    }
    Ok(file.images)
}

/// Serializes detections; scores use the shortest round-trip decimal form.
pub fn detections_to_writer<W: Write>(
    writer: W,
    vocab: &LabelVocabulary,
    images: &[ImageDetections],
) -> Result<()> {
    #[derive(Serialize)]
    struct Out<'a> {
        vocabulary: &'a [String],
        images: &'a [ImageDetections],
    }
    serde_json::to_writer_pretty(
        writer,
        &Out {
            vocabulary: vocab.labels(),
            images,
        },
    )?;
    Ok(())
}

pub fn write_detections(
    path: &Path,
    vocab: &LabelVocabulary,
    images: &[ImageDetections],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    detections_to_writer(&mut w, vocab, images)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_vocabulary(path: &Path) -> Result<LabelVocabulary> {
    read_json(path)
}

#[derive(Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: Value,
    #[serde(default)]
    file_name: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: Value,
    bbox: [f64; 4],
    category_id: Value,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: Value,
    name: String,
}

fn id_key(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Image identifier used to link annotations with detections: the file stem
/// of `file_name` when present, otherwise the COCO id itself.
fn image_key(img: &CocoImage) -> String {
    img.file_name
        .as_deref()
        .and_then(|f| Path::new(f).file_stem())
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .unwrap_or_else(|| id_key(&img.id))
}

/// COCO-style ground truth: one entry per image id plus the instance list.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Every image listed in the file, in file order.
    pub image_ids: Vec<String>,
    pub instances: Vec<GroundTruthInstance>,
}

/// Loads COCO-style instances, resolving category names against `vocab`.
pub fn load_ground_truth(path: &Path, vocab: &LabelVocabulary) -> Result<Vec<GroundTruthInstance>> {
    Ok(load_ground_truth_file(path, vocab)?.instances)
}

pub fn load_ground_truth_file(path: &Path, vocab: &LabelVocabulary) -> Result<GroundTruth> {
    let coco: CocoFile = read_json(path)?;
    let category_names: HashMap<String, &str> = coco
        .categories
        .iter()
        .map(|c| (id_key(&c.id), c.name.as_str()))
        .collect();
    let image_names: HashMap<String, String> = coco
        .images
        .iter()
        .map(|img| (id_key(&img.id), image_key(img)))
        .collect();

    let mut instances = Vec::with_capacity(coco.annotations.len());
    let mut offending = BTreeSet::new();
    for (i, ann) in coco.annotations.iter().enumerate() {
        let cat = id_key(&ann.category_id);
        let class_id = match category_names.get(&cat) {
            Some(name) => match vocab.index_of(name) {
                Some(idx) => idx,
                None => {
                    offending.insert(name.to_string());
                    continue;
                }
            },
            None => {
                offending.insert(format!("<category id {cat}>"));
                continue;
            }
        };
        let [x, y, w, h] = ann.bbox;
        let bbox = BoundingBox::new(x, y, w, h)
            .map_err(|e| Error::Validation(format!("annotation {i}: {e}")))?;
        let key = id_key(&ann.image_id);
        let image_id = image_names.get(&key).cloned().unwrap_or(key);
        instances.push(GroundTruthInstance {
            image_id,
            bbox,
            class_id,
        });
    }
    if !offending.is_empty() {
        return Err(Error::VocabularyMismatch(format!(
            "{}: classes not in vocabulary: {}",
            path.display(),
            offending.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let image_ids = coco.images.iter().map(image_key).collect();
    Ok(GroundTruth {
        image_ids,
        instances,
    })
}

/// Vocabulary made of a COCO file's category names, ordered by category id.
pub fn vocabulary_from_ground_truth(path: &Path) -> Result<LabelVocabulary> {
    let coco: CocoFile = read_json(path)?;
    let mut cats: Vec<(Value, String)> = coco
        .categories
        .into_iter()
        .map(|c| (c.id, c.name))
        .collect();
    cats.sort_by(|a, b| match (a.0.as_u64(), b.0.as_u64()) {
        (Some(x), Some(y)) => x.cmp(&y),
        _ => id_key(&a.0).cmp(&id_key(&b.0)),
    });
    LabelVocabulary::new(cats.into_iter().map(|(_, n)| n))
}

/// Writes ground truth in the COCO-style layout read by [`load_ground_truth`].
/// Image ids are written as `file_name` so that they round-trip unchanged.
pub fn write_ground_truth(
    path: &Path,
    vocab: &LabelVocabulary,
    image_ids: &[String],
    instances: &[GroundTruthInstance],
) -> Result<()> {
    let index: HashMap<&str, usize> = image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i + 1))
        .collect();
    let images: Vec<Value> = image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| serde_json::json!({ "id": i + 1, "file_name": id }))
        .collect();
    let mut annotations = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let image = *index.get(inst.image_id.as_str()).ok_or_else(|| {
            Error::Validation(format!(
                "instance {i}: image `{}` not listed",
                inst.image_id
            ))
        })?;
        annotations.push(serde_json::json!({
            "id": i + 1,
            "image_id": image,
            "bbox": inst.bbox.to_array(),
            "category_id": inst.class_id + 1,
        }));
    }
    let categories: Vec<Value> = vocab
        .labels()
        .iter()
        .enumerate()
        .map(|(i, name)| serde_json::json!({ "id": i + 1, "name": name }))
        .collect();
    write_json(
        path,
        &serde_json::json!({
            "images": images,
            "annotations": annotations,
            "categories": categories,
        }),
    )
}
