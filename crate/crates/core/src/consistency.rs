//! The semantic consistency matrix shared by every builder.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::{read_json, write_json};
use crate::model::LabelVocabulary;

/// Which builder produced a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Frequency,
    KnowledgeGraph,
    Hybrid,
}

/// Symmetric nonnegative L×L matrix over a label vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyMatrix {
    values: Vec<Vec<f64>>,
    vocab: LabelVocabulary,
    source: SourceTag,
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background: Option<String>,
    source: SourceTag,
    values: Vec<Vec<f64>>,
}

impl ConsistencyMatrix {
    pub fn new(values: Vec<Vec<f64>>, vocab: LabelVocabulary, source: SourceTag) -> Result<Self> {
        let n = vocab.len();
        if values.len() != n || values.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "consistency matrix must be {n}x{n} to match the vocabulary"
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[i][j];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Validation(format!(
                        "consistency value [{i}][{j}] = {v} is not a finite nonnegative number"
                    )));
                }
                if v != values[j][i] {
                    return Err(Error::Validation(format!(
                        "consistency matrix not symmetric at [{i}][{j}]: {v} vs {}",
                        values[j][i]
                    )));
                }
            }
        }
        Ok(Self {
            values,
            vocab,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, l: usize, m: usize) -> f64 {
        self.values[l][m]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Σ over the row; the weight of a label's fidelity term.
    pub fn row_sum(&self, l: usize) -> f64 {
        self.values[l].iter().sum()
    }

    pub fn vocab(&self) -> &LabelVocabulary {
        &self.vocab
    }

    pub fn source(&self) -> SourceTag {
        self.source
    }

    /// Reads the JSON form. Labels in the file become the vocabulary.
    pub fn load(path: &Path) -> Result<Self> {
        let file: MatrixFile = read_json(path)?;
        let mut vocab = LabelVocabulary::new(file.labels)?;
        if let Some(bg) = &file.background {
            vocab = vocab.with_background(bg)?;
        }
        Self::new(file.values, vocab, file.source)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.file())
    }

    fn file(&self) -> MatrixFile {
        MatrixFile {
            labels: self.vocab.labels().to_vec(),
            background: self
                .vocab
                .background()
                .map(|b| self.vocab.label(b).to_owned()),
            source: self.source,
            values: self.values.clone(),
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.file())?)
    }

    /// CSV with a header row of labels; each row starts with its label.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![String::from("label")];
        header.extend(self.vocab.labels().iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.vocab.labels().iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Checks that this matrix is indexed by the same labels as `vocab`.
    pub fn check_vocab(&self, vocab: &LabelVocabulary) -> Result<()> {
        if self.vocab.labels() != vocab.labels() {
            return Err(Error::VocabularyMismatch(format!(
                "consistency matrix labels {:?} differ from detection vocabulary {:?}",
                self.vocab.labels(),
                vocab.labels()
            )));
        }
        Ok(())
    }
}
