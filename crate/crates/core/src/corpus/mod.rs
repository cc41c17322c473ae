//! Corpus data model, the validated JSON loader, and the synthetic generator.
//!
//! A corpus file is UTF-8 JSON of the form
//! `{"instances": [...], "conditions": [...], "regions": [...]}`; the full schema
//! ships as `schema/corpus.schema.json` in this crate.

mod image;
mod synthetic;

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image::GrayImage;
pub use synthetic::{generate_synthetic_corpus, GeneratorConfig, LesionStyle, Side, Zone};

/// Lowercases and splits on whitespace and punctuation. Punctuation characters are
/// kept as single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Axis-aligned box in pixel coordinates, half-open: `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    #[serde(rename = "region")]
    pub region_name: String,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(region_name: impl Into<String>, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self {
            region_name: region_name.into(),
            x0,
            y0,
            x1,
            y1,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as u64, col as u64);
        c >= u64::from(self.x0) && c < u64::from(self.x1) && r >= u64::from(self.y0) && r < u64::from(self.y1)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.x1.saturating_sub(self.x0)) * u64::from(self.y1.saturating_sub(self.y0))
    }

    pub fn is_well_formed(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.is_well_formed() && self.x1 as usize <= width && self.y1 as usize <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    Positive,
    Negative,
}

/// A condition asserted (positive) or negated (negative) in a sentence, with the
/// anatomical locations it is attached to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionMention {
    pub condition: String,
    pub context: Context,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regions: Vec<String>,
}

impl ConditionMention {
    pub fn positive(condition: impl Into<String>, regions: &[&str]) -> Self {
        Self {
            condition: condition.into(),
            context: Context::Positive,
            regions: regions.iter().map(|r| r.to_string()).collect(),
        }
    }

    pub fn negative(condition: impl Into<String>, regions: &[&str]) -> Self {
        Self {
            condition: condition.into(),
            context: Context::Negative,
            regions: regions.iter().map(|r| r.to_string()).collect(),
        }
    }
}

/// True iff any condition is mentioned in a positive context.
pub fn derive_abnormal(conditions: &[ConditionMention]) -> bool {
    conditions.iter().any(|c| c.context == Context::Positive)
}

/// One report sentence with its reference boxes and condition labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "SentenceRecord", into = "SentenceRecord")]
pub struct SentenceAnnotation {
    pub text: String,
    pub tokens: Vec<String>,
    pub bboxes: Vec<BBox>,
    pub conditions: Vec<ConditionMention>,
    /// Explicit abnormal label from an external export; `None` means derived.
    pub abnormal_override: Option<bool>,
}

impl SentenceAnnotation {
    pub fn new(text: impl Into<String>, bboxes: Vec<BBox>, conditions: Vec<ConditionMention>) -> Self {
        let text = text.into();
        Self {
            tokens: tokenize(&text),
            text,
            bboxes,
            conditions,
            abnormal_override: None,
        }
    }

    pub fn abnormal(&self) -> bool {
        self.abnormal_override
            .unwrap_or_else(|| derive_abnormal(&self.conditions))
    }

    /// Replaces the sentence text and re-tokenizes.
    pub fn set_text(&mut self, text: impl Into<String>) {
        self.text = text.into();
        self.tokens = tokenize(&self.text);
    }

    pub fn region_names(&self) -> BTreeSet<&str> {
        self.bboxes.iter().map(|b| b.region_name.as_str()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    text: String,
    #[serde(default)]
    bboxes: Vec<BBox>,
    #[serde(default)]
    conditions: Vec<ConditionMention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    abnormal: Option<bool>,
}

impl From<SentenceRecord> for SentenceAnnotation {
    fn from(rec: SentenceRecord) -> Self {
        let mut s = SentenceAnnotation::new(rec.text, rec.bboxes, rec.conditions);
        s.abnormal_override = rec.abnormal;
        s
    }
}

impl From<SentenceAnnotation> for SentenceRecord {
    fn from(s: SentenceAnnotation) -> Self {
        SentenceRecord {
            text: s.text,
            bboxes: s.bboxes,
            conditions: s.conditions,
            abnormal: s.abnormal_override,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Gold,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Gold => "gold",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "id")]
    pub instance_id: String,
    pub split: Split,
    pub image: GrayImage,
    pub report: Vec<SentenceAnnotation>,
}

impl Instance {
    fn validate(&self) -> Result<()> {
        let id = Some(self.instance_id.as_str());
        if self.report.is_empty() {
            return Err(Error::validation(id, "report is empty"));
        }
        let (w, h) = (self.image.width(), self.image.height());
        for (k, sentence) in self.report.iter().enumerate() {
            for b in &sentence.bboxes {
                if !b.is_well_formed() {
                    return Err(Error::validation(
                        id,
                        format!("sentence {k}: box `{}` has x0 >= x1 or y0 >= y1", b.region_name),
                    ));
                }
                if !b.fits(w, h) {
                    return Err(Error::validation(
                        id,
                        format!(
                            "sentence {k}: box `{}` ({},{})-({},{}) exceeds the {w}x{h} image",
                            b.region_name, b.x0, b.y0, b.x1, b.y1
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Key of one evaluation pair: a sentence within an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairRef {
    pub instance: usize,
    pub sentence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    #[serde(rename = "conditions")]
    pub condition_vocabulary: BTreeSet<String>,
    #[serde(rename = "regions")]
    pub region_vocabulary: BTreeSet<String>,
}

impl Corpus {
    /// Checks every corpus and instance invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for inst in &self.instances {
            let id = Some(inst.instance_id.as_str());
            if !seen.insert(inst.instance_id.as_str()) {
                return Err(Error::validation(id, "duplicate instance_id"));
            }
            inst.validate()?;
            for s in &inst.report {
                for b in &s.bboxes {
                    if !self.region_vocabulary.contains(&b.region_name) {
                        return Err(Error::validation(
                            id,
                            format!("region `{}` missing from the region vocabulary", b.region_name),
                        ));
                    }
                }
                for c in &s.conditions {
                    if !self.condition_vocabulary.contains(&c.condition) {
                        return Err(Error::validation(
                            id,
                            format!("condition `{}` missing from the condition vocabulary", c.condition),
                        ));
                    }
                    if let Some(r) = c.regions.iter().find(|r| !self.region_vocabulary.contains(*r)) {
                        return Err(Error::validation(
                            id,
                            format!("region `{r}` missing from the region vocabulary"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let corpus: Corpus = serde_json::from_str(json)?;
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string(self).expect("corpus serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        crate::seed::content_hash(self.to_json_string().as_bytes())
    }

    pub fn instances_in(&self, split: Split) -> impl Iterator<Item = (usize, &Instance)> {
        self.instances
            .iter()
            .enumerate()
            .filter(move |(_, inst)| inst.split == split)
    }

    /// Every (instance, sentence) pair, in file order.
    pub fn all_pairs(&self) -> Vec<PairRef> {
        self.instances
            .iter()
            .enumerate()
            .flat_map(|(i, inst)| (0..inst.report.len()).map(move |s| PairRef { instance: i, sentence: s }))
            .collect()
    }

    pub fn pairs_in(&self, split: Split) -> Vec<PairRef> {
        self.all_pairs()
            .into_iter()
            .filter(|p| self.instances[p.instance].split == split)
            .collect()
    }

    pub fn sentence(&self, pair: PairRef) -> &SentenceAnnotation {
        &self.instances[pair.instance].report[pair.sentence]
    }

    /// A corpus restricted to one split, with the same vocabularies.
    pub fn split_view(&self, split: Split) -> Corpus {
        Corpus {
            instances: self
                .instances
                .iter()
                .filter(|i| i.split == split)
                .cloned()
                .collect(),
            condition_vocabulary: self.condition_vocabulary.clone(),
            region_vocabulary: self.region_vocabulary.clone(),
        }
    }

    pub fn find(&self, instance_id: &str) -> Option<usize> {
        self.instances
            .iter()
            .position(|i| i.instance_id == instance_id)
    }
}

/// Reads and validates a corpus file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    Corpus::from_json_str(&text)
}
