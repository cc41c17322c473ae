//! Evaluation subsets and large-box trimming.

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, BBox, Corpus, PairRef, SentenceAnnotation};
use crate::error::{Error, Result};
use crate::saliency::segmentation_label;

/// Region names that denote a whole lung.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LungNames {
    pub left: Vec<String>,
    pub right: Vec<String>,
}

impl Default for LungNames {
    fn default() -> Self {
        Self {
            left: vec!["left lung".into()],
            right: vec!["right lung".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    All,
    Abnormal,
    OneLung,
    Mdrb,
}

impl Subset {
    pub fn name(&self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Abnormal => "abnormal",
            Subset::OneLung => "one-lung",
            Subset::Mdrb => "mdrb",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Subset::All),
            "abnormal" => Ok(Subset::Abnormal),
            "one-lung" => Ok(Subset::OneLung),
            "mdrb" => Ok(Subset::Mdrb),
            other => Err(Error::invalid(format!("unknown subset `{other}`"))),
        }
    }
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const MDRB_FRACTION: f64 = 0.10;

/// Pairs of `corpus` in the given subset, in corpus order.
pub fn select(corpus: &Corpus, subset: Subset) -> Vec<PairRef> {
    match subset {
        Subset::All => corpus.all_pairs(),
        Subset::Abnormal => filter_abnormal(corpus),
        Subset::OneLung => filter_one_lung(corpus, &LungNames::default()),
        Subset::Mdrb => filter_mdrb(corpus, MDRB_FRACTION),
    }
}

/// Sentences carrying a positive-context condition.
pub fn filter_abnormal(corpus: &Corpus) -> Vec<PairRef> {
    corpus
        .all_pairs()
        .into_iter()
        .filter(|&p| corpus.sentence(p).abnormal())
        .collect()
}

/// Sentences whose boxes include exactly one of the two whole-lung boxes.
pub fn filter_one_lung(corpus: &Corpus, lungs: &LungNames) -> Vec<PairRef> {
    corpus
        .all_pairs()
        .into_iter()
        .filter(|&p| {
            let names = corpus.sentence(p).region_names();
            let left = names.iter().any(|n| lungs.left.iter().any(|l| l == n));
            let right = names.iter().any(|n| lungs.right.iter().any(|r| r == n));
            left != right
        })
        .collect()
}

/// Mean pairwise IOU of the sentence labels of one instance, `None` for
/// single-sentence reports.
pub fn report_mean_iou(corpus: &Corpus, instance: usize) -> Option<f64> {
    let inst = &corpus.instances[instance];
    if inst.report.len() < 2 {
        return None;
    }
    let out = (inst.image.height(), inst.image.width());
    let labels: Vec<_> = inst
        .report
        .iter()
        .map(|s| segmentation_label(&s.bboxes, out))
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..labels.len() {
        for b in a + 1..labels.len() {
            total += labels[a].iou(&labels[b]);
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// All sentences of the instances whose reports have the smallest mean pairwise
/// label IOU. The cut keeps the `ceil(fraction * eligible)` lowest instances plus
/// anything tied with the last one kept.
pub fn filter_mdrb(corpus: &Corpus, fraction: f64) -> Vec<PairRef> {
    let scored: Vec<(usize, f64)> = (0..corpus.instances.len())
        .filter_map(|i| report_mean_iou(corpus, i).map(|m| (i, m)))
        .collect();
    if scored.is_empty() || fraction <= 0.0 {
        return Vec::new();
    }
    let mut means: Vec<f64> = scored.iter().map(|&(_, m)| m).collect();
    means.sort_by(f64::total_cmp);
    let keep = ((fraction * scored.len() as f64).ceil() as usize).clamp(1, scored.len());
    let threshold = means[keep - 1];
    scored
        .into_iter()
        .filter(|&(_, m)| m <= threshold)
        .flat_map(|(i, _)| {
            (0..corpus.instances[i].report.len()).map(move |s| PairRef { instance: i, sentence: s })
        })
        .collect()
}

fn names_side(region: &str, side: &str) -> bool {
    tokenize(region).iter().any(|t| t == side)
}

/// Drops a whole-lung box when another box in the same label names the same side.
pub fn trim_boxes(boxes: &[BBox], lungs: &LungNames) -> Vec<BBox> {
    let redundant = |b: &BBox, names: &[String], side: &str| {
        names.contains(&b.region_name)
            && boxes
                .iter()
                .any(|o| !names.contains(&o.region_name) && names_side(&o.region_name, side))
    };
    boxes
        .iter()
        .filter(|b| !redundant(b, &lungs.left, "left") && !redundant(b, &lungs.right, "right"))
        .cloned()
        .collect()
}

pub fn trim_large_bboxes(ann: &SentenceAnnotation) -> SentenceAnnotation {
    trim_large_bboxes_with(ann, &LungNames::default())
}

pub fn trim_large_bboxes_with(ann: &SentenceAnnotation, lungs: &LungNames) -> SentenceAnnotation {
    let mut out = ann.clone();
    out.bboxes = trim_boxes(&ann.bboxes, lungs);
    out
}
