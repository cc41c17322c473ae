//! Seeded synthetic chest-film corpus.
//!
//! Each image shows two lung fields on a dark background. Lesions are bright
//! Gaussian blobs placed in named zones (left/right x upper/mid/lower); every
//! lesion produces a positive sentence boxed by its zone, and absent conditions
//! may produce negative sentences boxed by both lungs. Following the radiological
//! convention, the patient's right lung is on the image's left.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{BBox, ConditionMention, Corpus, GrayImage, Instance, SentenceAnnotation, Split};
use crate::error::{Error, Result};
use crate::seed;
use crate::synthtext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub name: String,
    pub side: Side,
    pub rect: [u32; 4],
}

impl Zone {
    fn bbox(&self) -> BBox {
        let [x0, y0, x1, y1] = self.rect;
        BBox::new(self.name.clone(), x0, y0, x1, y1)
    }
}

/// Appearance of a lesion-producing condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionStyle {
    pub condition: String,
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub left_lung: String,
    pub right_lung: String,
    pub zones: Vec<Zone>,
    pub lesions: Vec<LesionStyle>,
    /// Conditions only ever mentioned negatively.
    pub negative_only: Vec<String>,
    pub train: usize,
    pub valid: usize,
    pub gold: usize,
    pub max_lesions: usize,
    pub max_negative_sentences: usize,
    /// Probability that a lesion sentence also lists the whole lung on its side.
    pub lung_box_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::with_size(64, 64)
    }
}

impl GeneratorConfig {
    /// Default 2x3 zone layout scaled to the given image size.
    pub fn with_size(width: usize, height: usize) -> Self {
        let (w, h) = (width as u32, height as u32);
        let xs = [w / 8, w / 2, w - w / 8];
        let ys = [h / 8, 3 * h / 8, 5 * h / 8, h - h / 8];
        let mut zones = Vec::new();
        // image-left half holds the patient's right lung
        for (side, x0, x1) in [(Side::Right, xs[0], xs[1]), (Side::Left, xs[1], xs[2])] {
            let side_name = match side {
                Side::Left => "left",
                Side::Right => "right",
            };
            for (level, k) in [("upper", 0), ("mid", 1), ("lower", 2)] {
                zones.push(Zone {
                    name: format!("{side_name} {level} zone"),
                    side,
                    rect: [x0, ys[k], x1, ys[k + 1]],
                });
            }
        }
        let style = |c: &str, sigma: f64, intensity: f64| LesionStyle {
            condition: c.into(),
            sigma: sigma * w as f64 / 64.0,
            intensity,
        };
        Self {
            image_width: width,
            image_height: height,
            left_lung: "left lung".into(),
            right_lung: "right lung".into(),
            zones,
            lesions: vec![
                style("opacity", 4.0, 0.45),
                style("nodule", 2.0, 0.6),
                style("atelectasis", 3.0, 0.4),
                style("consolidation", 5.0, 0.5),
            ],
            negative_only: vec!["pneumothorax".into(), "effusion".into(), "edema".into()],
            train: 100,
            valid: 20,
            gold: 40,
            max_lesions: 3,
            max_negative_sentences: 2,
            lung_box_prob: 0.5,
        }
    }

    fn lung_rect(&self, side: Side) -> Option<[u32; 4]> {
        let rects: Vec<[u32; 4]> = self.zones.iter().filter(|z| z.side == side).map(|z| z.rect).collect();
        let first = *rects.first()?;
        Some(rects.iter().fold(first, |acc, r| {
            [acc[0].min(r[0]), acc[1].min(r[1]), acc[2].max(r[2]), acc[3].max(r[3])]
        }))
    }

    fn lung_bbox(&self, side: Side) -> Option<BBox> {
        let name = match side {
            Side::Left => &self.left_lung,
            Side::Right => &self.right_lung,
        };
        self.lung_rect(side)
            .map(|[x0, y0, x1, y1]| BBox::new(name.clone(), x0, y0, x1, y1))
    }

    fn validate(&self) -> Result<()> {
        if self.zones.is_empty() {
            return Err(Error::invalid("generator config has zero regions"));
        }
        if self.lesions.is_empty() && self.negative_only.is_empty() {
            return Err(Error::invalid("generator config has zero conditions"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::invalid("image size must be nonzero"));
        }
        for z in &self.zones {
            let b = z.bbox();
            if !b.fits(self.image_width, self.image_height) {
                return Err(Error::invalid(format!("zone `{}` does not fit the image", z.name)));
            }
        }
        if !(0.0..=1.0).contains(&self.lung_box_prob) {
            return Err(Error::invalid("lung_box_prob must be in [0, 1]"));
        }
        Ok(())
    }

    fn all_conditions(&self) -> Vec<String> {
        let mut all: Vec<String> = self.lesions.iter().map(|l| l.condition.clone()).collect();
        all.extend(self.negative_only.iter().cloned());
        all
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Lesion<'a> {
    zone: &'a Zone,
    style: &'a LesionStyle,
    center: (f64, f64),
}

fn render_image(cfg: &GeneratorConfig, lesions: &[Lesion<'_>], rng: &mut seed::Rng) -> Result<GrayImage> {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let lungs: Vec<BBox> = [Side::Right, Side::Left]
        .into_iter()
        .filter_map(|s| cfg.lung_bbox(s))
        .collect();
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let in_lung = lungs.iter().any(|b| b.contains(r, c));
            let base = if in_lung {
                0.30 + 0.08 * rng.gen::<f64>()
            } else {
                0.05 + 0.04 * rng.gen::<f64>()
            };
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let blobs: f64 = lesions
                .iter()
                .map(|l| {
                    let d2 = (x - l.center.0).powi(2) + (y - l.center.1).powi(2);
                    l.style.intensity * (-d2 / (2.0 * l.style.sigma * l.style.sigma)).exp()
                })
                .sum();
            data.push(quantize(base + blobs));
        }
    }
    GrayImage::new(w, h, data)
}

fn generate_instance(cfg: &GeneratorConfig, id: String, split: Split, seed: u64) -> Result<Instance> {
    let mut rng = seed::derived_rng(seed, &id);
    let n_lesions = rng.gen_range(0..=cfg.max_lesions.min(cfg.zones.len()));
    let n_lesions = if cfg.lesions.is_empty() { 0 } else { n_lesions };
    let zones: Vec<&Zone> = cfg.zones.choose_multiple(&mut rng, n_lesions).collect();

    let mut lesions = Vec::new();
    for zone in zones {
        let style = cfg.lesions.choose(&mut rng).expect("non-empty lesion styles");
        let [x0, y0, x1, y1] = zone.rect.map(f64::from);
        let margin_x = (style.sigma).min((x1 - x0) / 2.0 - 0.5).max(0.0);
        let margin_y = (style.sigma).min((y1 - y0) / 2.0 - 0.5).max(0.0);
        let cx = rng.gen_range(x0 + margin_x..=x1 - margin_x);
        let cy = rng.gen_range(y0 + margin_y..=y1 - margin_y);
        lesions.push(Lesion { zone, style, center: (cx, cy) });
    }
    let image = render_image(cfg, &lesions, &mut rng)?;

    let mut report = Vec::new();
    for l in &lesions {
        let mut bboxes = Vec::new();
        let mut regions = Vec::new();
        if rng.gen_bool(cfg.lung_box_prob) {
            if let Some(lung) = cfg.lung_bbox(l.zone.side) {
                regions.push(lung.region_name.clone());
                bboxes.push(lung);
            }
        }
        regions.push(l.zone.name.clone());
        bboxes.push(l.zone.bbox());
        let mention = ConditionMention {
            condition: l.style.condition.clone(),
            context: super::Context::Positive,
            regions,
        };
        let text = synthtext::synthesize_mentions(std::slice::from_ref(&mention))?;
        report.push(SentenceAnnotation::new(text, bboxes, vec![mention]));
    }

    let present: BTreeSet<&str> = lesions.iter().map(|l| l.style.condition.as_str()).collect();
    let absent: Vec<String> = cfg
        .all_conditions()
        .into_iter()
        .filter(|c| !present.contains(c.as_str()))
        .collect();
    let min_neg = usize::from(report.is_empty());
    let n_neg = rng
        .gen_range(min_neg..=cfg.max_negative_sentences.max(min_neg))
        .min(absent.len());
    let both: Vec<BBox> = [Side::Right, Side::Left]
        .into_iter()
        .filter_map(|s| cfg.lung_bbox(s))
        .collect();
    for condition in absent.choose_multiple(&mut rng, n_neg) {
        let mention = ConditionMention {
            condition: condition.clone(),
            context: super::Context::Negative,
            regions: both.iter().map(|b| b.region_name.clone()).collect(),
        };
        let text = synthtext::synthesize_mentions(std::slice::from_ref(&mention))?;
        report.push(SentenceAnnotation::new(text, both.clone(), vec![mention]));
    }
    if report.is_empty() {
        return Err(Error::invalid("generator produced an empty report; add conditions"));
    }
    report.shuffle(&mut rng);

    Ok(Instance {
        instance_id: id,
        split,
        image,
        report,
    })
}

/// Generates a corpus as a pure function of `(cfg, seed)`.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut instances = Vec::with_capacity(cfg.train + cfg.valid + cfg.gold);
    for (split, count) in [(Split::Train, cfg.train), (Split::Valid, cfg.valid), (Split::Gold, cfg.gold)] {
        for k in 0..count {
            let id = format!("syn-{split}-{k:05}");
            instances.push(generate_instance(cfg, id, split, seed)?);
        }
    }
    let mut regions: BTreeSet<String> = cfg.zones.iter().map(|z| z.name.clone()).collect();
    for side in [Side::Left, Side::Right] {
        if let Some(b) = cfg.lung_bbox(side) {
            regions.insert(b.region_name);
        }
    }
    let corpus = Corpus {
        instances,
        condition_vocabulary: cfg.all_conditions().into_iter().collect(),
        region_vocabulary: regions,
    };
    corpus.validate()?;
    Ok(corpus)
}

impl GeneratorConfig {
    /// Zone rectangles plus the derived whole-lung rectangles, by region name.
    pub fn region_rects(&self) -> Vec<BBox> {
        let mut out: Vec<BBox> = self.zones.iter().map(Zone::bbox).collect();
        out.extend([Side::Left, Side::Right].into_iter().filter_map(|s| self.lung_bbox(s)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Context;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            train: 12,
            valid: 3,
            gold: 5,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn default_layout() {
        let cfg = GeneratorConfig::default();
        assert_eq!(cfg.zones.len(), 6);
        let ll = cfg.zones.iter().find(|z| z.name == "left lower zone").unwrap();
        assert_eq!(ll.rect, [32, 40, 56, 56]);
        assert_eq!(cfg.lung_rect(Side::Left), Some([32, 8, 56, 56]));
        assert_eq!(cfg.lung_rect(Side::Right), Some([8, 8, 32, 56]));
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_corpus(&small(), 7).unwrap();
        let b = generate_synthetic_corpus(&small(), 7).unwrap();
        assert_eq!(a.to_json_string(), b.to_json_string());
        let c = generate_synthetic_corpus(&small(), 8).unwrap();
        assert_ne!(a.to_json_string(), c.to_json_string());
    }

    #[test]
    fn round_trips_through_json() {
        let a = generate_synthetic_corpus(&small(), 3).unwrap();
        let back = Corpus::from_json_str(&a.to_json_string()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn lesion_sentences_follow_templates() {
        let cfg = GeneratorConfig {
            lung_box_prob: 0.0,
            ..small()
        };
        let corpus = generate_synthetic_corpus(&cfg, 7).unwrap();
        let zone_boxes = cfg.region_rects();
        let mut saw_left_lower = false;
        for inst in &corpus.instances {
            for s in &inst.report {
                for b in &s.bboxes {
                    assert!(zone_boxes.contains(b), "{b:?} is not a layout rectangle");
                }
                let m = &s.conditions[0];
                if m.context == Context::Positive && m.regions == ["left lower zone"] {
                    assert_eq!(s.text, format!("There is {} in the left lower zone.", m.condition));
                    assert_eq!(s.bboxes, vec![BBox::new("left lower zone", 32, 40, 56, 56)]);
                    saw_left_lower = true;
                }
            }
        }
        assert!(saw_left_lower);
    }

    #[test]
    fn lesion_free_instances_are_all_negative() {
        let corpus = generate_synthetic_corpus(&small(), 11).unwrap();
        let mut checked = 0;
        for inst in &corpus.instances {
            let positives = inst
                .report
                .iter()
                .filter(|s| s.conditions.iter().any(|c| c.context == Context::Positive))
                .count();
            if positives == 0 {
                assert!(inst.report.iter().all(|s| !s.abnormal()));
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn degenerate_configs_error() {
        let cfg = GeneratorConfig {
            zones: vec![],
            ..small()
        };
        assert!(generate_synthetic_corpus(&cfg, 1).is_err());
        let cfg = GeneratorConfig {
            lesions: vec![],
            negative_only: vec![],
            ..small()
        };
        assert!(generate_synthetic_corpus(&cfg, 1).is_err());
    }
}
