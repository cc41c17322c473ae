//! Browser demo: draw a synthetic film, click to place a Gaussian "attention"
//! blob and see how the localization metrics score it against a sentence's
//! boxes, and try the left/right text swap.
//!
//! Every export takes and returns JSON strings.

use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use attnprobe::corpus::{generate_synthetic_corpus, GeneratorConfig, Instance};
use attnprobe::metrics::{auroc, average_precision, iou_at, precision_at};
use attnprobe::perturb;
use attnprobe::saliency::{segmentation_label, PixelScoreMap};
use attnprobe::synthtext::synthesize_sentence;

fn instance(seed: u64) -> attnprobe::Result<Instance> {
    let cfg = GeneratorConfig {
        train: 0,
        valid: 0,
        gold: 1,
        ..GeneratorConfig::default()
    };
    Ok(generate_synthetic_corpus(&cfg, seed)?.instances.remove(0))
}

fn sentence_at(inst: &Instance, index: usize) -> attnprobe::Result<&attnprobe::corpus::SentenceAnnotation> {
    inst.report
        .get(index)
        .ok_or_else(|| attnprobe::Error::InvalidInput(format!("no sentence {index}")))
}

fn to_u8(values: &[f64], max: f64) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[derive(Serialize)]
struct Scores {
    auroc: Option<f64>,
    average_precision: Option<f64>,
    iou_10: Option<f64>,
    precision_10: Option<f64>,
    heat: Vec<u8>,
}

pub fn instance_view(seed: u64) -> attnprobe::Result<Value> {
    let inst = instance(seed)?;
    let sentences: Vec<Value> = inst
        .report
        .iter()
        .map(|s| {
            json!({
                "text": s.text,
                "abnormal": s.abnormal(),
                "bboxes": s.bboxes.iter().map(|b| json!({
                    "region": b.region_name, "x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({
        "id": inst.instance_id,
        "width": inst.image.width(),
        "height": inst.image.height(),
        "pixels": to_u8(inst.image.pixels(), 1.0),
        "sentences": sentences,
    }))
}

/// Gaussian blob at `(x, y)` scored against the boxes of one sentence.
pub fn click_scores(seed: u64, sentence: usize, x: f64, y: f64, sigma: f64) -> attnprobe::Result<Value> {
    let inst = instance(seed)?;
    let ann = sentence_at(&inst, sentence)?;
    let (w, h) = (inst.image.width(), inst.image.height());
    let sigma = sigma.max(0.5);
    let heat: Vec<f64> = (0..h * w)
        .map(|p| {
            let (r, c) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            (-((c - x).powi(2) + (r - y).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = heat.iter().sum();
    let peak = heat.iter().cloned().fold(0.0, f64::max);
    let s = PixelScoreMap::new(w, h, heat.iter().map(|v| v / total).collect())?;
    let l = segmentation_label(&ann.bboxes, (w, h));
    let scores = Scores {
        auroc: auroc(&s, &l).ok(),
        average_precision: average_precision(&s, &l).ok(),
        iou_10: iou_at(&s, &l, 10).ok(),
        precision_10: precision_at(&s, &l, 10).ok(),
        heat: to_u8(&heat, peak),
    };
    Ok(serde_json::to_value(scores).expect("plain struct"))
}

/// The sentence rebuilt from its structured labels, next to its left/right swap.
pub fn text_variants(seed: u64, sentence: usize) -> attnprobe::Result<Value> {
    let inst = instance(seed)?;
    let ann = sentence_at(&inst, sentence)?;
    Ok(json!({
        "original": ann.text,
        "swapped": perturb::swap_left_right(&ann.text),
        "synthesized": synthesize_sentence(ann)?,
    }))
}

fn js(r: attnprobe::Result<Value>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = instance)]
pub fn instance_js(seed: u32) -> Result<String, JsValue> {
    js(instance_view(seed as u64))
}

#[wasm_bindgen(js_name = scoreClick)]
pub fn score_click_js(seed: u32, sentence: usize, x: f64, y: f64, sigma: f64) -> Result<String, JsValue> {
    js(click_scores(seed as u64, sentence, x, y, sigma))
}

#[wasm_bindgen(js_name = textVariants)]
pub fn text_variants_js(seed: u32, sentence: usize) -> Result<String, JsValue> {
    js(text_variants(seed as u64, sentence))
}

#[wasm_bindgen(js_name = swapLeftRight)]
pub fn swap_left_right_js(text: &str) -> String {
    perturb::swap_left_right(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed_sentence(seed: u64) -> (u64, usize, Value) {
        (seed..seed + 50)
            .find_map(|s| {
                let v = instance_view(s).unwrap();
                let i = v["sentences"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .position(|x| x["abnormal"] == true)?;
                Some((s, i, v))
            })
            .expect("an abnormal sentence within 50 seeds")
    }

    #[test]
    fn view_is_deterministic_and_sized() {
        let a = instance_view(3).unwrap();
        assert_eq!(a, instance_view(3).unwrap());
        let n = a["width"].as_u64().unwrap() * a["height"].as_u64().unwrap();
        assert_eq!(a["pixels"].as_array().unwrap().len() as u64, n);
        assert!(!a["sentences"].as_array().unwrap().is_empty());
    }

    #[test]
    fn clicking_inside_the_box_beats_clicking_outside() {
        let (seed, i, v) = boxed_sentence(10);
        let b = &v["sentences"][i]["bboxes"][0];
        let f = |k: &str| b[k].as_f64().unwrap();
        let (cx, cy) = ((f("x0") + f("x1")) / 2.0, (f("y0") + f("y1")) / 2.0);
        let inside = click_scores(seed, i, cx, cy, 3.0).unwrap();
        let w = v["width"].as_f64().unwrap();
        let outside = click_scores(seed, i, if cx < w / 2.0 { w - 2.0 } else { 2.0 }, 2.0, 3.0).unwrap();
        let get = |s: &Value, k: &str| s[k].as_f64().unwrap();
        assert!(get(&inside, "auroc") > 0.8, "{inside}");
        assert!(get(&inside, "auroc") > get(&outside, "auroc"));
        assert!(get(&inside, "average_precision") > get(&outside, "average_precision"));
        assert!(inside["heat"].as_array().unwrap().iter().any(|h| *h == 255));
    }

    #[test]
    fn bad_sentence_index_is_an_error() {
        assert!(click_scores(1, 99, 0.0, 0.0, 2.0).is_err());
        assert!(text_variants(1, 99).is_err());
    }

    #[test]
    fn swap_round_trips() {
        let (seed, i, _) = boxed_sentence(20);
        let t = text_variants(seed, i).unwrap();
        let swapped = t["swapped"].as_str().unwrap();
        assert_eq!(perturb::swap_left_right(swapped), t["original"].as_str().unwrap());
        assert_eq!(swap_left_right_js("left lung"), "right lung");
    }
}
