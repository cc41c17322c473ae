//! Rule-based sentences from condition/context/location annotations.
//!
//! | context  | condition              | template                         |
//! |----------|------------------------|----------------------------------|
//! | positive | `normal` / `abnormal`  | `The {loclist} is/are {c}.`      |
//! | positive | anything else          | `There is {c} in the {loclist}.` |
//! | negative | any                    | `There is no {c}.`               |

use crate::corpus::{ConditionMention, Context, Corpus, SentenceAnnotation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

fn split_side(region: &str) -> (Option<Side>, &str) {
    if let Some(rest) = region.strip_prefix("left ") {
        (Some(Side::Left), rest)
    } else if let Some(rest) = region.strip_prefix("right ") {
        (Some(Side::Right), rest)
    } else {
        (None, region)
    }
}

/// Whole lung first, then zones top to bottom, then everything else in input order.
fn anatomical_rank(base: &str) -> u8 {
    let words: Vec<&str> = base.split_whitespace().collect();
    if base == "lung" {
        0
    } else if words.contains(&"upper") {
        1
    } else if words.contains(&"mid") || words.contains(&"middle") {
        2
    } else if words.contains(&"lower") {
        3
    } else {
        4
    }
}

fn pluralize(phrase: &str) -> String {
    let (head, last) = match phrase.rsplit_once(' ') {
        Some((h, l)) => (Some(h), l),
        None => (None, phrase),
    };
    let plural = match last {
        "apex" => "apices".to_string(),
        "hilum" => "hila".to_string(),
        "vertebra" => "vertebrae".to_string(),
        w if w.ends_with('s') || w.ends_with("sh") || w.ends_with("ch") || w.ends_with('x') => format!("{w}es"),
        w if w.ends_with('y') && !w.ends_with("ay") && !w.ends_with("ey") && !w.ends_with("oy") => {
            format!("{}ies", &w[..w.len() - 1])
        }
        w => format!("{w}s"),
    };
    match head {
        Some(h) => format!("{h} {plural}"),
        None => plural,
    }
}

struct LocList {
    items: Vec<String>,
    plural: bool,
}

fn build_loclist(regions: &[impl AsRef<str>]) -> Result<LocList> {
    if regions.is_empty() {
        return Err(Error::invalid("location list is empty"));
    }
    let mut seen = Vec::<&str>::new();
    for r in regions {
        if !seen.contains(&r.as_ref()) {
            seen.push(r.as_ref());
        }
    }
    let parsed: Vec<(Option<Side>, &str)> = seen.iter().map(|r| split_side(r)).collect();
    let has = |side: Side, base: &str| parsed.iter().any(|&(s, b)| s == Some(side) && b == base);

    // (rank, first appearance, rendered text, merged?)
    let mut entries: Vec<(u8, usize, String, bool)> = Vec::new();
    let mut merged_bases: Vec<&str> = Vec::new();
    for (idx, &(side, base)) in parsed.iter().enumerate() {
        let paired = side.is_some() && has(Side::Left, base) && has(Side::Right, base);
        if paired {
            if merged_bases.contains(&base) {
                continue;
            }
            merged_bases.push(base);
            entries.push((anatomical_rank(base), idx, pluralize(base), true));
        } else {
            entries.push((anatomical_rank(base), idx, seen[idx].to_string(), false));
        }
    }
    entries.sort_by_key(|e| (e.0, e.1));
    let plural = entries.len() > 1 || entries.iter().any(|e| e.3);
    Ok(LocList {
        items: entries.into_iter().map(|e| e.2).collect(),
        plural,
    })
}

fn join_items(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

/// Renders a list of anatomical locations as natural language. Left/right sibling
/// pairs collapse into one plural item (`left lung` + `right lung` -> `lungs`).
pub fn loclist(regions: &[impl AsRef<str>]) -> Result<String> {
    Ok(join_items(&build_loclist(regions)?.items))
}

/// Renders one condition mention.
pub fn mention_sentence(m: &ConditionMention) -> Result<String> {
    match m.context {
        Context::Negative => Ok(format!("There is no {}.", m.condition)),
        Context::Positive => {
            if m.regions.is_empty() {
                return Err(Error::invalid(format!(
                    "positive mention of `{}` has no annotated regions",
                    m.condition
                )));
            }
            let locs = build_loclist(&m.regions)?;
            let list = join_items(&locs.items);
            let lowered = m.condition.to_lowercase();
            if lowered == "normal" || lowered == "abnormal" {
                let verb = if locs.plural { "are" } else { "is" };
                Ok(format!("The {list} {verb} {}.", m.condition))
            } else {
                Ok(format!("There is {} in the {list}.", m.condition))
            }
        }
    }
}

/// Concatenates one templated sentence per mention, in annotation order.
pub fn synthesize_sentence(ann: &SentenceAnnotation) -> Result<String> {
    synthesize_mentions(&ann.conditions)
}

pub fn synthesize_mentions(mentions: &[ConditionMention]) -> Result<String> {
    if mentions.is_empty() {
        return Err(Error::invalid("sentence has no condition mentions to render"));
    }
    let parts = mentions
        .iter()
        .map(mention_sentence)
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join(" "))
}

/// Replaces every sentence's text with its synthetic rendering. Boxes, conditions
/// and images are untouched.
pub fn render_corpus(corpus: &Corpus) -> Result<Corpus> {
    let mut out = corpus.clone();
    for inst in &mut out.instances {
        for (k, s) in inst.report.iter_mut().enumerate() {
            let text = synthesize_sentence(s).map_err(|e| {
                Error::validation(Some(&inst.instance_id), format!("sentence {k}: {e}"))
            })?;
            s.set_text(text);
        }
    }
    Ok(out)
}
