//! Seeded corpus perturbations. None of them touches image pixels: text
//! perturbations keep every box, label perturbations keep every sentence.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{BBox, Corpus, Instance, SentenceAnnotation, Split};
use crate::error::{Error, Result};
use crate::seed;
use crate::synthtext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Perturbation {
    SwapLeftRight,
    ShuffleInReport,
    RandomSentences,
    RandomBboxes,
    SynthSwapConditions,
}

impl Perturbation {
    pub const ALL: [Perturbation; 5] = [
        Perturbation::SwapLeftRight,
        Perturbation::ShuffleInReport,
        Perturbation::RandomSentences,
        Perturbation::RandomBboxes,
        Perturbation::SynthSwapConditions,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Perturbation::SwapLeftRight => "swap-left-right",
            Perturbation::ShuffleInReport => "shuffle-in-report",
            Perturbation::RandomSentences => "random-sentences",
            Perturbation::RandomBboxes => "random-bboxes",
            Perturbation::SynthSwapConditions => "synth-swap-conditions",
        }
    }

    /// True when the perturbation rewrites text and leaves labels alone.
    pub fn is_text_only(&self) -> bool {
        matches!(
            self,
            Perturbation::SwapLeftRight | Perturbation::RandomSentences | Perturbation::SynthSwapConditions
        )
    }
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Perturbation::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown perturbation `{s}`")))
    }
}

impl std::fmt::Display for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Output of a corpus-level perturbation.
#[derive(Debug, Clone)]
pub struct PerturbedCorpus {
    pub base_hash: String,
    pub perturbation: Perturbation,
    pub seed: u64,
    /// Corpus the perturbation was applied to: the input itself, or its synthetic
    /// rendering for condition swaps.
    pub base: Corpus,
    pub corpus: Corpus,
    /// Instances dropped because the perturbation is undefined for them.
    pub excluded: Vec<String>,
}

fn swap_word(word: &str) -> Option<String> {
    let lower = word.to_lowercase();
    let replacement = match lower.as_str() {
        "left" => "right",
        "right" => "left",
        _ => return None,
    };
    let out = if word.chars().all(|c| c.is_uppercase()) {
        replacement.to_uppercase()
    } else if word.chars().next().is_some_and(char::is_uppercase) {
        let mut cs = replacement.chars();
        let first = cs.next().expect("non-empty").to_uppercase();
        first.chain(cs).collect()
    } else {
        replacement.to_string()
    };
    Some(out)
}

/// Exchanges the words `left` and `right`, matching case-insensitively and keeping
/// the original token's capitalization. Substrings of longer words are untouched.
pub fn swap_left_right(sentence: &str) -> String {
    let mut out = String::with_capacity(sentence.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !word.is_empty() {
            match swap_word(word) {
                Some(w) => out.push_str(&w),
                None => out.push_str(word),
            }
            word.clear();
        }
    };
    for ch in sentence.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
            out.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Uniform non-identity permutation of `0..n` for `n >= 2`.
fn non_identity_permutation(n: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(k, &p)| k != p) {
            return perm;
        }
    }
}

/// Permutes the box sets among the sentences of one report. `None` for
/// single-sentence reports.
pub fn shuffle_in_report(instance: &Instance, seed: u64) -> Option<Instance> {
    let n = instance.report.len();
    if n < 2 {
        return None;
    }
    let mut rng = seed::derived_rng(seed, &instance.instance_id);
    let perm = non_identity_permutation(n, &mut rng);
    let mut out = instance.clone();
    for (k, &src) in perm.iter().enumerate() {
        out.report[k].bboxes = instance.report[src].bboxes.clone();
    }
    Some(out)
}

/// Prefix offsets of report lengths, for sampling a sentence of another report.
struct SentenceIndex {
    starts: Vec<usize>,
    total: usize,
}

impl SentenceIndex {
    fn new(corpus: &Corpus) -> Self {
        let mut starts = Vec::with_capacity(corpus.instances.len());
        let mut total = 0;
        for inst in &corpus.instances {
            starts.push(total);
            total += inst.report.len();
        }
        Self { starts, total }
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let inst = self.starts.partition_point(|&s| s <= flat) - 1;
        (inst, flat - self.starts[inst])
    }

    /// Uniform sentence among all reports except `exclude`.
    fn sample_other(&self, corpus: &Corpus, exclude: usize, rng: &mut seed::Rng) -> (usize, usize) {
        let own = corpus.instances[exclude].report.len();
        let mut k = rng.gen_range(0..self.total - own);
        if k >= self.starts[exclude] {
            k += own;
        }
        self.locate(k)
    }
}

fn require_two(corpus: &Corpus, what: &str) -> Result<()> {
    if corpus.instances.len() < 2 {
        return Err(Error::invalid(format!("{what} needs at least two instances")));
    }
    Ok(())
}

/// Replaces every sentence with one drawn (with replacement) from other reports,
/// keeping the original boxes.
pub fn random_sentences(corpus: &Corpus, seed: u64) -> Result<PerturbedCorpus> {
    require_two(corpus, "random sentences")?;
    let index = SentenceIndex::new(corpus);
    let mut out = corpus.clone();
    for (i, inst) in out.instances.iter_mut().enumerate() {
        let mut rng = seed::derived_rng(seed, &inst.instance_id);
        for s in &mut inst.report {
            let (j, k) = index.sample_other(corpus, i, &mut rng);
            let donor = &corpus.instances[j].report[k];
            let bboxes = std::mem::take(&mut s.bboxes);
            *s = donor.clone();
            s.bboxes = bboxes;
        }
    }
    Ok(wrap(corpus, Perturbation::RandomSentences, seed, corpus.clone(), out, vec![]))
}

fn clip_to(b: &BBox, width: usize, height: usize) -> Option<BBox> {
    let c = BBox {
        region_name: b.region_name.clone(),
        x0: b.x0,
        y0: b.y0,
        x1: b.x1.min(width as u32),
        y1: b.y1.min(height as u32),
    };
    c.is_well_formed().then_some(c)
}

/// Replaces every sentence's box set with one from a different instance. Boxes
/// are clipped to the target image.
pub fn random_bboxes(corpus: &Corpus, seed: u64) -> Result<PerturbedCorpus> {
    require_two(corpus, "random bboxes")?;
    let n = corpus.instances.len();
    let mut out = corpus.clone();
    for (i, inst) in out.instances.iter_mut().enumerate() {
        let mut rng = seed::derived_rng(seed, &inst.instance_id);
        let (w, h) = (inst.image.width(), inst.image.height());
        for s in &mut inst.report {
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let donor = &corpus.instances[j].report;
            let k = rng.gen_range(0..donor.len());
            s.bboxes = donor[k].bboxes.iter().filter_map(|b| clip_to(b, w, h)).collect();
        }
    }
    Ok(wrap(corpus, Perturbation::RandomBboxes, seed, corpus.clone(), out, vec![]))
}

/// Conditions observed for each exact region set in the reference split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldStats {
    by_regions: BTreeMap<BTreeSet<String>, BTreeSet<String>>,
}

impl GoldStats {
    pub fn insert(&mut self, regions: &[impl AsRef<str>], condition: &str) {
        let key = regions.iter().map(|r| r.as_ref().to_owned()).collect();
        self.by_regions.entry(key).or_default().insert(condition.to_owned());
    }

    /// Statistics over the gold split, or over every instance when the corpus has
    /// no gold split.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let has_gold = corpus.instances.iter().any(|i| i.split == Split::Gold);
        let mut stats = GoldStats::default();
        for inst in corpus.instances.iter().filter(|i| !has_gold || i.split == Split::Gold) {
            for s in &inst.report {
                for m in &s.conditions {
                    stats.insert(&m.regions, &m.condition);
                }
            }
        }
        stats
    }

    pub fn alternatives(&self, regions: &[String], current: &str) -> Vec<&str> {
        let key: BTreeSet<String> = regions.iter().cloned().collect();
        self.by_regions
            .get(&key)
            .map(|set| set.iter().map(String::as_str).filter(|c| *c != current).collect())
            .unwrap_or_default()
    }
}

/// Swaps each condition for another one seen at the same exact region set, then
/// re-renders the sentence. Mentions with no alternative stay as they are.
pub fn swap_conditions(ann: &SentenceAnnotation, stats: &GoldStats, rng: &mut seed::Rng) -> Result<SentenceAnnotation> {
    let mut out = ann.clone();
    let mut changed = false;
    for m in &mut out.conditions {
        let alts = stats.alternatives(&m.regions, &m.condition);
        if let Some(&pick) = alts.choose(rng) {
            m.condition = pick.to_owned();
            changed = true;
        }
    }
    if changed || !out.conditions.is_empty() {
        out.set_text(synthtext::synthesize_sentence(&out)?);
    }
    Ok(out)
}

fn synth_swap_conditions(corpus: &Corpus, seed: u64) -> Result<PerturbedCorpus> {
    let base = synthtext::render_corpus(corpus)?;
    let stats = GoldStats::from_corpus(&base);
    let mut out = base.clone();
    for inst in &mut out.instances {
        let mut rng = seed::derived_rng(seed, &inst.instance_id);
        for s in &mut inst.report {
            *s = swap_conditions(s, &stats, &mut rng)?;
        }
    }
    Ok(wrap(corpus, Perturbation::SynthSwapConditions, seed, base, out, vec![]))
}

fn wrap(input: &Corpus, perturbation: Perturbation, seed: u64, base: Corpus, corpus: Corpus, excluded: Vec<String>) -> PerturbedCorpus {
    PerturbedCorpus {
        base_hash: input.content_hash(),
        perturbation,
        seed,
        base,
        corpus,
        excluded,
    }
}

/// Applies a named perturbation to a whole corpus.
pub fn apply(corpus: &Corpus, perturbation: Perturbation, seed: u64) -> Result<PerturbedCorpus> {
    match perturbation {
        Perturbation::SwapLeftRight => {
            let mut out = corpus.clone();
            for s in out.instances.iter_mut().flat_map(|i| i.report.iter_mut()) {
                let text = swap_left_right(&s.text);
                s.set_text(text);
            }
            Ok(wrap(corpus, perturbation, seed, corpus.clone(), out, vec![]))
        }
        Perturbation::ShuffleInReport => {
            let mut kept = Vec::new();
            let mut excluded = Vec::new();
            for inst in &corpus.instances {
                match shuffle_in_report(inst, seed) {
                    Some(p) => kept.push(p),
                    None => excluded.push(inst.instance_id.clone()),
                }
            }
            let out = Corpus {
                instances: kept,
                ..corpus.clone()
            };
            Ok(wrap(corpus, perturbation, seed, corpus.clone(), out, excluded))
        }
        Perturbation::RandomSentences => random_sentences(corpus, seed),
        Perturbation::RandomBboxes => random_bboxes(corpus, seed),
        Perturbation::SynthSwapConditions => synth_swap_conditions(corpus, seed),
    }
}
