//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p attnprobe-cli --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng as _;

use attnprobe::corpus::{
    generate_synthetic_corpus, BBox, ConditionMention, Corpus, GeneratorConfig, GrayImage, Instance, SentenceAnnotation,
    Split,
};
use attnprobe::metrics::{attention_entropy, auroc, average_precision, iou_at, precision_at};
use attnprobe::model::{
    alignment_examples, check_model_gradients, finetune_alignment, finetune_pairs, pair_inputs, train, Model,
    ModelConfig, Variant, Vocab,
};
use attnprobe::perturb::{self, Perturbation};
use attnprobe::runner::{run_delta, run_eval, run_kl, EvalOptions};
use attnprobe::saliency::{PixelScoreMap, SegmentationLabel};
use attnprobe::seed;
use attnprobe::subsets::{filter_abnormal, filter_one_lung, trim_large_bboxes, LungNames, Subset};
use attnprobe::synthtext::{loclist, synthesize_sentence};

struct Outcome {
    pass: bool,
    detail: String,
    notes: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
            notes: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------- oracles

/// Position of `p` in the descending-score order with ties by ascending index, 1-based.
fn rank_of(scores: &[f64], p: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&q| scores[q] > scores[p] || (scores[q] == scores[p] && q < p))
        .count()
}

fn oracle_auroc(s: &[f64], l: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0usize);
    for p in (0..s.len()).filter(|&i| l[i]) {
        for n in (0..s.len()).filter(|&i| !l[i]) {
            pairs += 1;
            num += if s[p] > s[n] {
                1.0
            } else if s[p] == s[n] {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

fn oracle_ap(s: &[f64], l: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..s.len()).filter(|&i| l[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&p| {
            let r = rank_of(s, p);
            let hits = pos.iter().filter(|&&q| rank_of(s, q) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

/// `(iou, precision)` of the top ⌊q·P/100⌋ pixels.
fn oracle_top(s: &[f64], l: &[bool], q: u32) -> Option<(f64, f64)> {
    let k = q as usize * s.len() / 100;
    if k == 0 {
        return None;
    }
    let selected: Vec<bool> = (0..s.len()).map(|p| rank_of(s, p) <= k).collect();
    let inter = (0..s.len()).filter(|&p| selected[p] && l[p]).count();
    let union = (0..s.len()).filter(|&p| selected[p] || l[p]).count();
    Some((inter as f64 / union as f64, inter as f64 / k as f64))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(2024);
    let mut worst = 0.0f64;
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    let mut check = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => {
            compared += 1;
            worst = worst.max((x - y).abs());
            if (x - y).abs() >= 1e-9 {
                mismatches += 1;
            }
        }
        (None, None) => {}
        _ => mismatches += 1,
    };
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let levels = rng.gen_range(2..=6);
        let scores: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let density: f64 = rng.gen();
        let labels: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        let s = PixelScoreMap::new(w, h, scores.clone()).unwrap();
        let l = SegmentationLabel {
            width: w,
            height: h,
            labels: labels.clone(),
        };
        check(auroc(&s, &l).ok(), oracle_auroc(&scores, &labels));
        check(average_precision(&s, &l).ok(), oracle_ap(&scores, &labels));
        for q in [5, 10, 30] {
            let o = oracle_top(&scores, &labels, q);
            check(iou_at(&s, &l, q).ok(), o.map(|v| v.0));
            check(precision_at(&s, &l, q).ok(), o.map(|v| v.1));
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{compared} values, max |d| = {worst:.1e}, {mismatches} mismatches, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn entropy_anchor() -> Outcome {
    let w = vec![1.0 / 361.0; 361];
    let h = attention_entropy(&w).unwrap();
    Outcome::new(
        (h - 5.889).abs() <= 1e-3 && (h - 361f64.ln()).abs() < 1e-12,
        format!("H(uniform 361) = {h:.6} nats"),
    )
}

// ---------------------------------------------------------------- gradients

fn gradients() -> Outcome {
    let corpus = generate_synthetic_corpus(
        &GeneratorConfig {
            train: 6,
            valid: 2,
            gold: 2,
            ..GeneratorConfig::default()
        },
        5,
    )
    .unwrap();
    let vocab = Vocab::from_corpus(&corpus);
    let pairs: Vec<_> = corpus.pairs_in(Split::Train).into_iter().step_by(2).take(4).collect();
    let boxed: Vec<_> = corpus
        .pairs_in(Split::Train)
        .into_iter()
        .filter(|p| !corpus.sentence(*p).bboxes.is_empty())
        .take(4)
        .collect();
    let (mut worst_c, mut worst_a) = (0.0f64, 0.0f64);
    for s in 0..10u64 {
        let cfg = ModelConfig {
            no_attn: s % 2 == 1,
            ..ModelConfig::default()
        };
        let model = Model::init(cfg, vocab.clone(), 100 + s).unwrap();
        let inputs = pair_inputs(&model, &corpus, &pairs).unwrap();
        let examples = alignment_examples(&model, &corpus, &boxed, false).unwrap();
        let r = check_model_gradients(&model, &inputs, &examples, 20, s).unwrap();
        worst_c = worst_c.max(r.contrastive);
        worst_a = worst_a.max(r.alignment);
    }
    Outcome::new(
        worst_c < 1e-4 && worst_a < 1e-4,
        format!("max rel. error: contrastive {worst_c:.2e}, alignment {worst_a:.2e}"),
    )
}

// ---------------------------------------------------------------- invariants

fn invariants() -> Outcome {
    let corpus = generate_synthetic_corpus(
        &GeneratorConfig {
            train: 2,
            valid: 2,
            gold: 40,
            ..GeneratorConfig::default()
        },
        8,
    )
    .unwrap()
    .split_view(Split::Gold);
    let model = Model::init(ModelConfig::default(), Vocab::from_corpus(&corpus), 3).unwrap();
    let mut problems = Vec::new();

    let pc = perturb::apply(&corpus, Perturbation::RandomBboxes, 4).unwrap();
    let mut maps = 0;
    for (a, b) in pc.base.instances.iter().zip(&pc.corpus.instances) {
        let va = model.encode_image(&a.image).unwrap();
        let vb = model.encode_image(&b.image).unwrap();
        for (sa, sb) in a.report.iter().zip(&b.report) {
            let (_, ma) = model.pair(&sa.tokens, &va).unwrap();
            let (_, mb) = model.pair(&sb.tokens, &vb).unwrap();
            let same = (0..ma.n_tokens()).all(|i| {
                ma.row(i).iter().map(|v| v.to_bits()).eq(mb.row(i).iter().map(|v| v.to_bits()))
            }) && ma.n_tokens() == mb.n_tokens();
            if !same {
                problems.push(format!("random-bboxes changed attention in {}", a.instance_id));
            }
            maps += 1;
        }
    }

    let blind = model.text_blind();
    let mut deltas = Vec::new();
    for p in [Perturbation::SwapLeftRight, Perturbation::RandomSentences, Perturbation::SynthSwapConditions] {
        let run = run_delta(&corpus, &blind, Some(p), &EvalOptions::default(), 6).unwrap();
        let d = run.report.delta("auroc");
        if d != Some(0.0) {
            problems.push(format!("text-blind dAUROC under {p} = {d:?}"));
        }
        deltas.push(format!("{p} {}", d.map(|v| v.to_string()).unwrap_or("-".into())));
    }
    let kl = run_kl(&corpus, &blind, 6).unwrap();
    if kl.mean_kl != 0.0 {
        problems.push(format!("text-blind KL = {}", kl.mean_kl));
    }
    let mut out = Outcome::new(
        problems.is_empty(),
        format!("{maps} maps bitwise equal under random-bboxes; text-blind KL = {}", kl.mean_kl),
    );
    out.notes.push(format!("text-blind dAUROC: {}", deltas.join(", ")));
    out.notes.extend(problems);
    out
}

// ---------------------------------------------------------------- end to end

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let gen = GeneratorConfig {
        train: 500,
        valid: 60,
        gold: 200,
        ..GeneratorConfig::default()
    };
    let corpus = generate_synthetic_corpus(&gen, 7).unwrap();
    let cfg = ModelConfig {
        tau: 0.5,
        max_epochs: 5,
        ..ModelConfig::default()
    };
    let gold = corpus.split_view(Split::Gold);
    let (lp, vp) = finetune_pairs(&corpus, 30, 30, 1);
    assert_eq!((lp.len(), vp.len()), (30, 30));

    let opts = EvalOptions::default();
    let text_deltas = |m: &Model| -> [f64; 2] {
        [(Perturbation::SwapLeftRight, Subset::OneLung), (Perturbation::RandomSentences, Subset::Abnormal)].map(|(p, s)| {
            run_delta(&gold, m, Some(p), &EvalOptions { subset: s, ..opts }, 3)
                .unwrap()
                .report
                .delta("auroc")
                .expect("defined delta")
        })
    };

    let mut notes = Vec::new();
    let mut summary = None;
    for variant in [Variant::Base, Variant::NoAttn] {
        let base = train(&corpus, &cfg, 1, variant, None).unwrap().model;
        let labeled = alignment_examples(&base, &corpus, &lp, false).unwrap();
        let val = alignment_examples(&base, &corpus, &vp, false).unwrap();
        let ft = finetune_alignment(&base, &labeled, &val).unwrap();
        let auroc_base = run_eval(&gold, &base, &opts).unwrap().mean("auroc").unwrap();
        let auroc_ft = run_eval(&gold, &ft.model, &opts).unwrap().mean("auroc").unwrap();
        let (db, df) = (text_deltas(&base), text_deltas(&ft.model));
        notes.push(format!(
            "{variant}: gold AUROC {auroc_base:.3} -> {auroc_ft:.3} after {} finetune steps (kept {}); \
             dAUROC swap-left-right/one-lung {:+.3} -> {:+.3}, random-sentences/abnormal {:+.3} -> {:+.3}",
            ft.steps, ft.best_step, db[0], df[0], db[1], df[1]
        ));
        if variant == Variant::Base {
            summary = Some((auroc_ft, db, df));
        }
    }
    let (auroc_ft, db, df) = summary.unwrap();
    let elapsed = start.elapsed();
    let a = auroc_ft >= 0.75;
    let b = df[0] <= -0.05;
    let c = df[1] <= -0.05;
    let d = db[0].abs() < df[0].abs() && db[1].abs() < df[1].abs();
    let t = elapsed < Duration::from_secs(300);
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    notes.insert(
        0,
        format!(
            "(a) finetuned gold AUROC {auroc_ft:.3} >= 0.75: {}; (b) swap-left-right {:+.3} <= -0.05: {}; \
             (c) random-sentences {:+.3} <= -0.05: {}; (d) |base| < |finetuned| for both: {}",
            mark(a),
            df[0],
            mark(b),
            df[1],
            mark(c),
            mark(d)
        ),
    );
    let mut out = Outcome::new(a && b && c && d && t, format!("{:.1}s", elapsed.as_secs_f64()));
    out.notes = notes;
    out
}

// ---------------------------------------------------------------- determinism

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_attnprobe"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let e = ["--corpus", "c.json", "--params", "ft.json", "--split", "gold", "--seed", "5"];
    let with = |extra: &[&'static str]| -> Vec<&str> { e.iter().copied().chain(extra.iter().copied()).collect() };
    let steps: Vec<Vec<&str>> = vec![
        vec!["corpus", "generate", "--seed", "2", "--train", "40", "--valid", "40", "--gold", "20", "--out", "c.json"],
        vec!["model", "train", "--corpus", "c.json", "--seed", "1", "--epochs", "2", "--out", "m.json"],
        vec!["model", "finetune", "--corpus", "c.json", "--params", "m.json", "--seed", "1", "--out", "ft.json"],
        vec!["perturb", "apply", "random-sentences", "--seed", "3", "c.json", "--out", "p.json"],
        vec!["synthtext", "render", "c.json", "--out", "s.json"],
        [&["eval", "run"][..], &with(&["--out", "run.csv"])].concat(),
        [&["eval", "run"][..], &with(&["--perturb", "swap-left-right", "--out", "run_swap.csv"])].concat(),
        [&["eval", "delta"][..], &with(&["--perturb", "random-sentences", "--subset", "abnormal", "--out", "delta.csv"])].concat(),
        [&["eval", "delta"][..], &with(&["--perturb", "random-bboxes", "--trim-large-boxes", "--pixel-path", "bbox-max", "--out", "delta_bb.csv"])].concat(),
        [&["eval", "contrastive"][..], &with(&["--out", "contrastive.csv"])].concat(),
        [&["eval", "kl"][..], &with(&["--out", "kl.csv"])].concat(),
        [&["eval", "corr"][..], &with(&["--out", "corr.csv"])].concat(),
    ];
    for s in &steps {
        cli(dir, s)?;
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(x), Ok(y)) => {
            let csvs = x.iter().filter(|f| f.0.ends_with(".csv")).count();
            let differing: Vec<&str> = x
                .iter()
                .zip(&y)
                .filter(|(f, g)| f != g)
                .map(|(f, _)| f.0.as_str())
                .collect();
            let same_names = x.iter().map(|f| &f.0).eq(y.iter().map(|f| &f.0));
            Outcome::new(
                same_names && differing.is_empty() && csvs == 7,
                format!("{} files ({csvs} CSV) compared across two runs, {} differ {:?}", x.len(), differing.len(), differing),
            )
        }
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e),
    }
}

// ---------------------------------------------------------------- worked examples

fn worked_examples() -> Outcome {
    let mut failures = Vec::new();
    let mut n = 0;
    let mut eq = |what: &str, got: String, want: &str| {
        n += 1;
        if got != want {
            failures.push(format!("{what}: got {got:?}, want {want:?}"));
        }
    };
    eq("loclist lungs", loclist(&["left lung", "right lung"]).unwrap(), "lungs");
    eq(
        "loclist lungs and lower zones",
        loclist(&["left lung", "right lung", "left lower lung zone", "right lower lung zone"]).unwrap(),
        "lungs and lower lung zones",
    );
    let sentence = |mentions: Vec<ConditionMention>| synthesize_sentence(&SentenceAnnotation::new("", vec![], mentions)).unwrap();
    eq(
        "positive mention in both lungs",
        sentence(vec![ConditionMention::positive("low lung volumes", &["left lung", "right lung"])]),
        "There is low lung volumes in the lungs.",
    );
    eq(
        "two negated mentions",
        sentence(vec![
            ConditionMention::negative("pneumonia", &[]),
            ConditionMention::negative("consolidation", &[]),
        ]),
        "There is no pneumonia. There is no consolidation.",
    );

    let names = |boxes: Vec<BBox>| -> String {
        let ann = SentenceAnnotation::new("x", boxes, vec![]);
        let mut v: Vec<String> = trim_large_bboxes(&ann).bboxes.into_iter().map(|b| b.region_name).collect();
        v.sort();
        v.join(" + ")
    };
    let b = |name: &str, x0, y0, x1, y1| BBox::new(name, x0, y0, x1, y1);
    eq(
        "trim left lung + left costophrenic angle",
        names(vec![b("left lung", 32, 8, 56, 56), b("left costophrenic angle", 44, 48, 56, 56)]),
        "left costophrenic angle",
    );
    eq("trim keeps lone left lung", names(vec![b("left lung", 32, 8, 56, 56)]), "left lung");

    let image = GrayImage::filled(64, 64, 0.2).unwrap();
    let corpus = Corpus {
        instances: vec![Instance {
            instance_id: "p".into(),
            split: Split::Gold,
            image,
            report: vec![
                SentenceAnnotation::new(
                    "There is atelectasis in the left lung.",
                    vec![b("left lung", 32, 8, 56, 56)],
                    vec![ConditionMention::positive("atelectasis", &["left lung"])],
                ),
                SentenceAnnotation::new(
                    "There is no edema.",
                    vec![b("left lung", 32, 8, 56, 56), b("right lung", 8, 8, 32, 56)],
                    vec![ConditionMention::negative("edema", &["left lung", "right lung"])],
                ),
            ],
        }],
        condition_vocabulary: ["atelectasis", "edema"].map(String::from).into(),
        region_vocabulary: ["left lung", "right lung"].map(String::from).into(),
    };
    let abnormal: Vec<usize> = filter_abnormal(&corpus).iter().map(|p| p.sentence).collect();
    eq("abnormal includes positive atelectasis", format!("{abnormal:?}"), "[0]");
    let one_lung: Vec<usize> = filter_one_lung(&corpus, &LungNames::default()).iter().map(|p| p.sentence).collect();
    eq("one-lung excludes both lungs", format!("{one_lung:?}"), "[0]");

    let mut out = Outcome::new(failures.is_empty(), format!("{n} examples, {} failures", failures.len()));
    out.notes = failures;
    out
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("metric oracle equivalence", metric_oracles),
        ("entropy anchor", entropy_anchor),
        ("gradient correctness", gradients),
        ("perturbation invariants", invariants),
        ("end-to-end desk experiment", end_to_end),
        ("CLI determinism", determinism),
        ("subset and synthtext worked examples", worked_examples),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let out = run();
        println!("{} {name}: {}", if out.pass { "PASS" } else { "FAIL" }, out.detail);
        for n in &out.notes {
            println!("       {n}");
        }
        if !out.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
