//! Evaluation runs: localization reports, perturbation deltas, contrastive
//! accuracy, attention KL against random text, and metric correlations.
//!
//! Every run works on the corpus it is given; restrict to a split beforehand with
//! [`Corpus::split_view`]. Output order is fixed by `(instance_id, sentence_index)`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PairRef};
use crate::error::{Error, Result};
use crate::metrics::{attention_entropy, contrastive_accuracy, pearson, symmetric_kl, value_columns, MetricRecord, MetricReport};
use crate::model::{similarities, Model, Tensor};
use crate::perturb::{self, Perturbation};
use crate::saliency::{attention_pixel_scores, renormalize_with_no_attn, segmentation_label, AttentionMap, PixelPath};
use crate::seed;
use crate::subsets::{select, trim_large_bboxes, Subset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub subset: Subset,
    pub pixel_path: PixelPath,
    pub trim_large_boxes: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            subset: Subset::All,
            pixel_path: PixelPath::GridBilinear,
            trim_large_boxes: false,
        }
    }
}

impl EvalOptions {
    fn flags(&self) -> String {
        format!(
            "subset={};pixel-path={};trim={}",
            self.subset, self.pixel_path, self.trim_large_boxes
        )
    }
}

/// Encoded images, computed once per instance.
struct ImageCache<'a> {
    model: &'a Model,
    corpus: &'a Corpus,
    cache: HashMap<usize, (Tensor, Tensor)>,
}

impl<'a> ImageCache<'a> {
    fn new(model: &'a Model, corpus: &'a Corpus) -> Self {
        Self {
            model,
            corpus,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, instance: usize) -> Result<&(Tensor, Tensor)> {
        if !self.cache.contains_key(&instance) {
            let enc = self.model.encode_image(&self.corpus.instances[instance].image)?;
            self.cache.insert(instance, enc);
        }
        Ok(&self.cache[&instance])
    }
}

/// Pooled attention of `model` for a sentence against an instance image.
fn pair_attention(cache: &mut ImageCache, instance: usize, tokens: &[String]) -> Result<AttentionMap> {
    let model = cache.model;
    let image = cache.get(instance)?;
    let (t_l, _) = model.encode_text(tokens)?;
    model.attend(&t_l, &image.0)
}

/// Metric row of one pair.
pub fn evaluate_pair(model: &Model, corpus: &Corpus, pair: PairRef, opts: &EvalOptions) -> Result<MetricRecord> {
    let mut cache = ImageCache::new(model, corpus);
    evaluate_cached(&mut cache, pair, opts)
}

fn evaluate_cached(cache: &mut ImageCache, pair: PairRef, opts: &EvalOptions) -> Result<MetricRecord> {
    let corpus = cache.corpus;
    let model = cache.model;
    let inst = &corpus.instances[pair.instance];
    let sentence = corpus.sentence(pair);
    let out = (inst.image.height(), inst.image.width());
    let image = cache.get(pair.instance)?.clone();
    let (emb, att) = model.pair(&sentence.tokens, &image)?;
    let (raw, no_attn) = attention_pixel_scores(&att, out, opts.pixel_path)?;
    let scores = match renormalize_with_no_attn(&raw, no_attn) {
        Ok((s, _)) => s,
        Err(_) => raw,
    };
    let boxes = if opts.trim_large_boxes {
        trim_large_bboxes(sentence).bboxes
    } else {
        sentence.bboxes.clone()
    };
    let label = segmentation_label(&boxes, out);
    let mut rec = MetricRecord::localization(&inst.instance_id, pair.sentence, &scores, &label)?;
    rec.entropy = Some(attention_entropy(att.pooled())?);
    rec.no_attn_score = att.has_no_attn().then(|| att.no_attn_score());
    if let Ok((local, global)) = similarities(&emb, &att) {
        rec.local_sim = Some(local);
        rec.global_sim = Some(global);
    }
    Ok(rec)
}

/// Metrics of the given pairs.
pub fn run_eval_pairs(corpus: &Corpus, model: &Model, pairs: &[PairRef], opts: &EvalOptions) -> Result<MetricReport> {
    let mut cache = ImageCache::new(model, corpus);
    let records = pairs
        .iter()
        .map(|&p| evaluate_cached(&mut cache, p, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(records))
}

/// Metrics of every pair in the selected subset. An empty subset gives an empty report.
pub fn run_eval(corpus: &Corpus, model: &Model, opts: &EvalOptions) -> Result<MetricReport> {
    run_eval_pairs(corpus, model, &select(corpus, opts.subset), opts)
}

/// Content address of a run: SHA-256 over the corpus hash, parameter hash and flags.
pub fn run_id(corpus_hash: &str, params_hash: &str, flags: &str) -> String {
    seed::content_hash(format!("{corpus_hash}\n{params_hash}\n{flags}").as_bytes())
}

/// Summary block written next to a metric CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub run_id: String,
    pub corpus_hash: String,
    pub params_hash: String,
    pub options: EvalOptions,
    pub n_pairs: usize,
    pub aggregates: Vec<crate::metrics::ColumnAggregate>,
}

impl EvalSummary {
    pub fn new(corpus: &Corpus, model: &Model, opts: &EvalOptions, report: &MetricReport) -> Self {
        let corpus_hash = corpus.content_hash();
        let params_hash = model.content_hash();
        Self {
            run_id: run_id(&corpus_hash, &params_hash, &opts.flags()),
            corpus_hash,
            params_hash,
            options: *opts,
            n_pairs: report.records.len(),
            aggregates: report.aggregates.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDelta {
    pub column: String,
    pub base_mean: Option<f64>,
    pub perturbed_mean: Option<f64>,
    /// `perturbed_mean - base_mean` over pairs where both are defined.
    pub delta: Option<f64>,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub run_id: String,
    /// Perturbation name, or `none` for the identity.
    pub perturbation: String,
    pub subset: String,
    pub seed: u64,
    pub base_hash: String,
    pub perturbed_hash: String,
    pub params_hash: String,
    pub n_pairs: usize,
    /// Instances dropped because the perturbation is undefined for them.
    pub excluded_instances: usize,
    pub deltas: Vec<ColumnDelta>,
}

impl DeltaReport {
    pub fn delta(&self, column: &str) -> Option<f64> {
        self.deltas.iter().find(|d| d.column == column).and_then(|d| d.delta)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["column", "base_mean", "perturbed_mean", "delta", "pairs"])
            .map_err(err)?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for d in &self.deltas {
            w.write_record([
                d.column.clone(),
                fmt(d.base_mean),
                fmt(d.perturbed_mean),
                fmt(d.delta),
                d.pairs.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Base and perturbed reports over the identical pair set, plus their difference.
#[derive(Debug, Clone)]
pub struct DeltaRun {
    pub report: DeltaReport,
    pub base: MetricReport,
    pub perturbed: MetricReport,
}

fn key(r: &MetricRecord) -> (&str, usize) {
    (r.instance_id.as_str(), r.sentence_index)
}

/// Per-column deltas over pairs where the column is defined in both reports.
pub fn compare_reports(base: &MetricReport, perturbed: &MetricReport) -> Vec<ColumnDelta> {
    let other: BTreeMap<(&str, usize), &MetricRecord> = perturbed.records.iter().map(|r| (key(r), r)).collect();
    value_columns()
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let both: Vec<(f64, f64)> = base
                .records
                .iter()
                .filter_map(|r| {
                    let p = other.get(&key(r))?;
                    Some((r.values()[k]?, p.values()[k]?))
                })
                .collect();
            let n = both.len();
            let mean = |f: fn(&(f64, f64)) -> f64| (n > 0).then(|| both.iter().map(f).sum::<f64>() / n as f64);
            let base_mean = mean(|p| p.0);
            let perturbed_mean = mean(|p| p.1);
            ColumnDelta {
                column: (*name).to_string(),
                base_mean,
                perturbed_mean,
                delta: base_mean.zip(perturbed_mean).map(|(b, p)| p - b),
                pairs: n,
            }
        })
        .collect()
}

/// Evaluates `model` on the subset of the base corpus and on the same pairs after
/// the perturbation (or unchanged, for `None`). Subsets are selected on the base.
pub fn run_delta(
    corpus: &Corpus,
    model: &Model,
    perturbation: Option<Perturbation>,
    opts: &EvalOptions,
    seed: u64,
) -> Result<DeltaRun> {
    let (base, perturbed, excluded) = match perturbation {
        Some(p) => {
            let pc = perturb::apply(corpus, p, seed)?;
            (pc.base, pc.corpus, pc.excluded)
        }
        None => (corpus.clone(), corpus.clone(), Vec::new()),
    };
    let base_pairs: Vec<PairRef> = select(&base, opts.subset)
        .into_iter()
        .filter(|p| !excluded.contains(&base.instances[p.instance].instance_id))
        .collect();
    let perturbed_pairs = base_pairs
        .iter()
        .map(|p| {
            let id = &base.instances[p.instance].instance_id;
            let instance = perturbed
                .find(id)
                .ok_or_else(|| Error::validation(Some(id), "instance missing from the perturbed corpus"))?;
            Ok(PairRef {
                instance,
                sentence: p.sentence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let base_report = run_eval_pairs(&base, model, &base_pairs, opts)?;
    let perturbed_report = run_eval_pairs(&perturbed, model, &perturbed_pairs, opts)?;
    let name = perturbation.map_or("none".to_string(), |p| p.name().to_string());
    let base_hash = base.content_hash();
    let perturbed_hash = perturbed.content_hash();
    let params_hash = model.content_hash();
    let flags = format!("{};perturb={name};seed={seed};against={perturbed_hash}", opts.flags());
    Ok(DeltaRun {
        report: DeltaReport {
            run_id: run_id(&base_hash, &params_hash, &flags),
            perturbation: name,
            subset: opts.subset.to_string(),
            seed,
            base_hash,
            perturbed_hash,
            params_hash,
            n_pairs: base_pairs.len(),
            excluded_instances: excluded.len(),
            deltas: compare_reports(&base_report, &perturbed_report),
        },
        base: base_report,
        perturbed: perturbed_report,
    })
}

/// A sentence drawn uniformly from the reports of other instances.
fn distractor(pairs: &[PairRef], own: usize, rng: &mut seed::Rng) -> PairRef {
    loop {
        let d = pairs[rng.gen_range(0..pairs.len())];
        if d.instance != own {
            return d;
        }
    }
}

fn check_two_instances(corpus: &Corpus, pairs: &[PairRef]) -> Result<()> {
    let first = pairs.first().map(|p| p.instance);
    if corpus.instances.len() < 2 || pairs.iter().all(|p| Some(p.instance) == first) {
        return Err(Error::invalid("needs sentences from at least two instances"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveResult {
    pub run_id: String,
    pub subset: String,
    pub seed: u64,
    pub pairs: usize,
    /// Percent of pairs whose true sentence beats the distractor under local similarity.
    pub local_accuracy: f64,
    pub global_accuracy: f64,
}

/// Contrastive accuracy: each pair of the subset against one distractor sentence
/// from another report, drawn from all sentences of the corpus.
pub fn run_contrastive(corpus: &Corpus, model: &Model, subset: Subset, seed: u64) -> Result<ContrastiveResult> {
    let pool = corpus.all_pairs();
    check_two_instances(corpus, &pool)?;
    let pairs = select(corpus, subset);
    if pairs.is_empty() {
        return Err(Error::invalid(format!("subset {subset} is empty")));
    }
    let mut rng = seed::derived_rng(seed, "contrastive");
    let mut cache = ImageCache::new(model, corpus);
    let mut local = Vec::with_capacity(pairs.len());
    let mut global = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let d = distractor(&pool, p.instance, &mut rng);
        let image = cache.get(p.instance)?.clone();
        let sims = |tokens: &[String]| -> Result<(f64, f64)> {
            let (emb, att) = model.pair(tokens, &image)?;
            similarities(&emb, &att)
        };
        let truth = sims(&corpus.sentence(*p).tokens)?;
        let other = sims(&corpus.sentence(d).tokens)?;
        local.push((truth.0, other.0));
        global.push((truth.1, other.1));
    }
    let flags = format!("contrastive;subset={subset};seed={seed}");
    Ok(ContrastiveResult {
        run_id: run_id(&corpus.content_hash(), &model.content_hash(), &flags),
        subset: subset.to_string(),
        seed,
        pairs: pairs.len(),
        local_accuracy: contrastive_accuracy(&local)?,
        global_accuracy: contrastive_accuracy(&global)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlResult {
    pub run_id: String,
    pub seed: u64,
    pub pairs: usize,
    pub mean_kl: f64,
    pub mean_entropy: f64,
}

/// Mean symmetric KL between the pooled attention of each pair and that of the
/// same image with a random sentence from another report.
pub fn run_kl(corpus: &Corpus, model: &Model, seed: u64) -> Result<KlResult> {
    let pairs = corpus.all_pairs();
    check_two_instances(corpus, &pairs)?;
    let mut rng = seed::derived_rng(seed, "kl");
    let mut cache = ImageCache::new(model, corpus);
    let mut kl = 0.0;
    let mut entropy = 0.0;
    for p in &pairs {
        let d = distractor(&pairs, p.instance, &mut rng);
        let a = pair_attention(&mut cache, p.instance, &corpus.sentence(*p).tokens)?;
        let b = pair_attention(&mut cache, p.instance, &corpus.sentence(d).tokens)?;
        kl += symmetric_kl(a.pooled(), b.pooled())?;
        entropy += attention_entropy(a.pooled())?;
    }
    let n = pairs.len() as f64;
    Ok(KlResult {
        run_id: run_id(&corpus.content_hash(), &model.content_hash(), &format!("kl;seed={seed}")),
        seed,
        pairs: pairs.len(),
        mean_kl: kl / n,
        mean_entropy: entropy / n,
    })
}

/// Mean Likert ratings of one `(instance_id, sentence_index)` key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingMeans {
    pub recall: f64,
    pub precision: f64,
    pub intuitiveness: f64,
}

pub const RATING_COLUMNS: [&str; 3] = ["rating_recall", "rating_precision", "rating_intuitiveness"];

/// Averages exported ratings per key. Rows with a custom prompt are skipped since
/// they have no metric row to join with. Expects the export header of the
/// annotation service (`instance_id`, `sentence_index`, `recall`, `precision`,
/// `intuitiveness`, optionally `model_id` and `custom`).
pub fn read_ratings(csv_text: &str, model_id: Option<&str>) -> Result<BTreeMap<(String, usize), RatingMeans>> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = r.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Parse(format!("ratings CSV lacks column `{name}`")));
    let (ci, cs) = (need("instance_id")?, need("sentence_index")?);
    let (cr, cp, cu) = (need("recall")?, need("precision")?, need("intuitiveness")?);
    let (cm, cc) = (col("model_id"), col("custom"));
    let mut sums: BTreeMap<(String, usize), ([f64; 3], usize)> = BTreeMap::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        if cc.is_some_and(|c| &row[c] == "true") || row[cs].is_empty() {
            continue;
        }
        if let (Some(want), Some(c)) = (model_id, cm) {
            if &row[c] != want {
                continue;
            }
        }
        let num = |k: usize| -> Result<f64> { row[k].parse().map_err(|_| Error::Parse(format!("bad rating `{}`", &row[k]))) };
        let idx: usize = row[cs]
            .parse()
            .map_err(|_| Error::Parse(format!("bad sentence index `{}`", &row[cs])))?;
        let entry = sums.entry((row[ci].to_string(), idx)).or_insert(([0.0; 3], 0));
        entry.0[0] += num(cr)?;
        entry.0[1] += num(cp)?;
        entry.0[2] += num(cu)?;
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| {
            let n = n as f64;
            (
                k,
                RatingMeans {
                    recall: s[0] / n,
                    precision: s[1] / n,
                    intuitiveness: s[2] / n,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub columns: Vec<String>,
    /// Row-major Pearson coefficients; `None` when fewer than two rows define
    /// both columns or either has zero variance there.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == a)?;
        let j = self.columns.iter().position(|c| c == b)?;
        self.values[i][j]
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Parse(e.to_string());
        let mut header = vec!["column".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (name, row) in self.columns.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Pairwise Pearson correlations over the numeric report columns and, when given,
/// the mean ratings joined on `(instance_id, sentence_index)`. Each coefficient
/// uses the rows where both of its columns are defined.
pub fn run_correlations(
    report: &MetricReport,
    ratings: Option<&BTreeMap<(String, usize), RatingMeans>>,
) -> CorrelationMatrix {
    let mut columns: Vec<String> = value_columns().iter().map(|c| c.to_string()).collect();
    let mut series: Vec<Vec<Option<f64>>> = (0..columns.len())
        .map(|k| report.records.iter().map(|r| r.values()[k]).collect())
        .collect();
    if let Some(ratings) = ratings {
        let joined: Vec<Option<&RatingMeans>> = report
            .records
            .iter()
            .map(|r| ratings.get(&(r.instance_id.clone(), r.sentence_index)))
            .collect();
        let pick: [fn(&RatingMeans) -> f64; 3] = [|m| m.recall, |m| m.precision, |m| m.intuitiveness];
        for (name, f) in RATING_COLUMNS.iter().zip(pick) {
            columns.push(name.to_string());
            series.push(joined.iter().map(|m| m.map(f)).collect());
        }
    }
    let n = columns.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let (x, y): (Vec<f64>, Vec<f64>) = series[i]
                .iter()
                .zip(&series[j])
                .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
                .unzip();
            let r = if x.len() < 2 {
                None
            } else if i == j {
                pearson(&x, &y).ok().map(|_| 1.0)
            } else {
                pearson(&x, &y).ok()
            };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    CorrelationMatrix { columns, values }
}
