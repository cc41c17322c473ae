//! Scalar evaluation quantities over pixel scores, labels, attention
//! distributions, similarity pairs and paired series.
//!
//! Tie conventions: AUROC gives tied positive/negative pairs half credit. Every
//! top-k selection (AP ranking, IOU@q, precision@q) orders by descending score and
//! breaks ties by row-major pixel index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::{PixelScoreMap, SegmentationLabel};

fn check_lengths(s: &PixelScoreMap, l: &SegmentationLabel) -> Result<()> {
    if s.len() != l.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", s.len(), l.len())));
    }
    Ok(())
}

/// Indices sorted by descending score, ties by ascending index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Probability that a random positive pixel outscores a random negative one.
pub fn auroc(s: &PixelScoreMap, l: &SegmentationLabel) -> Result<f64> {
    check_lengths(s, l)?;
    let n_pos = l.positives();
    let n_neg = l.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUROC needs both positive and negative pixels"));
    }
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // midranks (1-based) over tie groups
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && s.scores[idx[end]] == s.scores[idx[start]] {
            end += 1;
        }
        let midrank = (start + 1 + end) as f64 / 2.0;
        let group_pos = idx[start..end].iter().filter(|&&p| l.labels[p]).count();
        pos_rank_sum += midrank * group_pos as f64;
        start = end;
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean over positives of precision at each positive's rank.
pub fn average_precision(s: &PixelScoreMap, l: &SegmentationLabel) -> Result<f64> {
    check_lengths(s, l)?;
    let n_pos = l.positives();
    if n_pos == 0 {
        return Err(Error::Undefined("average precision needs a positive pixel"));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, p) in ranked(&s.scores).into_iter().enumerate() {
        if l.labels[p] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

fn top_k(s: &PixelScoreMap, q: u32) -> Result<Vec<usize>> {
    if q == 0 || q >= 100 {
        return Err(Error::invalid(format!("percentile {q} outside (0, 100)")));
    }
    let k = q as usize * s.len() / 100;
    if k == 0 {
        return Err(Error::Undefined("top-q% selects zero pixels"));
    }
    let mut order = ranked(&s.scores);
    order.truncate(k);
    Ok(order)
}

fn top_k_overlap(s: &PixelScoreMap, l: &SegmentationLabel, q: u32) -> Result<(usize, usize)> {
    check_lengths(s, l)?;
    let top = top_k(s, q)?;
    let inter = top.iter().filter(|&&p| l.labels[p]).count();
    Ok((inter, top.len()))
}

/// IOU between the top `q`% scored pixels and the labeled pixels.
pub fn iou_at(s: &PixelScoreMap, l: &SegmentationLabel, q: u32) -> Result<f64> {
    let (inter, k) = top_k_overlap(s, l, q)?;
    let union = k + l.positives() - inter;
    Ok(inter as f64 / union as f64)
}

/// Fraction of the top `q`% scored pixels that are labeled.
pub fn precision_at(s: &PixelScoreMap, l: &SegmentationLabel, q: u32) -> Result<f64> {
    let (inter, k) = top_k_overlap(s, l, q)?;
    Ok(inter as f64 / k as f64)
}

fn check_normalized(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid(format!("{what}: empty distribution")));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid(format!("{what}: negative or non-finite weight")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("{what}: weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn attention_entropy(w: &[f64]) -> Result<f64> {
    check_normalized(w, "entropy")?;
    Ok(-w
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>())
}

pub const KL_SMOOTHING: f64 = 1e-8;

fn smooth(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().map(|x| x + KL_SMOOTHING).sum();
    w.iter().map(|x| (x + KL_SMOOTHING) / total).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// `KL(a||b) + KL(b||a)` after additive smoothing by [`KL_SMOOTHING`].
pub fn symmetric_kl(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("distributions of length {} and {}", a.len(), b.len())));
    }
    check_normalized(a, "symmetric KL")?;
    check_normalized(b, "symmetric KL")?;
    let (a, b) = (smooth(a), smooth(b));
    Ok(kl(&a, &b) + kl(&b, &a))
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("series of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a zero-variance series"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Percentage of `(true, random)` similarity pairs where the true one is strictly larger.
pub fn contrastive_accuracy(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("contrastive accuracy of an empty set"));
    }
    let wins = pairs.iter().filter(|(t, r)| t > r).count();
    Ok(100.0 * wins as f64 / pairs.len() as f64)
}

/// Top-q thresholds reported for IOU and precision.
pub const PERCENTILES: [u32; 3] = [5, 10, 30];

/// Fixed CSV column order of a [`MetricReport`].
pub const COLUMNS: [&str; 14] = [
    "instance_id",
    "sentence_index",
    "auroc",
    "avg_precision",
    "iou_5",
    "iou_10",
    "iou_30",
    "precision_5",
    "precision_10",
    "precision_30",
    "entropy",
    "no_attn_score",
    "local_sim",
    "global_sim",
];

/// Names of the numeric columns (everything after the two key columns).
pub fn value_columns() -> &'static [&'static str] {
    &COLUMNS[2..]
}

/// One evaluated sentence-instance pair. `None` marks an undefined metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub instance_id: String,
    pub sentence_index: usize,
    pub auroc: Option<f64>,
    pub avg_precision: Option<f64>,
    pub iou: [Option<f64>; 3],
    pub precision: [Option<f64>; 3],
    pub entropy: Option<f64>,
    pub no_attn_score: Option<f64>,
    pub local_sim: Option<f64>,
    pub global_sim: Option<f64>,
}

impl MetricRecord {
    /// Localization metrics of `s` against `l`; the attention and similarity
    /// columns are left unset.
    pub fn localization(instance_id: &str, sentence_index: usize, s: &PixelScoreMap, l: &SegmentationLabel) -> Result<Self> {
        check_lengths(s, l)?;
        let defined = |r: Result<f64>| -> Result<Option<f64>> {
            match r {
                Ok(v) => Ok(Some(v)),
                Err(Error::Undefined(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let mut iou = [None; 3];
        let mut precision = [None; 3];
        for (k, &q) in PERCENTILES.iter().enumerate() {
            iou[k] = defined(iou_at(s, l, q))?;
            precision[k] = defined(precision_at(s, l, q))?;
        }
        Ok(Self {
            instance_id: instance_id.to_owned(),
            sentence_index,
            auroc: defined(auroc(s, l))?,
            avg_precision: defined(average_precision(s, l))?,
            iou,
            precision,
            entropy: None,
            no_attn_score: None,
            local_sim: None,
            global_sim: None,
        })
    }

    /// Numeric values in [`value_columns`] order.
    pub fn values(&self) -> [Option<f64>; 12] {
        [
            self.auroc,
            self.avg_precision,
            self.iou[0],
            self.iou[1],
            self.iou[2],
            self.precision[0],
            self.precision[1],
            self.precision[2],
            self.entropy,
            self.no_attn_score,
            self.local_sim,
            self.global_sim,
        ]
    }

    pub fn value(&self, column: &str) -> Option<f64> {
        value_columns()
            .iter()
            .position(|c| *c == column)
            .and_then(|k| self.values()[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnAggregate {
    pub column: String,
    pub mean: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

/// Per-pair records, sorted by `(instance_id, sentence_index)`, with their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
    pub aggregates: Vec<ColumnAggregate>,
}

impl MetricReport {
    pub fn new(mut records: Vec<MetricRecord>) -> Self {
        records.sort_by(|a, b| {
            a.instance_id
                .cmp(&b.instance_id)
                .then(a.sentence_index.cmp(&b.sentence_index))
        });
        let aggregates = value_columns()
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let vals: Vec<f64> = records.iter().filter_map(|r| r.values()[k]).collect();
                ColumnAggregate {
                    column: (*name).to_owned(),
                    mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                    defined: vals.len(),
                    undefined: records.len() - vals.len(),
                }
            })
            .collect();
        Self { records, aggregates }
    }

    pub fn mean(&self, column: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.column == column)
            .and_then(|a| a.mean)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.instance_id.clone(), r.sentence_index.to_string()];
            row.extend(r.values().iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Reads a report previously written by [`MetricReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().ne(COLUMNS.iter().copied()) {
            return Err(Error::Parse("unexpected metric CSV header".into()));
        }
        let mut records = Vec::new();
        for row in r.records() {
            let row = row.map_err(csv_err)?;
            let num = |k: usize| -> Result<Option<f64>> {
                let f = &row[k];
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse().map(Some).map_err(|_| Error::Parse(format!("bad number `{f}`")))
                }
            };
            records.push(MetricRecord {
                instance_id: row[0].to_owned(),
                sentence_index: row[1]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad sentence index `{}`", &row[1])))?,
                auroc: num(2)?,
                avg_precision: num(3)?,
                iou: [num(4)?, num(5)?, num(6)?],
                precision: [num(7)?, num(8)?, num(9)?],
                entropy: num(10)?,
                no_attn_score: num(11)?,
                local_sim: num(12)?,
                global_sim: num(13)?,
            });
        }
        Ok(MetricReport::new(records))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(scores: &[f64]) -> PixelScoreMap {
        PixelScoreMap::new(scores.len(), 1, scores.to_vec()).unwrap()
    }

    fn label(bits: &[u8]) -> SegmentationLabel {
        SegmentationLabel {
            width: bits.len(),
            height: 1,
            labels: bits.iter().map(|&b| b == 1).collect(),
        }
    }

    // Exhaustive pairwise oracle, independent of the rank-sum implementation.
    fn auroc_pairs(s: &[f64], l: &[bool]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in l.iter().enumerate() {
            for (j, &lj) in l.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    credit += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        credit / pairs
    }

    const S: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
    const L: [u8; 4] = [1, 0, 1, 0];

    #[test]
    fn auroc_examples() {
        assert!((auroc(&map(&S), &label(&L)).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(auroc(&map(&S), &label(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&map(&[0.3; 4]), &label(&L)).unwrap(), 0.5);
        assert!(matches!(auroc(&map(&S), &label(&[1; 4])), Err(Error::Undefined(_))));
        assert!(matches!(auroc(&map(&S), &label(&[0; 4])), Err(Error::Undefined(_))));
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&map(&S), &label(&L)).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&map(&S), &label(&[1, 1, 0, 0])).unwrap(), 1.0);
        let p = 7;
        let s: Vec<f64> = (0..p).map(|k| (p - k) as f64).collect();
        let mut l = vec![0u8; p];
        l[p - 1] = 1;
        assert!((average_precision(&map(&s), &label(&l)).unwrap() - 1.0 / p as f64).abs() < 1e-12);
        assert!(average_precision(&map(&S), &label(&[0; 4])).is_err());
    }

    #[test]
    fn threshold_examples() {
        let s = PixelScoreMap::new(2, 2, S.to_vec()).unwrap();
        let l = SegmentationLabel {
            width: 2,
            height: 2,
            labels: L.iter().map(|&b| b == 1).collect(),
        };
        assert!((iou_at(&s, &l, 50).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(precision_at(&s, &l, 50).unwrap(), 0.5);
        let exact = label(&[1, 1, 0, 0]);
        assert_eq!(iou_at(&map(&S), &exact, 50).unwrap(), 1.0);
        assert_eq!(precision_at(&map(&S), &exact, 50).unwrap(), 1.0);
        let disjoint = label(&[0, 0, 1, 1]);
        assert_eq!(iou_at(&map(&S), &disjoint, 50).unwrap(), 0.0);
        assert_eq!(precision_at(&map(&S), &disjoint, 50).unwrap(), 0.0);
        assert!(matches!(iou_at(&map(&S), &exact, 5), Err(Error::Undefined(_))));
        assert!(iou_at(&map(&S), &exact, 100).is_err());
    }

    #[test]
    fn ties_use_pixel_order() {
        // all tied: top-50% is the first two pixels
        assert_eq!(precision_at(&map(&[1.0; 4]), &label(&[1, 1, 0, 0]), 50).unwrap(), 1.0);
        assert_eq!(precision_at(&map(&[1.0; 4]), &label(&[0, 0, 1, 1]), 50).unwrap(), 0.0);
    }

    #[test]
    fn entropy_examples() {
        let uniform = vec![1.0 / 361.0; 361];
        assert!((attention_entropy(&uniform).unwrap() - 5.889).abs() < 1e-3);
        assert!((attention_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(attention_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(attention_entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn kl_examples() {
        let a = [0.75, 0.25];
        let b = [0.25, 0.75];
        assert_eq!(symmetric_kl(&a, &a).unwrap(), 0.0);
        // direct evaluation of 2 * (0.5 ln 3)
        assert!((symmetric_kl(&a, &b).unwrap() - 3f64.ln()).abs() < 1e-6);
        assert_eq!(symmetric_kl(&a, &b).unwrap(), symmetric_kl(&b, &a).unwrap());
        assert!(symmetric_kl(&a, &[1.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let yn: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y2).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &yn).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::Undefined(_))));
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn contrastive_accuracy_examples() {
        assert_eq!(contrastive_accuracy(&[(0.8, 0.3); 5]).unwrap(), 100.0);
        assert_eq!(contrastive_accuracy(&[(0.5, 0.5)]).unwrap(), 0.0);
        assert!(contrastive_accuracy(&[]).is_err());
    }

    #[test]
    fn exchangeable_similarities_average_fifty() {
        use rand::Rng;
        let mut rng = crate::seed::rng(2024);
        let pairs: Vec<(f64, f64)> = (0..10_000).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
        let acc = contrastive_accuracy(&pairs).unwrap();
        assert!((acc - 50.0).abs() <= 3.0, "{acc}");
    }

    #[test]
    fn report_aggregates_skip_undefined() {
        let l_dead = label(&[1, 1, 1, 1]);
        let l_ok = label(&L);
        let a = MetricRecord::localization("a", 0, &map(&S), &l_ok).unwrap();
        let b = MetricRecord::localization("b", 0, &map(&S), &l_dead).unwrap();
        assert!(b.auroc.is_none());
        let rep = MetricReport::new(vec![b, a]);
        assert_eq!(rep.records[0].instance_id, "a");
        let au = &rep.aggregates[0];
        assert_eq!((au.defined, au.undefined), (1, 1));
        assert_eq!(au.mean, Some(0.75));
        let back = MetricReport::from_csv(&rep.to_csv().unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (1usize..=64).prop_flat_map(|p| {
            (
                proptest::collection::vec(prop_oneof![Just(0.0), Just(0.5), 0.0f64..1.0], p),
                proptest::collection::vec(any::<bool>(), p),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_equals_pairwise((s, l) in arb_case()) {
            let pos = l.iter().filter(|&&b| b).count();
            prop_assume!(pos > 0 && pos < l.len());
            let sm = map(&s);
            let lm = SegmentationLabel { width: l.len(), height: 1, labels: l.clone() };
            prop_assert!((auroc(&sm, &lm).unwrap() - auroc_pairs(&s, &l)).abs() < 1e-9);
        }

        #[test]
        fn auroc_invariant_under_monotone_maps((s, l) in arb_case()) {
            let pos = l.iter().filter(|&&b| b).count();
            prop_assume!(pos > 0 && pos < l.len());
            let lm = SegmentationLabel { width: l.len(), height: 1, labels: l };
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
            prop_assert_eq!(auroc(&map(&s), &lm).unwrap(), auroc(&map(&t), &lm).unwrap());
        }

        #[test]
        fn iou_bounded_by_precision((s, l) in arb_case(), q in prop_oneof![Just(5u32), Just(10), Just(30), 1u32..100]) {
            let lm = SegmentationLabel { width: l.len(), height: 1, labels: l };
            if let (Ok(i), Ok(p)) = (iou_at(&map(&s), &lm, q), precision_at(&map(&s), &lm, q)) {
                prop_assert!(i <= p);
            }
        }

        #[test]
        fn entropy_peaks_at_uniform(raw in proptest::collection::vec(0.001f64..1.0, 2..40)) {
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let h = attention_entropy(&w).unwrap();
            prop_assert!(h <= (w.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn kl_nonnegative(raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30)) {
            let (ta, tb): (f64, f64) = raw.iter().fold((0.0, 0.0), |acc, (x, y)| (acc.0 + x, acc.1 + y));
            prop_assume!(ta > 0.0 && tb > 0.0);
            let a: Vec<f64> = raw.iter().map(|(x, _)| x / ta).collect();
            let b: Vec<f64> = raw.iter().map(|(_, y)| y / tb).collect();
            prop_assert!(symmetric_kl(&a, &b).unwrap() >= -1e-15);
        }
    }
}
