//! Contrastive pretraining of every variant and few-shot attention supervision.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::autodiff::{Gradients, Graph, Tensor};
use super::encoder::{attention_graph, encode_image_graph, encode_text_graph, ParamVars};
use super::loss::{alignment_loss_graph, contrastive_loss_graph, AlignmentTarget, ImageVars, TextVars};
use super::masking::{mask_entities_with, mask_words_with, Lexicon};
use super::optim::Adam;
use super::params::{Model, ModelConfig, ModelParams, Vocab};
use crate::corpus::{Corpus, PairRef, Split};
use crate::error::{Error, Result};
use crate::saliency::segmentation_label;
use crate::seed;
use crate::subsets::{filter_abnormal, trim_large_bboxes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Base,
    WordMask,
    ClinicalMask,
    NoAttn,
    Abnormal,
    RandSents,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::WordMask,
        Variant::ClinicalMask,
        Variant::NoAttn,
        Variant::Abnormal,
        Variant::RandSents,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::WordMask => "word-mask",
            Variant::ClinicalMask => "clinical-mask",
            Variant::NoAttn => "no-attn",
            Variant::Abnormal => "abnormal",
            Variant::RandSents => "rand-sents",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One sentence as token ids with the patches of its image.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInput {
    pub ids: Vec<usize>,
    pub patches: Tensor,
}

fn flat_grads(grads: &Gradients, pv: &ParamVars, params: &ModelParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.len());
    for (v, t) in pv.vars().iter().zip(params.tensors()) {
        match grads.get(*v) {
            Some(g) => out.extend_from_slice(&g.data),
            None => out.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    out
}

fn check_finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("{what} loss is {loss}")))
    }
}

/// Contrastive loss of a batch and, when asked, its gradient over the flat parameters.
pub fn contrastive_batch_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[PairInput],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, params);
    let mut texts: Vec<TextVars> = Vec::with_capacity(batch.len());
    let mut images: Vec<ImageVars> = Vec::with_capacity(batch.len());
    for p in batch {
        if p.ids.is_empty() {
            return Err(Error::invalid("cannot encode an empty token list"));
        }
        texts.push(encode_text_graph(&mut g, &pv, &p.ids));
        images.push(encode_image_graph(&mut g, &pv, &p.patches));
    }
    let loss = contrastive_loss_graph(&mut g, &texts, &images, pv.no_attn(), cfg)?;
    let value = check_finite(g.value(loss).item(), "contrastive")?;
    let grad = want_grad.then(|| flat_grads(&g.backward(loss), &pv, params));
    Ok((value, grad))
}

/// A labelled sentence for attention supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentExample {
    pub input: PairInput,
    pub target: AlignmentTarget,
}

/// Mean alignment loss of pooled attention over a batch, with optional gradient.
pub fn alignment_batch_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[AlignmentExample],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("alignment loss of an empty batch"));
    }
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, params);
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.input.ids.is_empty() {
            return Err(Error::invalid("cannot encode an empty token list"));
        }
        let (t_l, _) = encode_text_graph(&mut g, &pv, &ex.input.ids);
        let (v_l, _) = encode_image_graph(&mut g, &pv, &ex.input.patches);
        let att = attention_graph(&mut g, t_l, v_l, pv.no_attn(), cfg.tau);
        let pooled = g.mean_rows(att);
        losses.push(alignment_loss_graph(&mut g, pooled, &ex.target));
    }
    let n = losses.len();
    let all = g.stack(&losses, 1, n);
    let loss = g.mean(all);
    let value = check_finite(g.value(loss).item(), "alignment")?;
    let grad = want_grad.then(|| flat_grads(&g.backward(loss), &pv, params));
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
}

struct PatchCache<'a> {
    corpus: &'a Corpus,
    grid: (usize, usize),
    cache: HashMap<usize, Tensor>,
}

impl<'a> PatchCache<'a> {
    fn new(corpus: &'a Corpus, grid: (usize, usize)) -> Self {
        Self {
            corpus,
            grid,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, instance: usize) -> Result<Tensor> {
        if let Some(t) = self.cache.get(&instance) {
            return Ok(t.clone());
        }
        let t = super::encoder::patchify(&self.corpus.instances[instance].image, self.grid)?;
        self.cache.insert(instance, t.clone());
        Ok(t)
    }
}

/// Image size shared by every instance of the corpus.
pub fn corpus_image_size(corpus: &Corpus) -> Result<(usize, usize)> {
    let first = corpus
        .instances
        .first()
        .ok_or_else(|| Error::invalid("corpus has no instances"))?;
    let size = (first.image.height(), first.image.width());
    if let Some(other) = corpus
        .instances
        .iter()
        .find(|i| (i.image.height(), i.image.width()) != size)
    {
        return Err(Error::validation(
            Some(&other.instance_id),
            format!("all images must share one size ({}x{})", size.0, size.1),
        ));
    }
    Ok(size)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn validation_loss(params: &ModelParams, cfg: &ModelConfig, val: &[PairInput]) -> Result<Option<f64>> {
    let losses = val
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| contrastive_batch_loss(params, cfg, c, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((!losses.is_empty()).then(|| mean(&losses)))
}

/// Trains a variant with Adam on minibatch contrastive loss, stopping once the
/// validation loss has not improved for `patience` epochs; the parameters of the
/// last epoch run are returned. The config's image size is taken from the corpus.
pub fn train(
    corpus: &Corpus,
    cfg: &ModelConfig,
    seed: u64,
    variant: Variant,
    lexicon: Option<&Lexicon>,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.image_size = corpus_image_size(corpus)?;
    if variant == Variant::NoAttn {
        cfg.no_attn = true;
    }
    cfg.validate()?;
    let builtin;
    let lexicon = match lexicon {
        Some(l) => l,
        None => {
            builtin = Lexicon::builtin();
            &builtin
        }
    };

    let keep = |pairs: Vec<PairRef>| -> Vec<PairRef> {
        if variant == Variant::Abnormal {
            let abnormal: std::collections::HashSet<PairRef> = filter_abnormal(corpus).into_iter().collect();
            pairs.into_iter().filter(|p| abnormal.contains(p)).collect()
        } else {
            pairs
        }
    };
    let train_pairs = keep(corpus.pairs_in(Split::Train));
    if train_pairs.is_empty() {
        return Err(Error::invalid(format!("no training pairs for variant {variant}")));
    }
    let val_pairs = keep(corpus.pairs_in(Split::Valid));
    let all_train = corpus.pairs_in(Split::Train);

    let mut model = Model::init(cfg.clone(), Vocab::from_corpus(corpus), seed)?;
    let mut patches = PatchCache::new(corpus, cfg.grid);
    let val_inputs = val_pairs
        .iter()
        .map(|&p| {
            Ok(PairInput {
                ids: model.token_ids(&corpus.sentence(p).tokens)?,
                patches: patches.get(p.instance)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut flat = model.params.flat();
    let mut opt = Adam::new(flat.len(), cfg.learning_rate);
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let mut rng = seed::derived_rng(seed, &format!("epoch-{epoch}"));
        let mut order = train_pairs.clone();
        order.shuffle(&mut rng);
        let mut inputs = Vec::with_capacity(order.len());
        for p in &order {
            let tokens = match variant {
                Variant::RandSents => {
                    if corpus.instances_in(Split::Train).nth(1).is_none() {
                        return Err(Error::invalid("rand-sents needs at least two training instances"));
                    }
                    loop {
                        let donor = all_train[rng.gen_range(0..all_train.len())];
                        if donor.instance != p.instance {
                            break corpus.sentence(donor).tokens.clone();
                        }
                    }
                }
                Variant::WordMask => mask_words_with(&corpus.sentence(*p).tokens, cfg.mask_word_prob, &mut rng)?,
                Variant::ClinicalMask => {
                    mask_entities_with(&corpus.sentence(*p).tokens, lexicon, cfg.mask_entity_prob, &mut rng)?
                }
                _ => corpus.sentence(*p).tokens.clone(),
            };
            inputs.push(PairInput {
                ids: model.token_ids(&tokens)?,
                patches: patches.get(p.instance)?,
            });
        }

        let mut losses = Vec::new();
        for batch in inputs.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let (loss, grad) = contrastive_batch_loss(&model.params, &cfg, batch, true)?;
            opt.step(&mut flat, &grad.expect("gradient requested"));
            model.params.set_flat(&flat)?;
            losses.push(loss);
        }
        if losses.is_empty() {
            return Err(Error::invalid("training split yields no batch of at least two pairs"));
        }
        let val_loss = validation_loss(&model.params, &cfg, &val_inputs)?;
        history.push(EpochLog {
            epoch,
            train_loss: mean(&losses),
            val_loss,
        });
        if let Some(v) = val_loss {
            if v < best {
                best = v;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        stopped_early,
    })
}

/// Unaugmented contrastive inputs for the given pairs.
pub fn pair_inputs(model: &Model, corpus: &Corpus, pairs: &[PairRef]) -> Result<Vec<PairInput>> {
    let mut patches = PatchCache::new(corpus, model.config.grid);
    pairs
        .iter()
        .map(|&p| {
            Ok(PairInput {
                ids: model.token_ids(&corpus.sentence(p).tokens)?,
                patches: patches.get(p.instance)?,
            })
        })
        .collect()
}

/// Alignment examples for the given pairs, optionally with large-box trimming.
pub fn alignment_examples(model: &Model, corpus: &Corpus, pairs: &[PairRef], trim: bool) -> Result<Vec<AlignmentExample>> {
    let mut patches = PatchCache::new(corpus, model.config.grid);
    pairs
        .iter()
        .map(|&p| {
            let inst = &corpus.instances[p.instance];
            let sentence = corpus.sentence(p);
            let boxes = if trim {
                trim_large_bboxes(sentence).bboxes
            } else {
                sentence.bboxes.clone()
            };
            let label = segmentation_label(&boxes, (inst.image.height(), inst.image.width()));
            Ok(AlignmentExample {
                input: PairInput {
                    ids: model.token_ids(&sentence.tokens)?,
                    patches: patches.get(p.instance)?,
                },
                target: AlignmentTarget::new(model.config.grid, &label)?,
            })
        })
        .collect()
}

/// Disjoint labelled and validation pair sets drawn from the valid split: instances
/// are shuffled by `seed` and their boxed sentences dealt to the labelled set until
/// it holds `n_labeled`, then to the validation set until it holds `n_val`.
pub fn finetune_pairs(corpus: &Corpus, n_labeled: usize, n_val: usize, seed: u64) -> (Vec<PairRef>, Vec<PairRef>) {
    let mut instances: Vec<usize> = corpus.instances_in(Split::Valid).map(|(i, _)| i).collect();
    instances.shuffle(&mut seed::derived_rng(seed, "finetune-pairs"));
    let (mut labeled, mut val) = (Vec::new(), Vec::new());
    for i in instances {
        let target = if labeled.len() < n_labeled {
            &mut labeled
        } else if val.len() < n_val {
            &mut val
        } else {
            break;
        };
        for (s, sentence) in corpus.instances[i].report.iter().enumerate() {
            if !sentence.bboxes.is_empty() {
                target.push(PairRef { instance: i, sentence: s });
            }
        }
    }
    labeled.truncate(n_labeled);
    val.truncate(n_val);
    (labeled, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStep {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model,
    /// Optimizer steps taken.
    pub steps: usize,
    /// Step of the returned checkpoint (0 = the input parameters).
    pub best_step: usize,
    /// Step 0 followed by one entry per optimizer step.
    pub history: Vec<FinetuneStep>,
}

/// Full-batch Adam on the alignment loss of `labeled`. A checkpoint is accepted
/// when its validation loss improves on the last accepted one without its training
/// loss increasing; training stops after `finetune_patience` steps without an
/// accepted checkpoint or `finetune_steps` steps, and the last accepted checkpoint
/// is returned. An empty `val` falls back to the training loss.
pub fn finetune_alignment(model: &Model, labeled: &[AlignmentExample], val: &[AlignmentExample]) -> Result<FinetuneOutcome> {
    if labeled.is_empty() {
        return Err(Error::invalid("finetuning needs at least one labelled example"));
    }
    let cfg = &model.config;
    let mut params = model.params.clone();
    let mut flat = params.flat();
    let mut opt = Adam::new(flat.len(), cfg.finetune_learning_rate);
    let evaluate = |p: &ModelParams| -> Result<(f64, Vec<f64>, f64)> {
        let (train, grad) = alignment_batch_loss(p, cfg, labeled, true)?;
        let v = if val.is_empty() {
            train
        } else {
            alignment_batch_loss(p, cfg, val, false)?.0
        };
        Ok((train, grad.expect("gradient requested"), v))
    };

    let (mut train_loss, mut grad, val_loss) = evaluate(&params)?;
    let mut history = vec![FinetuneStep {
        step: 0,
        train_loss,
        val_loss,
        accepted: true,
    }];
    let (mut best_val, mut best_train, mut best_step) = (val_loss, train_loss, 0);
    let mut best_params = params.clone();
    let mut stale = 0;
    let mut steps = 0;
    for step in 1..=cfg.finetune_steps {
        opt.step(&mut flat, &grad);
        params.set_flat(&flat)?;
        steps = step;
        let (t, g, v) = evaluate(&params)?;
        train_loss = t;
        grad = g;
        let accepted = v < best_val && train_loss <= best_train;
        history.push(FinetuneStep {
            step,
            train_loss,
            val_loss: v,
            accepted,
        });
        if accepted {
            best_val = v;
            best_train = train_loss;
            best_step = step;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.finetune_patience {
                break;
            }
        }
    }
    Ok(FinetuneOutcome {
        model: Model {
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            params: best_params,
        },
        steps,
        best_step,
        history,
    })
}
