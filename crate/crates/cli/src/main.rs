use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use attnprobe::corpus::{generate_synthetic_corpus, load_corpus, Corpus, GeneratorConfig, Split};
use attnprobe::heatmap::{write_heatmap, HeatmapSidecar};
use attnprobe::model::{
    alignment_examples, check_model_gradients, finetune_alignment, finetune_pairs, pair_inputs, train, Lexicon, Model,
    ModelConfig, Variant,
};
use attnprobe::perturb::{self, Perturbation};
use attnprobe::runner::{
    read_ratings, run_contrastive, run_correlations, run_delta, run_eval, run_kl, EvalOptions, EvalSummary,
};
use attnprobe::metrics::MetricReport;
use attnprobe::saliency::{attention_pixel_scores, PixelPath};
use attnprobe::subsets::Subset;
use attnprobe::synthtext;

#[derive(Parser)]
#[command(name = "attnprobe", version, about = "Evaluate how faithfully cross-modal attention localizes text")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate or generate corpus files.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Rule-based sentence rendering.
    #[command(subcommand)]
    Synthtext(SynthCmd),
    /// Seeded corpus perturbations.
    #[command(subcommand)]
    Perturb(PerturbCmd),
    /// Train, finetune and gradient-check the two-tower model.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Evaluation runs; each writes a CSV and a JSON summary beside it.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Annotation service.
    #[command(subcommand)]
    Annot(AnnotCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Validate {
        path: PathBuf,
    },
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Generator config as JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        valid: Option<usize>,
        #[arg(long)]
        gold: Option<usize>,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Replace every sentence that carries condition labels by its rendering.
    Render {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PerturbCmd {
    Apply {
        /// swap-left-right, shuffle-in-report, random-sentences, random-bboxes or synth-swap-conditions
        name: Perturbation,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainConfigArgs {
    /// ModelConfig as JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Attention temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainConfigArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => ModelConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Contrastive pretraining of one variant.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "base")]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: TrainConfigArgs,
        /// Multi-word entity spans for clinical-mask, one per line.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch losses as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Few-shot attention supervision on boxed sentences of the valid split.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        labeled: usize,
        #[arg(long, default_value_t = 30)]
        val: usize,
        #[arg(long)]
        trim_large_boxes: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Central-difference check of both training losses at the given parameters.
    Gradcheck {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    params: PathBuf,
    /// Restrict to one split (train, valid, gold) before anything else.
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long, default_value = "all")]
    subset: Subset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trim_large_boxes: bool,
    #[arg(long, default_value = "grid-bilinear")]
    pixel_path: PixelPath,
    /// CSV output; the JSON summary goes to the same path with a .json extension.
    #[arg(long)]
    out: PathBuf,
}

impl EvalArgs {
    fn load(&self) -> Result<(Corpus, Model)> {
        let corpus = load_corpus(&self.corpus).with_context(|| format!("loading {}", self.corpus.display()))?;
        let corpus = match self.split {
            Some(s) => corpus.split_view(s),
            None => corpus,
        };
        let model = Model::load(&self.params).with_context(|| format!("loading {}", self.params.display()))?;
        Ok((corpus, model))
    }

    fn options(&self) -> EvalOptions {
        EvalOptions {
            subset: self.subset,
            pixel_path: self.pixel_path,
            trim_large_boxes: self.trim_large_boxes,
        }
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "gold" => Ok(Split::Gold),
        other => Err(format!("unknown split `{other}`")),
    }
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Per-pair localization metrics.
    Run {
        #[command(flatten)]
        args: EvalArgs,
        /// Evaluate on the perturbed corpus instead.
        #[arg(long)]
        perturb: Option<Perturbation>,
    },
    /// Metric deltas between the base and perturbed corpus over the same pairs.
    Delta {
        #[command(flatten)]
        args: EvalArgs,
        /// Omit for the identity (all deltas zero).
        #[arg(long)]
        perturb: Option<Perturbation>,
    },
    /// True sentence against one random distractor per pair.
    Contrastive {
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Symmetric KL between attention for the true and a random sentence.
    Kl {
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Pearson correlations among metric columns and mean ratings.
    Corr {
        #[command(flatten)]
        args: EvalArgs,
        /// Reuse a metric CSV from `eval run` instead of recomputing.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Ratings export of the annotation service.
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// Keep only ratings of this model id.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Write one heatmap as PNG plus a JSON sidecar (`--out` is the file stem).
    Heatmap {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long)]
        instance: String,
        #[arg(long, default_value_t = 0)]
        sentence: usize,
    },
}

#[derive(Subcommand)]
enum AnnotCmd {
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bind: Option<String>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, &s)
}

fn write_outputs(out: &Path, csv: &str, summary: &impl Serialize) -> Result<()> {
    write(out, csv)?;
    write_json(&out.with_extension("json"), summary)
}

fn csv_row(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

fn corpus_cmd(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Validate { path } => {
            let corpus = load_corpus(&path).with_context(|| format!("{} is not a valid corpus", path.display()))?;
            let sentences: usize = corpus.instances.iter().map(|i| i.report.len()).sum();
            println!("ok: {} instances, {} sentences", corpus.instances.len(), sentences);
        }
        CorpusCmd::Generate {
            seed,
            out,
            config,
            train,
            valid,
            gold,
        } => {
            let mut cfg: GeneratorConfig = match &config {
                Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => GeneratorConfig::default(),
            };
            cfg.train = train.unwrap_or(cfg.train);
            cfg.valid = valid.unwrap_or(cfg.valid);
            cfg.gold = gold.unwrap_or(cfg.gold);
            let corpus = generate_synthetic_corpus(&cfg, seed)?;
            write(&out, &corpus.to_json_string())?;
            eprintln!("wrote {} instances to {}", corpus.instances.len(), out.display());
        }
    }
    Ok(())
}

fn model_cmd(cmd: ModelCmd) -> Result<()> {
    match cmd {
        ModelCmd::Train {
            corpus,
            variant,
            seed,
            cfg,
            lexicon,
            out,
            history,
        } => {
            let corpus = load_corpus(&corpus)?;
            let lexicon = lexicon.map(|p| Lexicon::load(&p)).transpose()?;
            let outcome = train(&corpus, &cfg.resolve()?, seed, variant, lexicon.as_ref())?;
            outcome.model.save(&out)?;
            if let Some(h) = history {
                write_json(&h, &outcome.history)?;
            }
            let last = outcome.history.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
            eprintln!(
                "{variant}: {} epochs, final train loss {last:.4}{}",
                outcome.history.len(),
                if outcome.stopped_early { " (early stop)" } else { "" }
            );
        }
        ModelCmd::Finetune {
            corpus,
            params,
            seed,
            labeled,
            val,
            trim_large_boxes,
            out,
            history,
        } => {
            let corpus = load_corpus(&corpus)?;
            let model = Model::load(&params)?;
            let (lp, vp) = finetune_pairs(&corpus, labeled, val, seed);
            if lp.len() < labeled || vp.len() < val {
                bail!(
                    "valid split has too few boxed sentences: need {labeled} + {val}, found {} + {}",
                    lp.len(),
                    vp.len()
                );
            }
            let labeled = alignment_examples(&model, &corpus, &lp, trim_large_boxes)?;
            let val = alignment_examples(&model, &corpus, &vp, trim_large_boxes)?;
            let outcome = finetune_alignment(&model, &labeled, &val)?;
            outcome.model.save(&out)?;
            if let Some(h) = history {
                write_json(&h, &outcome.history)?;
            }
            eprintln!("{} steps, kept step {}", outcome.steps, outcome.best_step);
        }
        ModelCmd::Gradcheck {
            corpus,
            params,
            probes,
            seed,
            batch,
            tol,
        } => {
            let corpus = load_corpus(&corpus)?;
            let model = Model::load(&params)?;
            let mut pairs = Vec::new();
            for (i, inst) in corpus.instances.iter().enumerate() {
                if pairs.len() == batch {
                    break;
                }
                if !inst.report.is_empty() {
                    pairs.push(attnprobe::corpus::PairRef { instance: i, sentence: 0 });
                }
            }
            let boxed: Vec<_> = corpus
                .all_pairs()
                .into_iter()
                .filter(|p| !corpus.sentence(*p).bboxes.is_empty())
                .take(batch)
                .collect();
            if pairs.len() < 2 || boxed.is_empty() {
                bail!("gradient check needs two instances and one boxed sentence");
            }
            let inputs = pair_inputs(&model, &corpus, &pairs)?;
            let examples = alignment_examples(&model, &corpus, &boxed, false)?;
            let report = check_model_gradients(&model, &inputs, &examples, probes, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.contrastive >= tol || report.alignment >= tol {
                bail!("relative gradient error above {tol}");
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PerturbedSummary<'a> {
    #[serde(flatten)]
    summary: EvalSummary,
    perturbation: &'a str,
    seed: u64,
    excluded_instances: &'a [String],
}

fn eval_cmd(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Run { args, perturb } => {
            let (corpus, model) = args.load()?;
            let opts = args.options();
            match perturb {
                None => {
                    let report = run_eval(&corpus, &model, &opts)?;
                    write_outputs(&args.out, &report.to_csv()?, &EvalSummary::new(&corpus, &model, &opts, &report))?;
                }
                Some(p) => {
                    let pc = perturb::apply(&corpus, p, args.seed)?;
                    let report = run_eval(&pc.corpus, &model, &opts)?;
                    let summary = PerturbedSummary {
                        summary: EvalSummary::new(&pc.corpus, &model, &opts, &report),
                        perturbation: p.name(),
                        seed: args.seed,
                        excluded_instances: &pc.excluded,
                    };
                    write_outputs(&args.out, &report.to_csv()?, &summary)?;
                }
            }
        }
        EvalCmd::Delta { args, perturb } => {
            let (corpus, model) = args.load()?;
            let run = run_delta(&corpus, &model, perturb, &args.options(), args.seed)?;
            write_outputs(&args.out, &run.report.to_csv()?, &run.report)?;
        }
        EvalCmd::Contrastive { args } => {
            let (corpus, model) = args.load()?;
            let r = run_contrastive(&corpus, &model, args.subset, args.seed)?;
            let csv = csv_row(&["run_id", "subset", "seed", "pairs", "local_accuracy", "global_accuracy"].map(String::from))
                + &csv_row(&[
                    r.run_id.clone(),
                    r.subset.clone(),
                    r.seed.to_string(),
                    r.pairs.to_string(),
                    r.local_accuracy.to_string(),
                    r.global_accuracy.to_string(),
                ]);
            write_outputs(&args.out, &csv, &r)?;
        }
        EvalCmd::Kl { args } => {
            let (corpus, model) = args.load()?;
            let r = run_kl(&corpus, &model, args.seed)?;
            let csv = csv_row(&["run_id", "seed", "pairs", "mean_kl", "mean_entropy"].map(String::from))
                + &csv_row(&[
                    r.run_id.clone(),
                    r.seed.to_string(),
                    r.pairs.to_string(),
                    r.mean_kl.to_string(),
                    r.mean_entropy.to_string(),
                ]);
            write_outputs(&args.out, &csv, &r)?;
        }
        EvalCmd::Corr {
            args,
            report,
            ratings,
            model_id,
        } => {
            let report = match &report {
                Some(p) => MetricReport::from_csv(&read(p)?)?,
                None => {
                    let (corpus, model) = args.load()?;
                    run_eval(&corpus, &model, &args.options())?
                }
            };
            let ratings = ratings
                .map(|p| -> Result<_> { Ok(read_ratings(&read(&p)?, model_id.as_deref())?) })
                .transpose()?;
            let m = run_correlations(&report, ratings.as_ref());
            write_outputs(&args.out, &m.to_csv()?, &m)?;
        }
        EvalCmd::Heatmap { args, instance, sentence } => {
            let (corpus, model) = args.load()?;
            let k = corpus
                .find(&instance)
                .with_context(|| format!("no instance `{instance}`"))?;
            let inst = &corpus.instances[k];
            let tokens = &inst
                .report
                .get(sentence)
                .with_context(|| format!("instance `{instance}` has no sentence {sentence}"))?
                .tokens;
            let out = (inst.image.height(), inst.image.width());
            let (v_l, _) = model.encode_image(&inst.image)?;
            let (t_l, _) = model.encode_text(tokens)?;
            let att = model.attend(&t_l, &v_l)?;
            let (scores, _) = attention_pixel_scores(&att, out, args.pixel_path)?;
            write_heatmap(&args.out, &scores, &HeatmapSidecar::new(&att, out))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Corpus(c) => corpus_cmd(c),
        Cmd::Synthtext(SynthCmd::Render { corpus, out }) => {
            let corpus = load_corpus(&corpus)?;
            write(&out, &synthtext::render_corpus(&corpus)?.to_json_string())
        }
        Cmd::Perturb(PerturbCmd::Apply { name, seed, corpus, out }) => {
            let corpus = load_corpus(&corpus)?;
            let pc = perturb::apply(&corpus, name, seed)?;
            if !pc.excluded.is_empty() {
                eprintln!("{} instances excluded: perturbation undefined for them", pc.excluded.len());
            }
            write(&out, &pc.corpus.to_json_string())
        }
        Cmd::Model(c) => model_cmd(c),
        Cmd::Eval(c) => eval_cmd(c),
        Cmd::Annot(AnnotCmd::Serve { config, bind }) => {
            let mut cfg = attnprobe_annot::ServiceConfig::load(&config)?;
            if let Some(b) = bind {
                cfg.bind = b;
            }
            tokio::runtime::Runtime::new()?.block_on(attnprobe_annot::serve(cfg))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
