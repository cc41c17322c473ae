//! Configuration, vocabulary and learnable tensors of the two-tower model.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::autodiff::Tensor;
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::seed;

pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const UNK_ID: usize = 0;
pub const MASK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// `(G_h, G_w)`.
    pub grid: (usize, usize),
    /// `(height, width)` of input images.
    pub image_size: (usize, usize),
    /// Longest token sequence with its own position row; longer inputs are truncated.
    pub max_tokens: usize,
    /// Attention temperature.
    pub tau: f64,
    /// Temperature of the local-similarity InfoNCE terms.
    pub tau_sim: f64,
    /// Temperature of the global-similarity InfoNCE terms.
    pub tau_nce: f64,
    pub no_attn: bool,
    pub mask_word_prob: f64,
    pub mask_entity_prob: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub init_scale: f64,
    pub finetune_learning_rate: f64,
    pub finetune_steps: usize,
    pub finetune_patience: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            grid: (8, 8),
            image_size: (64, 64),
            max_tokens: 64,
            tau: 0.1,
            tau_sim: 0.1,
            tau_nce: 0.1,
            no_attn: false,
            mask_word_prob: 0.3,
            mask_entity_prob: 0.5,
            learning_rate: 1e-3,
            batch_size: 32,
            patience: 10,
            max_epochs: 100,
            init_scale: 0.5,
            finetune_learning_rate: 1e-2,
            finetune_steps: 500,
            finetune_patience: 25,
        }
    }
}

impl ModelConfig {
    pub fn n_regions(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `(patch_height, patch_width)`.
    pub fn patch_size(&self) -> (usize, usize) {
        (self.image_size.0 / self.grid.0.max(1), self.image_size.1 / self.grid.1.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("tau", self.tau)?;
        positive("tau_sim", self.tau_sim)?;
        positive("tau_nce", self.tau_nce)?;
        positive("learning_rate", self.learning_rate)?;
        positive("finetune_learning_rate", self.finetune_learning_rate)?;
        if self.embed_dim < 2 {
            return Err(Error::invalid("embed_dim must be at least 2"));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::invalid("grid must be non-empty"));
        }
        if self.image_size.0 % self.grid.0 != 0 || self.image_size.1 % self.grid.1 != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible into a {}x{} grid",
                self.image_size.0, self.image_size.1, self.grid.0, self.grid.1
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens must be positive"));
        }
        for (name, p) in [("mask_word_prob", self.mask_word_prob), ("mask_entity_prob", self.mask_entity_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        Ok(())
    }
}

/// Token strings indexed by id. Ids 0 and 1 are the reserved UNK and MASK tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = words.into_iter().filter(|w| w != UNK && w != MASK).collect();
        let mut tokens = vec![UNK.to_string(), MASK.to_string()];
        tokens.extend(set);
        Self { tokens }
    }

    /// Every token of the training-split sentences.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self::new(
            corpus
                .instances
                .iter()
                .filter(|i| i.split == Split::Train)
                .flat_map(|i| i.report.iter())
                .flat_map(|s| s.tokens.iter().cloned()),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        if token == MASK {
            return MASK_ID;
        }
        self.tokens[2..]
            .binary_search_by(|t| t.as_str().cmp(token))
            .map(|i| i + 2)
            .unwrap_or(UNK_ID)
    }

    pub fn ids(&self, tokens: &[impl AsRef<str>]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// Tensor slots in their fixed flat order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    TokenEmbedding,
    TextPosition,
    TextProjW,
    TextProjB,
    PatchW,
    PatchB,
    ImagePosition,
    ImageProjW,
    ImageProjB,
    NoAttn,
}

impl Slot {
    pub const ALL: [Slot; 10] = [
        Slot::TokenEmbedding,
        Slot::TextPosition,
        Slot::TextProjW,
        Slot::TextProjB,
        Slot::PatchW,
        Slot::PatchB,
        Slot::ImagePosition,
        Slot::ImageProjW,
        Slot::ImageProjB,
        Slot::NoAttn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Slot::TokenEmbedding => "token_embedding",
            Slot::TextPosition => "text_position",
            Slot::TextProjW => "text_proj_w",
            Slot::TextProjB => "text_proj_b",
            Slot::PatchW => "patch_w",
            Slot::PatchB => "patch_b",
            Slot::ImagePosition => "image_position",
            Slot::ImageProjW => "image_proj_w",
            Slot::ImageProjB => "image_proj_b",
            Slot::NoAttn => "no_attn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

/// All learnable tensors. The no-attn vector is present only when enabled.
/// Flat indices run through the tensors in [`Slot::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn shapes(cfg: &ModelConfig, vocab_size: usize) -> Vec<(Slot, usize, usize)> {
        let d = cfg.embed_dim;
        let (ph, pw) = cfg.patch_size();
        let mut shapes = vec![
            (Slot::TokenEmbedding, vocab_size, d),
            (Slot::TextPosition, cfg.max_tokens, d),
            (Slot::TextProjW, d, d),
            (Slot::TextProjB, 1, d),
            (Slot::PatchW, ph * pw, d),
            (Slot::PatchB, 1, d),
            (Slot::ImagePosition, cfg.n_regions(), d),
            (Slot::ImageProjW, d, d),
            (Slot::ImageProjB, 1, d),
        ];
        if cfg.no_attn {
            shapes.push((Slot::NoAttn, 1, d));
        }
        shapes
    }

    /// Uniform initialization on `[-a, a]` with `a = init_scale / sqrt(fan_in)` for
    /// weight matrices and `a = init_scale` for embeddings; biases start at zero.
    pub fn init(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::derived_rng(seed, "init");
        let tensors = Self::shapes(cfg, vocab_size)
            .into_iter()
            .map(|(slot, rows, cols)| {
                let bound = match slot {
                    Slot::TextProjB | Slot::PatchB | Slot::ImageProjB => 0.0,
                    Slot::TextProjW | Slot::PatchW | Slot::ImageProjW => cfg.init_scale * 3f64.sqrt() / (rows as f64).sqrt(),
                    _ => cfg.init_scale,
                };
                let data = (0..rows * cols)
                    .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
                    .collect();
                Tensor::new(rows, cols, data)
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn from_tensors(cfg: &ModelConfig, vocab_size: usize, named: Vec<NamedTensor>) -> Result<Self> {
        let shapes = Self::shapes(cfg, vocab_size);
        if named.len() != shapes.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", shapes.len(), named.len())));
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        for ((slot, rows, cols), nt) in shapes.into_iter().zip(named) {
            if nt.name != slot.name() || nt.tensor.rows != rows || nt.tensor.cols != cols {
                return Err(Error::Shape(format!(
                    "tensor `{}` {}x{} does not match `{}` {rows}x{cols}",
                    nt.name,
                    nt.tensor.rows,
                    nt.tensor.cols,
                    slot.name()
                )));
            }
            if nt.tensor.data.len() != rows * cols {
                return Err(Error::Shape(format!("tensor `{}` has the wrong number of values", nt.name)));
            }
            if nt.tensor.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor `{}`", nt.name)));
            }
            tensors.push(nt.tensor);
        }
        Ok(Self { tensors })
    }

    pub fn named(&self) -> Vec<NamedTensor> {
        Slot::ALL
            .iter()
            .zip(&self.tensors)
            .map(|(slot, t)| NamedTensor {
                name: slot.name().to_string(),
                tensor: t.clone(),
            })
            .collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, slot: Slot) -> Option<&Tensor> {
        self.tensors.get(slot as usize)
    }

    pub fn get_mut(&mut self, slot: Slot) -> Option<&mut Tensor> {
        self.tensors.get_mut(slot as usize)
    }

    pub fn has_no_attn(&self) -> bool {
        self.tensors.len() > Slot::NoAttn as usize
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!("expected {} values, got {}", self.len(), values.len())));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn flat_get(&self, mut index: usize) -> Option<f64> {
        for t in &self.tensors {
            if index < t.len() {
                return Some(t.data[index]);
            }
            index -= t.len();
        }
        None
    }

    pub fn flat_set(&mut self, mut index: usize, value: f64) -> Result<()> {
        for t in &mut self.tensors {
            if index < t.len() {
                t.data[index] = value;
                return Ok(());
            }
            index -= t.len();
        }
        Err(Error::invalid(format!("flat index {index} past the end")))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

const CHECKPOINT_FORMAT: &str = "attnprobe-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<NamedTensor>,
}

/// Parameters together with the config and vocabulary needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, vocab.len(), seed)?;
        Ok(Self { config, vocab, params })
    }

    pub fn to_json_string(&self) -> String {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.tokens.clone(),
            tensors: self.params.named(),
        };
        let mut s = serde_json::to_string(&ckpt).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(json)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("not a checkpoint (format `{}`)", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        ckpt.config.validate()?;
        if ckpt.vocab.len() < 2 || ckpt.vocab[0] != UNK || ckpt.vocab[1] != MASK {
            return Err(Error::Parse("checkpoint vocabulary must start with the reserved tokens".into()));
        }
        if ckpt.vocab[2..].windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parse("checkpoint vocabulary must be sorted and unique".into()));
        }
        let vocab = Vocab { tokens: ckpt.vocab };
        let params = ModelParams::from_tensors(&ckpt.config, vocab.len(), ckpt.tensors)?;
        Ok(Self {
            config: ckpt.config,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn content_hash(&self) -> String {
        seed::content_hash(self.to_json_string().as_bytes())
    }

    /// A copy whose attention cannot depend on the sentence: token embeddings are
    /// zeroed and every text position row is replaced by the first one.
    pub fn text_blind(&self) -> Model {
        let mut blind = self.clone();
        if let Some(t) = blind.params.get_mut(Slot::TokenEmbedding) {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(t) = blind.params.get_mut(Slot::TextPosition) {
            let first = t.row(0).to_vec();
            for r in 1..t.rows {
                t.row_mut(r).copy_from_slice(&first);
            }
        }
        blind
    }
}
