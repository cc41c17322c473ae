//! A small two-tower image-text model with token-to-region attention.
//!
//! Text tokens are embedded with learned positions; images are cut into a grid of
//! patches, each linearly projected and given a learned position. Attention is a
//! temperature softmax of token-patch dot products, optionally with an extra
//! learned "No Attn" candidate. Training uses a small tape-based reverse-mode
//! engine in [`autodiff`].

pub mod autodiff;
pub mod encoder;
pub mod gradcheck;
pub mod loss;
pub mod masking;
pub mod optim;
pub mod params;
pub mod train;

pub use autodiff::{Graph, Tensor, Var};
pub use encoder::{attention, patchify, similarities, Embeddings};
pub use gradcheck::{check_model_gradients, gradient_check, ModelGradCheck};
pub use loss::{alignment_loss, alignment_loss_with_no_attn, contrastive_loss, AlignmentTarget};
pub use masking::{mask_entities, mask_words, Lexicon};
pub use optim::Adam;
pub use params::{Model, ModelConfig, ModelParams, Slot, Vocab};
pub use train::{
    alignment_batch_loss, alignment_examples, contrastive_batch_loss, finetune_alignment, finetune_pairs, pair_inputs, train,
    AlignmentExample, FinetuneOutcome, PairInput, TrainOutcome, Variant,
};
