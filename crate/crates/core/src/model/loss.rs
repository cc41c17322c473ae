//! Contrastive and alignment objectives.

use super::autodiff::{Graph, Tensor, Var};
use super::encoder::{attention_graph, global_similarity_graph, local_similarity_graph, Embeddings};
use super::params::ModelConfig;
use crate::error::{Error, Result};
use crate::saliency::{bilinear_weights, PixelScoreMap, SegmentationLabel};

const MASS_TOL: f64 = 1e-6;

/// Text and image graph nodes of one pair: `(t_l, t_g)` and `(v_l, v_g)`.
pub type TextVars = (Var, Var);
pub type ImageVars = (Var, Var);

/// Symmetric InfoNCE over the global and the local similarity matrices (texts
/// as rows, images as columns), summed over the four directions.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    texts: &[TextVars],
    images: &[ImageVars],
    no_attn: Option<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let b = texts.len();
    if b < 2 || images.len() != b {
        return Err(Error::invalid(format!(
            "contrastive loss needs a batch of at least 2 matched pairs, got {b} texts and {} images",
            images.len()
        )));
    }
    let m = cfg.n_regions();
    let mut global = Vec::with_capacity(b * b);
    let mut local = Vec::with_capacity(b * b);
    for &(t_l, t_g) in texts {
        for &(v_l, v_g) in images {
            global.push(global_similarity_graph(g, t_g, v_g));
            let att = attention_graph(g, t_l, v_l, no_attn, cfg.tau);
            local.push(local_similarity_graph(g, t_l, v_l, att, m));
        }
    }
    let mut terms = Vec::with_capacity(4);
    for (sims, tau) in [(global, cfg.tau_nce), (local, cfg.tau_sim)] {
        let s = g.stack(&sims, b, b);
        let logits = g.scale(s, 1.0 / tau);
        terms.push(g.cross_entropy_diag(logits));
        let lt = g.transpose(logits);
        terms.push(g.cross_entropy_diag(lt));
    }
    let all = g.stack(&terms, 1, terms.len());
    Ok(g.sum(all))
}

/// Contrastive loss of a batch of precomputed embeddings.
pub fn contrastive_loss(batch: &[Embeddings], cfg: &ModelConfig, no_attn: Option<&[f64]>) -> Result<f64> {
    let mut g = Graph::new();
    let texts: Vec<TextVars> = batch
        .iter()
        .map(|e| (g.leaf(e.t_l.clone()), g.leaf(e.t_g.clone())))
        .collect();
    let images: Vec<ImageVars> = batch
        .iter()
        .map(|e| (g.leaf(e.v_l.clone()), g.leaf(e.v_g.clone())))
        .collect();
    let na = no_attn.map(|v| g.leaf(Tensor::row_vector(v.to_vec())));
    let loss = contrastive_loss_graph(&mut g, &texts, &images, na, cfg)?;
    Ok(g.value(loss).item())
}

/// `-sum_p s_p l_p` for a renormalized score map.
pub fn alignment_loss(s: &PixelScoreMap, l: &SegmentationLabel) -> Result<f64> {
    alignment_loss_with_no_attn(s, 0.0, l)
}

/// As [`alignment_loss`], where pixel mass plus the no-attn mass sums to 1.
pub fn alignment_loss_with_no_attn(s: &PixelScoreMap, no_attn: f64, l: &SegmentationLabel) -> Result<f64> {
    if s.len() != l.len() || s.width != l.width || s.height != l.height {
        return Err(Error::Shape("score map and label sizes differ".into()));
    }
    let mass = s.sum() + no_attn;
    if (mass - 1.0).abs() > MASS_TOL {
        return Err(Error::invalid(format!("alignment loss needs normalized scores, total mass is {mass}")));
    }
    Ok(-s.scores.iter().zip(&l.labels).filter(|(_, &on)| on).map(|(v, _)| v).sum::<f64>())
}

/// Per-region sums of the bilinear upsampling weights, restricted to labelled
/// pixels (`inside`) and over all pixels (`total`), as `M x 1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTarget {
    pub inside: Tensor,
    pub total: Tensor,
}

impl AlignmentTarget {
    pub fn new(grid: (usize, usize), label: &SegmentationLabel) -> Result<Self> {
        let weights = bilinear_weights(grid, (label.height, label.width))?;
        let m = grid.0 * grid.1;
        let mut inside = vec![0.0; m];
        let mut total = vec![0.0; m];
        for (taps, &on) in weights.iter().zip(&label.labels) {
            for &(j, w) in taps {
                total[j] += w;
                if on {
                    inside[j] += w;
                }
            }
        }
        Ok(Self {
            inside: Tensor::col_vector(inside),
            total: Tensor::col_vector(total),
        })
    }
}

/// Alignment loss of a pooled (`1 x (M [+1])`) attention row after bilinear
/// upsampling and renormalization, as a differentiable node:
/// `-(w . x)(1 . x) / (z . x)` over the image columns `x`.
pub fn alignment_loss_graph(g: &mut Graph, pooled: Var, target: &AlignmentTarget) -> Var {
    let m = target.total.rows;
    let cols = g.value(pooled).cols;
    let x = if cols > m { g.slice_cols(pooled, 0, m) } else { pooled };
    let w = g.leaf(target.inside.clone());
    let z = g.leaf(target.total.clone());
    let inside = g.matmul(x, w);
    let total = g.matmul(x, z);
    let mass = g.sum(x);
    let num = g.mul(inside, mass);
    let frac = g.div(num, total);
    g.scale(frac, -1.0)
}
