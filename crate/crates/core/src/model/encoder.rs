//! Text and image towers, token-to-region attention and the two similarities.
//!
//! Every function here has a graph-building form (taking [`Graph`] and [`ParamVars`])
//! used for training, and the plain wrappers on [`Model`] evaluate the same
//! graph on constant inputs.

use serde::{Deserialize, Serialize};

use super::autodiff::{Graph, Tensor, Var};
use super::params::{Model, ModelParams, Slot};
use crate::corpus::GrayImage;
use crate::error::{Error, Result};
use crate::saliency::AttentionMap;

/// Leaves for every parameter tensor of one graph.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn new(g: &mut Graph, params: &ModelParams) -> Self {
        Self {
            vars: params.tensors().iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }

    pub fn get(&self, slot: Slot) -> Var {
        self.vars[slot as usize]
    }

    pub fn no_attn(&self) -> Option<Var> {
        self.vars.get(Slot::NoAttn as usize).copied()
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Local and global embeddings of one image-sentence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    /// `N x D`
    pub t_l: Tensor,
    /// `1 x D`
    pub t_g: Tensor,
    /// `M x D`
    pub v_l: Tensor,
    /// `1 x D`
    pub v_g: Tensor,
}

/// Row-major `M x (ph * pw)` patch matrix, patches in grid row-major order.
pub fn patchify(image: &GrayImage, grid: (usize, usize)) -> Result<Tensor> {
    let (h, w) = (image.height(), image.width());
    if grid.0 == 0 || grid.1 == 0 || h % grid.0 != 0 || w % grid.1 != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let (ph, pw) = (h / grid.0, w / grid.1);
    let pixels = image.pixels();
    let mut data = Vec::with_capacity(h * w);
    for gr in 0..grid.0 {
        for gc in 0..grid.1 {
            for r in gr * ph..(gr + 1) * ph {
                data.extend_from_slice(&pixels[r * w + gc * pw..r * w + (gc + 1) * pw]);
            }
        }
    }
    Ok(Tensor::new(grid.0 * grid.1, ph * pw, data))
}

/// `t_li = E[token_i] + P[i]`, `t_g = W_t mean_i(t_li) + b_t`.
pub fn encode_text_graph(g: &mut Graph, pv: &ParamVars, ids: &[usize]) -> (Var, Var) {
    let positions: Vec<usize> = (0..ids.len()).collect();
    let emb = g.gather(pv.get(Slot::TokenEmbedding), ids);
    let pos = g.gather(pv.get(Slot::TextPosition), &positions);
    let t_l = g.add(emb, pos);
    let mean = g.mean_rows(t_l);
    let proj = g.matmul(mean, pv.get(Slot::TextProjW));
    let t_g = g.add_row(proj, pv.get(Slot::TextProjB));
    (t_l, t_g)
}

/// `v_lj = flatten(patch_j) W_p + b_p + P_j`, `v_g = W_v mean_j(v_lj) + b_v`.
pub fn encode_image_graph(g: &mut Graph, pv: &ParamVars, patches: &Tensor) -> (Var, Var) {
    let x = g.leaf(patches.clone());
    let lin = g.matmul(x, pv.get(Slot::PatchW));
    let biased = g.add_row(lin, pv.get(Slot::PatchB));
    let v_l = g.add(biased, pv.get(Slot::ImagePosition));
    let mean = g.mean_rows(v_l);
    let proj = g.matmul(mean, pv.get(Slot::ImageProjW));
    let v_g = g.add_row(proj, pv.get(Slot::ImageProjB));
    (v_l, v_g)
}

/// `a_ij = softmax_j(t_li . v_lj / tau)` over the image regions, plus the no-attn
/// vector as a final candidate when given.
pub fn attention_graph(g: &mut Graph, t_l: Var, v_l: Var, no_attn: Option<Var>, tau: f64) -> Var {
    let candidates = match no_attn {
        Some(na) => g.concat_rows(v_l, na),
        None => v_l,
    };
    let logits = g.matmul_t(t_l, candidates);
    let scaled = g.scale(logits, 1.0 / tau);
    g.softmax_rows(scaled)
}

/// `(1/N) sum_i cos(t_li, c_i)` with `c_i = sum_j a_ij v_lj` over image columns.
/// A zero context vector contributes a cosine of 0.
pub fn local_similarity_graph(g: &mut Graph, t_l: Var, v_l: Var, att: Var, n_regions: usize) -> Var {
    let cols = g.value(att).cols;
    let image_att = if cols > n_regions { g.slice_cols(att, 0, n_regions) } else { att };
    let context = g.matmul(image_att, v_l);
    let tn = g.normalize_rows(t_l);
    let cn = g.normalize_rows(context);
    let cos = g.row_dot(tn, cn);
    g.mean(cos)
}

pub fn global_similarity_graph(g: &mut Graph, t_g: Var, v_g: Var) -> Var {
    let a = g.normalize_rows(t_g);
    let b = g.normalize_rows(v_g);
    let d = g.row_dot(a, b);
    g.sum(d)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("attention temperature must be positive, got {tau}")))
    }
}

/// Eq.-1 attention on plain tensors.
pub fn attention(t_l: &Tensor, v_l: &Tensor, tau: f64, no_attn: Option<&[f64]>, grid: (usize, usize)) -> Result<AttentionMap> {
    check_tau(tau)?;
    if t_l.rows == 0 {
        return Err(Error::invalid("attention needs at least one token"));
    }
    if t_l.cols != v_l.cols || v_l.rows != grid.0 * grid.1 {
        return Err(Error::Shape(format!(
            "t_l {}x{}, v_l {}x{} and grid {grid:?} are inconsistent",
            t_l.rows, t_l.cols, v_l.rows, v_l.cols
        )));
    }
    let mut g = Graph::new();
    let tv = g.leaf(t_l.clone());
    let vv = g.leaf(v_l.clone());
    let na = match no_attn {
        Some(v) if v.len() != t_l.cols => return Err(Error::Shape("no-attn vector has the wrong width".into())),
        Some(v) => Some(g.leaf(Tensor::row_vector(v.to_vec()))),
        None => None,
    };
    let a = attention_graph(&mut g, tv, vv, na, tau);
    AttentionMap::new(g.value(a).data.clone(), t_l.rows, grid, no_attn.is_some())
}

fn has_zero_norm(t: &Tensor) -> bool {
    (0..t.rows).any(|r| t.row(r).iter().all(|&v| v == 0.0))
}

/// `(local_sim, global_sim)` for one pair.
pub fn similarities(emb: &Embeddings, att: &AttentionMap) -> Result<(f64, f64)> {
    if has_zero_norm(&emb.t_g) || has_zero_norm(&emb.v_g) || has_zero_norm(&emb.t_l) {
        return Err(Error::invalid("cosine similarity of a zero-norm embedding"));
    }
    if att.n_tokens() != emb.t_l.rows || att.n_regions() != emb.v_l.rows {
        return Err(Error::Shape("attention map does not match the embeddings".into()));
    }
    let mut g = Graph::new();
    let t_l = g.leaf(emb.t_l.clone());
    let v_l = g.leaf(emb.v_l.clone());
    let t_g = g.leaf(emb.t_g.clone());
    let v_g = g.leaf(emb.v_g.clone());
    let per_token: Vec<f64> = (0..att.n_tokens()).flat_map(|i| att.row(i).to_vec()).collect();
    let a = g.leaf(Tensor::new(att.n_tokens(), att.n_cols(), per_token));
    let local = local_similarity_graph(&mut g, t_l, v_l, a, att.n_regions());
    let global = global_similarity_graph(&mut g, t_g, v_g);
    Ok((g.value(local).item(), g.value(global).item()))
}

impl Model {
    /// Token ids, truncated to the configured maximum length.
    pub fn token_ids(&self, tokens: &[impl AsRef<str>]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty token list"));
        }
        let mut ids = self.vocab.ids(tokens);
        ids.truncate(self.config.max_tokens);
        Ok(ids)
    }

    pub fn patches(&self, image: &GrayImage) -> Result<Tensor> {
        let (h, w) = self.config.image_size;
        if image.height() != h || image.width() != w {
            return Err(Error::invalid(format!(
                "model expects {h}x{w} images, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        patchify(image, self.config.grid)
    }

    pub fn encode_text(&self, tokens: &[impl AsRef<str>]) -> Result<(Tensor, Tensor)> {
        let ids = self.token_ids(tokens)?;
        let mut g = Graph::new();
        let pv = ParamVars::new(&mut g, &self.params);
        let (t_l, t_g) = encode_text_graph(&mut g, &pv, &ids);
        Ok((g.value(t_l).clone(), g.value(t_g).clone()))
    }

    pub fn encode_image(&self, image: &GrayImage) -> Result<(Tensor, Tensor)> {
        let patches = self.patches(image)?;
        let mut g = Graph::new();
        let pv = ParamVars::new(&mut g, &self.params);
        let (v_l, v_g) = encode_image_graph(&mut g, &pv, &patches);
        Ok((g.value(v_l).clone(), g.value(v_g).clone()))
    }

    pub fn no_attn_vector(&self) -> Option<&[f64]> {
        self.params.get(Slot::NoAttn).map(|t| t.data.as_slice())
    }

    pub fn attend(&self, t_l: &Tensor, v_l: &Tensor) -> Result<AttentionMap> {
        attention(t_l, v_l, self.config.tau, self.no_attn_vector(), self.config.grid)
    }

    /// Embeddings and attention for a sentence against an already encoded image.
    pub fn pair(&self, tokens: &[impl AsRef<str>], image: &(Tensor, Tensor)) -> Result<(Embeddings, AttentionMap)> {
        let (t_l, t_g) = self.encode_text(tokens)?;
        let att = self.attend(&t_l, &image.0)?;
        let emb = Embeddings {
            t_l,
            t_g,
            v_l: image.0.clone(),
            v_g: image.1.clone(),
        };
        Ok((emb, att))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{ModelConfig, Vocab};

    fn model(no_attn: bool) -> Model {
        let cfg = ModelConfig {
            embed_dim: 4,
            grid: (2, 2),
            image_size: (4, 4),
            max_tokens: 8,
            no_attn,
            ..ModelConfig::default()
        };
        Model::init(cfg, Vocab::new(["a", "b", "c"].map(String::from)), 11).unwrap()
    }

    fn image() -> GrayImage {
        GrayImage::new(4, 4, (0..16).map(|k| k as f64 / 15.0).collect()).unwrap()
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let p = patchify(&image(), (2, 2)).unwrap();
        assert_eq!((p.rows, p.cols), (4, 4));
        let scaled: Vec<f64> = p.row(1).iter().map(|v| (v * 15.0).round()).collect();
        assert_eq!(scaled, vec![2.0, 3.0, 6.0, 7.0]);
        assert!(patchify(&image(), (3, 2)).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let t = Tensor::new(1, 2, vec![1.0, 0.0]);
        let v = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = attention(&t, &v, 1.0, None, (1, 2)).unwrap();
        assert!((a.row(0)[0] - 0.7311).abs() < 1e-4);
        let a = attention(&t, &v, 0.5, None, (1, 2)).unwrap();
        assert!((a.row(0)[0] - 0.8808).abs() < 1e-4);
        assert!(attention(&t, &v, 0.0, None, (1, 2)).is_err());
    }

    #[test]
    fn equal_logits_give_uniform_rows() {
        let t = Tensor::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let v = Tensor::new(4, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.25, 0.75]);
        let a = attention(&t, &v, 0.1, None, (2, 2)).unwrap();
        for w in a.row(0).iter().chain(a.row(1)) {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn no_attn_adds_one_column() {
        let m = model(true);
        let img = m.encode_image(&image()).unwrap();
        let (_, att) = m.pair(&["a", "b"], &img).unwrap();
        assert_eq!(att.n_cols(), 5);
        let (_, att) = model(false).pair(&["a", "b"], &model(false).encode_image(&image()).unwrap()).unwrap();
        assert_eq!(att.n_cols(), 4);
    }

    #[test]
    fn single_token_global_is_projection_of_row() {
        let m = model(false);
        let (t_l, t_g) = m.encode_text(&["b"]).unwrap();
        let w = m.params.get(Slot::TextProjW).unwrap();
        let b = m.params.get(Slot::TextProjB).unwrap();
        for c in 0..4 {
            let expect: f64 = (0..4).map(|k| t_l.get(0, k) * w.get(k, c)).sum::<f64>() + b.data[c];
            assert!((t_g.data[c] - expect).abs() < 1e-12);
        }
        assert!(m.encode_text(&[] as &[&str]).is_err());
    }

    #[test]
    fn token_order_matters() {
        let m = model(false);
        assert_ne!(m.encode_text(&["a", "b"]).unwrap(), m.encode_text(&["b", "a"]).unwrap());
    }

    #[test]
    fn constant_image_rows_differ_by_position_only() {
        let m = model(false);
        let (v_l, _) = m.encode_image(&GrayImage::filled(4, 4, 0.3).unwrap()).unwrap();
        let pos = m.params.get(Slot::ImagePosition).unwrap();
        for j in 1..4 {
            for k in 0..4 {
                let lhs = v_l.get(j, k) - v_l.get(0, k);
                let rhs = pos.get(j, k) - pos.get(0, k);
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_conventions() {
        let v_l = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let emb = Embeddings {
            t_l: Tensor::new(1, 2, vec![0.0, 2.0]),
            t_g: Tensor::row_vector(vec![1.0, 1.0]),
            v_l,
            v_g: Tensor::row_vector(vec![1.0, 1.0]),
        };
        let one_hot = AttentionMap::new(vec![0.0, 1.0], 1, (1, 2), false).unwrap();
        let (local, global) = similarities(&emb, &one_hot).unwrap();
        assert!((local - 1.0).abs() < 1e-12);
        assert!((global - 1.0).abs() < 1e-12);
        let opted_out = AttentionMap::new(vec![0.0, 0.0, 1.0], 1, (1, 2), true).unwrap();
        assert_eq!(similarities(&emb, &opted_out).unwrap().0, 0.0);
        let zero = Embeddings {
            t_g: Tensor::row_vector(vec![0.0, 0.0]),
            ..emb
        };
        assert!(similarities(&zero, &one_hot).is_err());
    }
}
