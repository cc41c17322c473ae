//! From attention weights to pixel scores, and from boxes to pixel labels.

use serde::{Deserialize, Serialize};

use crate::corpus::BBox;
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-6;

/// Per-token attention over `M = grid.0 * grid.1` image regions, optionally with
/// one trailing "No Attn" column, plus the token-mean pooled map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    n_tokens: usize,
    grid: (usize, usize),
    no_attn: bool,
    per_token: Vec<f64>,
    pooled: Vec<f64>,
}

impl AttentionMap {
    /// `per_token` is row-major `n_tokens x (M [+1])`.
    pub fn new(per_token: Vec<f64>, n_tokens: usize, grid: (usize, usize), no_attn: bool) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::invalid("attention map has an empty token axis"));
        }
        let m = grid.0 * grid.1;
        if m == 0 {
            return Err(Error::invalid("attention grid must be non-empty"));
        }
        let cols = m + usize::from(no_attn);
        if per_token.len() != n_tokens * cols {
            return Err(Error::Shape(format!(
                "expected {n_tokens}x{cols} attention weights, got {}",
                per_token.len()
            )));
        }
        for (i, row) in per_token.chunks_exact(cols).enumerate() {
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::invalid(format!("token {i}: negative or non-finite weight")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("token {i}: weights sum to {sum}, not 1")));
            }
        }
        let pooled = mean_rows(&per_token, cols);
        Ok(Self {
            n_tokens,
            grid,
            no_attn,
            per_token,
            pooled,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn n_regions(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn has_no_attn(&self) -> bool {
        self.no_attn
    }

    pub fn n_cols(&self) -> usize {
        self.n_regions() + usize::from(self.no_attn)
    }

    pub fn row(&self, token: usize) -> &[f64] {
        let c = self.n_cols();
        &self.per_token[token * c..(token + 1) * c]
    }

    /// Token-mean weights over all columns (image regions, then the no-attn slot).
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    /// Pooled weights of the image regions only, row-major over the grid.
    pub fn pooled_regions(&self) -> &[f64] {
        &self.pooled[..self.n_regions()]
    }

    /// Pooled weight of the no-attn slot, 0 when the slot is disabled.
    pub fn no_attn_score(&self) -> f64 {
        if self.no_attn {
            self.pooled[self.n_regions()]
        } else {
            0.0
        }
    }
}

/// Column means computed as `r0 + mean(r_i - r0)`, so identical rows pool to
/// exactly that row regardless of how many there are.
fn mean_rows(rows: &[f64], cols: usize) -> Vec<f64> {
    let n = rows.len() / cols;
    let first = &rows[..cols];
    let mut acc = vec![0.0; cols];
    for row in rows.chunks_exact(cols).skip(1) {
        for ((a, x), f) in acc.iter_mut().zip(row).zip(first) {
            *a += x - f;
        }
    }
    first
        .iter()
        .zip(acc)
        .map(|(f, a)| f + a / n as f64)
        .collect()
}

/// `x_j = (1/N) sum_i a_ij`.
pub fn pool_token_attention(att: &AttentionMap) -> Result<Vec<f64>> {
    if att.n_tokens == 0 {
        return Err(Error::invalid("attention map has an empty token axis"));
    }
    Ok(mean_rows(&att.per_token, att.n_cols()))
}

/// Nonnegative per-pixel scores over a `height x width` image, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelScoreMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
}

impl PixelScoreMap {
    pub fn new(width: usize, height: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} score map needs {} values, got {}",
                width * height,
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("pixel scores must be finite and nonnegative"));
        }
        Ok(Self { width, height, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.scores.iter().sum()
    }
}

/// Binary per-pixel membership in the union of a sentence's boxes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationLabel {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<bool>,
}

impl SegmentationLabel {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// IOU of two labels over the same pixel grid. Two empty labels are identical
    /// and score 1.
    pub fn iou(&self, other: &SegmentationLabel) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.labels.iter().zip(&other.labels) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Source taps for one output coordinate under the half-pixel convention.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(out_len: usize, src_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / out_len as f64;
    (0..out_len)
        .map(|k| {
            let u = ((k as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            Tap { lo, hi, frac: u - lo as f64 }
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

fn check_upsample_dims(grid_len: usize, grid: (usize, usize), out: (usize, usize)) -> Result<()> {
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 {
        return Err(Error::invalid("grid dimensions must be at least 1"));
    }
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::invalid("zero-size output"));
    }
    if grid_len != gh * gw {
        return Err(Error::Shape(format!("grid {gh}x{gw} needs {} values, got {grid_len}", gh * gw)));
    }
    Ok(())
}

/// Bilinear upsampling of a row-major `grid = (G_h, G_w)` to `out = (H, W)` pixels.
///
/// Output pixel `(r, c)` samples the grid at `u = (c + 0.5) G_w / W - 0.5`,
/// `v = (r + 0.5) G_h / H - 0.5`, both clamped to the grid, then interpolates
/// separably.
pub fn upsample_bilinear(values: &[f64], grid: (usize, usize), out: (usize, usize)) -> Result<PixelScoreMap> {
    check_upsample_dims(values.len(), grid, out)?;
    let (gh, gw) = grid;
    let (h, w) = out;
    let rows = taps(h, gh);
    let cols = taps(w, gw);
    let at = |r: usize, c: usize| values[r * gw + c];
    let mut scores = Vec::with_capacity(h * w);
    for rt in &rows {
        for ct in &cols {
            let top = lerp(at(rt.lo, ct.lo), at(rt.lo, ct.hi), ct.frac);
            let bottom = lerp(at(rt.hi, ct.lo), at(rt.hi, ct.hi), ct.frac);
            scores.push(lerp(top, bottom, rt.frac));
        }
    }
    PixelScoreMap::new(w, h, scores)
}

/// Linear weights of the bilinear upsampler: for each output pixel, up to four
/// `(grid index, weight)` pairs whose weighted sum reproduces
/// [`upsample_bilinear`] (up to rounding).
pub fn bilinear_weights(grid: (usize, usize), out: (usize, usize)) -> Result<Vec<[(usize, f64); 4]>> {
    check_upsample_dims(grid.0 * grid.1, grid, out)?;
    let (_, gw) = grid;
    let rows = taps(out.0, grid.0);
    let cols = taps(out.1, grid.1);
    let mut weights = Vec::with_capacity(out.0 * out.1);
    for rt in &rows {
        for ct in &cols {
            weights.push([
                (rt.lo * gw + ct.lo, (1.0 - rt.frac) * (1.0 - ct.frac)),
                (rt.lo * gw + ct.hi, (1.0 - rt.frac) * ct.frac),
                (rt.hi * gw + ct.lo, rt.frac * (1.0 - ct.frac)),
                (rt.hi * gw + ct.hi, rt.frac * ct.frac),
            ]);
        }
    }
    Ok(weights)
}

/// `s_p = max` weight among boxes containing `p`, 0 when no box does.
pub fn bbox_max_scores(box_weights: &[(BBox, f64)], out: (usize, usize)) -> Result<PixelScoreMap> {
    let (h, w) = out;
    if box_weights.iter().any(|(_, wt)| !wt.is_finite() || *wt < 0.0) {
        return Err(Error::invalid("box weights must be finite and nonnegative"));
    }
    let mut scores = vec![0.0f64; h * w];
    for (b, wt) in box_weights {
        let (x1, y1) = ((b.x1 as usize).min(w), (b.y1 as usize).min(h));
        for r in (b.y0 as usize).min(h)..y1 {
            for c in (b.x0 as usize).min(w)..x1 {
                let s = &mut scores[r * w + c];
                *s = s.max(*wt);
            }
        }
    }
    PixelScoreMap::new(w, h, scores)
}

/// `l_p = 1` iff `p` lies inside at least one half-open box.
pub fn segmentation_label(bboxes: &[BBox], out: (usize, usize)) -> SegmentationLabel {
    let (h, w) = out;
    let mut labels = vec![false; h * w];
    for b in bboxes {
        let (x1, y1) = ((b.x1 as usize).min(w), (b.y1 as usize).min(h));
        for r in (b.y0 as usize).min(h)..y1 {
            for c in (b.x0 as usize).min(w)..x1 {
                labels[r * w + c] = true;
            }
        }
    }
    SegmentationLabel {
        width: w,
        height: h,
        labels,
    }
}

/// Rescales scores to sum to 1.
pub fn renormalize(s: &PixelScoreMap) -> Result<PixelScoreMap> {
    let total = s.sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::invalid("cannot renormalize an all-zero score map"));
    }
    PixelScoreMap::new(s.width, s.height, s.scores.iter().map(|v| v / total).collect())
}

/// Rescales pixel scores so that pixel mass plus the no-attn scalar equals 1,
/// keeping the no-attn mass as given. Returns `(scores, no_attn)`.
pub fn renormalize_with_no_attn(s: &PixelScoreMap, no_attn: f64) -> Result<(PixelScoreMap, f64)> {
    if !(0.0..=1.0).contains(&no_attn) {
        return Err(Error::invalid("no-attn mass must lie in [0, 1]"));
    }
    let total = s.sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::invalid("cannot renormalize an all-zero score map"));
    }
    let image_mass = 1.0 - no_attn;
    let scores = s.scores.iter().map(|v| v / total * image_mass).collect();
    Ok((PixelScoreMap::new(s.width, s.height, scores)?, no_attn))
}

/// How region attention becomes pixel scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelPath {
    /// Bilinear upsampling of the region grid.
    GridBilinear,
    /// Each grid cell as a box; pixels take the max weight of the boxes covering them.
    BboxMax,
}

impl std::str::FromStr for PixelPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid-bilinear" => Ok(PixelPath::GridBilinear),
            "bbox-max" => Ok(PixelPath::BboxMax),
            other => Err(Error::invalid(format!("unknown pixel path `{other}`"))),
        }
    }
}

impl std::fmt::Display for PixelPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PixelPath::GridBilinear => "grid-bilinear",
            PixelPath::BboxMax => "bbox-max",
        })
    }
}

/// Pixel rectangle of grid cell `(gr, gc)` for an `out`-sized image; cells tile the image.
pub fn grid_cell_box(grid: (usize, usize), out: (usize, usize), gr: usize, gc: usize) -> BBox {
    let (h, w) = out;
    let edge = |k: usize, n: usize, len: usize| (k * len / n) as u32;
    BBox::new(
        format!("cell {gr},{gc}"),
        edge(gc, grid.1, w),
        edge(gr, grid.0, h),
        edge(gc + 1, grid.1, w),
        edge(gr + 1, grid.0, h),
    )
}

/// Pixel scores for the image columns of a pooled attention map. The no-attn
/// mass is returned alongside rather than spread over pixels.
pub fn attention_pixel_scores(att: &AttentionMap, out: (usize, usize), path: PixelPath) -> Result<(PixelScoreMap, f64)> {
    let grid = att.grid();
    let regions = att.pooled_regions();
    let scores = match path {
        PixelPath::GridBilinear => upsample_bilinear(regions, grid, out)?,
        PixelPath::BboxMax => {
            let boxes: Vec<(BBox, f64)> = (0..grid.0)
                .flat_map(|gr| (0..grid.1).map(move |gc| (gr, gc)))
                .map(|(gr, gc)| (grid_cell_box(grid, out, gr, gc), regions[gr * grid.1 + gc]))
                .collect();
            bbox_max_scores(&boxes, out)?
        }
    };
    Ok((scores, att.no_attn_score()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn pooling_examples() {
        let one = AttentionMap::new(vec![0.3, 0.7], 1, (1, 2), false).unwrap();
        assert_eq!(pool_token_attention(&one).unwrap(), vec![0.3, 0.7]);
        let sym = AttentionMap::new(vec![1.0, 0.0, 0.0, 1.0], 2, (1, 2), false).unwrap();
        assert_eq!(sym.pooled(), &[0.5, 0.5]);
        let mixed = AttentionMap::new(vec![0.6, 0.4, 0.2, 0.8], 2, (1, 2), false).unwrap();
        assert!(close(mixed.pooled(), &[0.4, 0.6], 1e-12));
    }

    #[test]
    fn attention_map_rejects_bad_rows() {
        assert!(AttentionMap::new(vec![], 0, (1, 2), false).is_err());
        assert!(AttentionMap::new(vec![0.5, 0.6], 1, (1, 2), false).is_err());
        assert!(AttentionMap::new(vec![0.5, 0.5], 1, (1, 3), false).is_err());
    }

    #[test]
    fn no_attn_column() {
        let att = AttentionMap::new(vec![0.2, 0.3, 0.5], 1, (1, 2), true).unwrap();
        assert_eq!(att.pooled_regions(), &[0.2, 0.3]);
        assert_eq!(att.no_attn_score(), 0.5);
        let (s, na) = attention_pixel_scores(&att, (2, 4), PixelPath::GridBilinear).unwrap();
        let (s, na) = renormalize_with_no_attn(&s, na).unwrap();
        assert!((s.sum() + na - 1.0).abs() < 1e-12);
        assert_eq!(na, 0.5);
    }

    #[test]
    fn identical_rows_pool_exactly() {
        let row = [0.1, 0.2, 0.3, 0.4];
        for n in 1..9 {
            let att = AttentionMap::new(row.repeat(n), n, (2, 2), false).unwrap();
            assert_eq!(att.pooled(), &row);
        }
    }

    #[test]
    fn upsample_examples() {
        let s = upsample_bilinear(&[0.25; 6], (2, 3), (7, 5)).unwrap();
        assert!(s.scores.iter().all(|&v| v == 0.25));
        let s = upsample_bilinear(&[0.0, 1.0], (1, 2), (1, 4)).unwrap();
        assert_eq!(s.scores, vec![0.0, 0.25, 0.75, 1.0]);
        let s = upsample_bilinear(&[0.7], (1, 1), (3, 9)).unwrap();
        assert!(s.scores.iter().all(|&v| v == 0.7));
        assert!(upsample_bilinear(&[0.7], (1, 1), (0, 9)).is_err());
    }

    #[test]
    fn weights_match_upsampler() {
        let grid: Vec<f64> = (0..12).map(|k| (k * 7 % 5) as f64).collect();
        let direct = upsample_bilinear(&grid, (3, 4), (9, 10)).unwrap();
        let weights = bilinear_weights((3, 4), (9, 10)).unwrap();
        for (p, taps) in weights.iter().enumerate() {
            let v: f64 = taps.iter().map(|&(j, w)| w * grid[j]).sum();
            assert!((v - direct.scores[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn box_max_examples() {
        let boxes = vec![
            (BBox::new("a", 0, 0, 2, 2), 0.2),
            (BBox::new("b", 1, 1, 3, 3), 0.5),
        ];
        let s = bbox_max_scores(&boxes, (4, 4)).unwrap();
        assert_eq!(s.scores[4 + 1], 0.5);
        assert_eq!(s.scores[0], 0.2);
        assert_eq!(s.scores[15], 0.0);
        let full = bbox_max_scores(&[(BBox::new("all", 0, 0, 4, 4), 1.0)], (4, 4)).unwrap();
        assert!(full.scores.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn label_examples() {
        let full = segmentation_label(&[BBox::new("all", 0, 0, 3, 2)], (2, 3));
        assert!(full.labels.iter().all(|&l| l));
        let none = segmentation_label(&[], (2, 3));
        assert_eq!(none.positives(), 0);
        let a = BBox::new("a", 0, 0, 3, 3);
        let b = BBox::new("b", 2, 2, 5, 4);
        let union = segmentation_label(&[a.clone(), b.clone()], (6, 6));
        // |a| + |b| - |a n b| = 9 + 6 - 1
        assert_eq!(union.positives(), 14);
    }

    #[test]
    fn renormalize_examples() {
        let s = PixelScoreMap::new(3, 1, vec![1.0, 1.0, 2.0]).unwrap();
        assert_eq!(renormalize(&s).unwrap().scores, vec![0.25, 0.25, 0.5]);
        let n = PixelScoreMap::new(2, 1, vec![0.3, 0.7]).unwrap();
        assert!(close(&renormalize(&n).unwrap().scores, &n.scores, 1e-9));
        let z = PixelScoreMap::new(2, 1, vec![0.0, 0.0]).unwrap();
        assert!(renormalize(&z).is_err());
    }

    #[test]
    fn cell_boxes_tile_the_image() {
        let grid = (3, 5);
        let out = (17, 23);
        let boxes: Vec<BBox> = (0..3)
            .flat_map(|r| (0..5).map(move |c| grid_cell_box(grid, out, r, c)))
            .collect();
        let total: u64 = boxes.iter().map(BBox::area).sum();
        assert_eq!(total, 17 * 23);
        assert_eq!(segmentation_label(&boxes, out).positives(), 17 * 23);
    }

    fn arb_box(h: u32, w: u32) -> impl Strategy<Value = BBox> {
        (0..w, 0..h).prop_flat_map(move |(x0, y0)| {
            (x0 + 1..=w, y0 + 1..=h).prop_map(move |(x1, y1)| BBox::new("r", x0, y0, x1, y1))
        })
    }

    proptest! {
        #[test]
        fn upsample_stays_within_bounds(
            (gh, gw, vals) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| (Just(h), Just(w), proptest::collection::vec(0.0f64..10.0, h * w))),
            oh in 1usize..20, ow in 1usize..20,
        ) {
            let s = upsample_bilinear(&vals, (gh, gw), (oh, ow)).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s.scores.iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn labels_match_brute_force(
            h in 1u32..=64, w in 1u32..=64, seed_boxes in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 0..5)
        ) {
            let boxes: Vec<BBox> = seed_boxes.iter().map(|&(a, b, c, d)| {
                let x0 = (a * (w - 1) as f64) as u32;
                let y0 = (b * (h - 1) as f64) as u32;
                let x1 = x0 + 1 + (c * (w - x0 - 1) as f64) as u32;
                let y1 = y0 + 1 + (d * (h - y0 - 1) as f64) as u32;
                BBox::new("r", x0, y0, x1, y1)
            }).collect();
            let label = segmentation_label(&boxes, (h as usize, w as usize));
            for r in 0..h as usize {
                for c in 0..w as usize {
                    let member = boxes.iter().any(|b| b.contains(r, c));
                    prop_assert_eq!(label.labels[r * w as usize + c], member);
                }
            }
        }

        #[test]
        fn adding_a_box_never_lowers_scores(
            boxes in proptest::collection::vec((arb_box(8, 8), 0.0f64..1.0), 0..5),
            extra in (arb_box(8, 8), 0.0f64..1.0),
        ) {
            let before = bbox_max_scores(&boxes, (8, 8)).unwrap();
            let mut more = boxes.clone();
            more.push(extra);
            let after = bbox_max_scores(&more, (8, 8)).unwrap();
            prop_assert!(before.scores.iter().zip(&after.scores).all(|(a, b)| b >= a));
        }
    }
}
