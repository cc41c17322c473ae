//! Heatmap export: an 8-bit grayscale PNG of the pixel scores and a JSON sidecar
//! with the raw region grid and the no-attn mass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::GrayImage;
use crate::error::{Error, Result};
use crate::saliency::{AttentionMap, PixelScoreMap};

/// Scores rescaled by their maximum to `0..=255`; an all-zero map stays black.
pub fn to_gray8(s: &PixelScoreMap) -> Vec<u8> {
    let max = s.scores.iter().cloned().fold(0.0f64, f64::max);
    s.scores
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

pub fn encode_png(s: &PixelScoreMap) -> Result<Vec<u8>> {
    encode_gray8(s.width, s.height, &to_gray8(s))
}

/// The image itself as PNG, `[0, 1]` mapped linearly onto `0..=255`.
pub fn image_png(img: &GrayImage) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
    encode_gray8(img.width(), img.height(), &bytes)
}

fn encode_gray8(width: usize, height: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::invalid(format!("png: {e}")))?;
        writer
            .write_image_data(bytes)
            .map_err(|e| Error::invalid(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Raw values behind a rendered heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub width: usize,
    pub height: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Pooled region weights, row-major over the grid.
    pub grid: Vec<f64>,
    pub no_attn: f64,
}

impl HeatmapSidecar {
    pub fn new(att: &AttentionMap, out: (usize, usize)) -> Self {
        let (gh, gw) = att.grid();
        Self {
            width: out.1,
            height: out.0,
            grid_rows: gh,
            grid_cols: gw,
            grid: att.pooled_regions().to_vec(),
            no_attn: att.no_attn_score(),
        }
    }
}

/// Writes `<stem>.png` and `<stem>.json`.
pub fn write_heatmap(stem: impl AsRef<Path>, s: &PixelScoreMap, sidecar: &HeatmapSidecar) -> Result<()> {
    let stem = stem.as_ref();
    std::fs::write(stem.with_extension("png"), encode_png(s)?)?;
    let mut json = serde_json::to_string_pretty(sidecar)?;
    json.push('\n');
    std::fs::write(stem.with_extension("json"), json)?;
    Ok(())
}
