//! Grayscale images and their two on-disk encodings (binary PGM in base64, or an
//! inline row-major float array).

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ImageRecord", into = "ImageRecord")]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be nonzero"));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// True when every value is exactly `k / 255` for an integer `k`, i.e. the
    /// image survives an 8-bit PGM round trip unchanged.
    pub fn is_8bit(&self) -> bool {
        self.data.iter().all(|&v| quantize(v) as f64 / 255.0 == v)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (header, body) = parse_pgm_header(bytes)?;
        let PgmHeader { width, height, maxval } = header;
        let data: Vec<f64> = if maxval < 256 {
            if body.len() < width * height {
                return Err(Error::Parse("truncated PGM raster".into()));
            }
            body[..width * height]
                .iter()
                .map(|&b| f64::from(b) / f64::from(maxval))
                .collect()
        } else {
            if body.len() < 2 * width * height {
                return Err(Error::Parse("truncated PGM raster".into()));
            }
            body[..2 * width * height]
                .chunks_exact(2)
                .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / f64::from(maxval))
                .collect()
        };
        if data.iter().any(|&v| v > 1.0) {
            return Err(Error::Parse("PGM sample exceeds maxval".into()));
        }
        GrayImage::new(width, height, data)
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: u32,
}

fn parse_pgm_header(bytes: &[u8]) -> Result<(PgmHeader, &[u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::Parse("non-ASCII PGM header".into()))?,
        );
    }
    if fields[0] != "P5" {
        return Err(Error::Parse(format!("unsupported PGM magic `{}`", fields[0])));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Parse(format!("bad PGM header field `{s}`")))
    };
    let header = PgmHeader {
        width: num(fields[1])?,
        height: num(fields[2])?,
        maxval: num(fields[3])? as u32,
    };
    if header.maxval == 0 || header.maxval > 65535 {
        return Err(Error::Parse(format!("bad PGM maxval {}", header.maxval)));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((header, &bytes[(pos + 1).min(bytes.len())..]))
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pgm_base64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<Vec<f64>>,
}

impl TryFrom<ImageRecord> for GrayImage {
    type Error = Error;

    fn try_from(rec: ImageRecord) -> Result<Self> {
        match (rec.pgm_base64, rec.data) {
            (Some(b64), None) => {
                let bytes = STANDARD
                    .decode(b64.as_bytes())
                    .map_err(|e| Error::Parse(format!("bad base64 image: {e}")))?;
                let img = GrayImage::from_pgm(&bytes)?;
                if img.width != rec.width || img.height != rec.height {
                    return Err(Error::Parse(format!(
                        "PGM is {}x{} but record declares {}x{}",
                        img.width, img.height, rec.width, rec.height
                    )));
                }
                Ok(img)
            }
            (None, Some(data)) => GrayImage::new(rec.width, rec.height, data),
            _ => Err(Error::Parse(
                "image needs exactly one of `pgm_base64` or `data`".into(),
            )),
        }
    }
}

impl From<GrayImage> for ImageRecord {
    fn from(img: GrayImage) -> Self {
        if img.is_8bit() {
            ImageRecord {
                width: img.width,
                height: img.height,
                pgm_base64: Some(STANDARD.encode(img.to_pgm())),
                data: None,
            }
        } else {
            ImageRecord {
                width: img.width,
                height: img.height,
                pgm_base64: None,
                data: Some(img.data),
            }
        }
    }
}
