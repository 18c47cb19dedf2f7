//! Binary greyscale PGM (P5, maxval 255).

use std::fs;
use std::path::Path;

use super::IntrospectionError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl PgmImage {
    /// Min-max scales a row-major `rows x cols` matrix onto 0..=255, one
    /// image row per matrix row. A constant matrix maps to black.
    pub fn from_matrix(values: &[f32], rows: usize, cols: usize) -> Result<Self, IntrospectionError> {
        if values.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(IntrospectionError::Contract(format!(
                "{} values do not form a non-empty {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(IntrospectionError::Contract(format!("matrix entry {i} is not finite")));
        }
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let pixels = values
            .iter()
            .map(|&v| {
                if hi > lo {
                    ((v as f64 - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        Ok(Self {
            width: cols,
            height: rows,
            pixels,
        })
    }

    /// A vector drawn as a band `height` rows tall.
    pub fn strip(values: &[f32], height: usize) -> Result<Self, IntrospectionError> {
        let row = Self::from_matrix(values, 1, values.len())?;
        Ok(Self {
            width: row.width,
            height,
            pixels: row.pixels.repeat(height),
        })
    }

    /// Stacks images of equal width top to bottom.
    pub fn vstack(images: &[PgmImage]) -> Result<Self, IntrospectionError> {
        let width = images.first().map_or(0, |i| i.width);
        if images.iter().any(|i| i.width != width) || width == 0 {
            return Err(IntrospectionError::Contract("stacked images need one common width".into()));
        }
        Ok(Self {
            width,
            height: images.iter().map(|i| i.height).sum(),
            pixels: images.iter().flat_map(|i| i.pixels.iter().copied()).collect(),
        })
    }

    /// Flips rows so that the first matrix row ends up at the bottom, as
    /// spectrograms are usually drawn.
    pub fn flipped(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.chunks(self.width).rev().flatten().copied().collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), IntrospectionError> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| IntrospectionError::Io(format!("{}: {e}", path.display())))
    }
}

/// Writes a matrix as a P5 image.
pub fn render_pgm(values: &[f32], rows: usize, cols: usize, path: impl AsRef<Path>) -> Result<(), IntrospectionError> {
    PgmImage::from_matrix(values, rows, cols)?.write(path)
}

/// Reads a P5 image with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<PgmImage, IntrospectionError> {
    let bad = |m: &str| IntrospectionError::Contract(format!("not a P5 image: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("wrong magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval is not 255"));
    }
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("no pixel data"))?.to_vec();
    if pixels.len() != width * height {
        return Err(bad("pixel count does not match the header"));
    }
    Ok(PgmImage { width, height, pixels })
}
