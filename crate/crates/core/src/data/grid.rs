//! Binary PGM/PPM image grids for eyeballing samples and reconstructions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gray level of the 1-pixel lines between tiles.
pub const SEPARATOR: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Interleaved pixel bytes, row-major.
    pub pixels: Vec<u8>,
    /// Number of values that fell outside `[0, 1]` and were clipped.
    pub clipped: usize,
}

impl Grid {
    /// Netpbm bytes: `P5` for one channel, `P6` for three.
    pub fn to_pnm(&self) -> Vec<u8> {
        let tag = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{tag}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn quantize(v: f32) -> (u8, bool) {
    if v.is_nan() {
        return (0, true);
    }
    let clipped = !(0.0..=1.0).contains(&v);
    ((v.clamp(0.0, 1.0) * 255.0).round() as u8, clipped)
}

/// Tiles `[C, H, W]` (or `[H, W]`) images row-major into a `rows x cols`
/// grid with 1-pixel separators. Unused cells stay black.
pub fn render_grid(tiles: &[Tensor<f32>], rows: usize, cols: usize) -> Result<Grid> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::InvalidArgument("image grid needs at least one tile".into()))?;
    if rows * cols < tiles.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tiles do not fit a {rows}x{cols} grid",
            tiles.len()
        )));
    }
    let (channels, h, w) = match first.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] if *c == 1 || *c == 3 => (*c, *h, *w),
        other => {
            return Err(Error::InvalidArgument(format!(
                "grid tiles must be [H,W], [1,H,W] or [3,H,W], got {other:?}"
            )))
        }
    };
    let width = cols * w + cols.saturating_sub(1);
    let height = rows * h + rows.saturating_sub(1);
    let mut pixels = vec![SEPARATOR; width * height * channels];
    for r in 0..rows {
        for c in 0..cols {
            for y in 0..h {
                let start = (((r * (h + 1) + y) * width) + c * (w + 1)) * channels;
                pixels[start..start + w * channels].fill(0);
            }
        }
    }
    let mut clipped = 0;
    for (i, tile) in tiles.iter().enumerate() {
        if tile.shape() != first.shape() {
            return Err(Error::shape("image grid", first.shape(), tile.shape()));
        }
        let (r, c) = (i / cols, i % cols);
        let data = tile.data();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..channels {
                    let (q, out) = quantize(data[(ch * h + y) * w + x]);
                    clipped += out as usize;
                    let px = ((r * (h + 1) + y) * width + c * (w + 1) + x) * channels + ch;
                    pixels[px] = q;
                }
            }
        }
    }
    if clipped > 0 {
        log::warn!("image grid: clipped {clipped} values outside [0, 1]");
    }
    Ok(Grid {
        width,
        height,
        channels,
        pixels,
        clipped,
    })
}

pub fn write_image_grid(
    tiles: &[Tensor<f32>],
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<Grid> {
    let grid = render_grid(tiles, rows, cols)?;
    std::fs::write(path, grid.to_pnm()).map_err(|e| Error::io(path, e))?;
    Ok(grid)
}
