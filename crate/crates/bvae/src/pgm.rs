//! Binary PGM (P5) output and the tile-grid layout used for sample sheets.
//!
//! Header is exactly `P5\n{width} {height}\n255\n` followed by raw row-major
//! bytes, so files are byte-deterministic. Grids pack 28x28 (or any fixed
//! size) tiles left to right, `cols` per row, final row padded black.

use crate::tensor::Tensor;
use std::io;
use std::path::Path;

/// 8-bit gray level for a pixel in [0, 1]: `round(255 * p)`, clamped.
pub fn quantize(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0)).round() as u8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl PgmImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> PgmImage {
        assert_eq!(pixels.len(), width * height, "pgm: pixel count mismatch");
        PgmImage {
            width,
            height,
            pixels,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }
}

/// Packs `[n, tile_h * tile_w]` images into a grid of `cols` tiles per row,
/// `ceil(n / cols)` rows, missing cells black.
pub fn tile(images: &Tensor, tile_h: usize, tile_w: usize, cols: usize) -> PgmImage {
    assert!(cols > 0, "tile: cols must be positive");
    let n = images.rows();
    assert!(n > 0, "tile: no images");
    assert_eq!(
        images.cols(),
        tile_h * tile_w,
        "tile: images are {} pixels, grid cells are {}x{}",
        images.cols(),
        tile_h,
        tile_w
    );
    let rows = n.div_ceil(cols);
    let (width, height) = (cols * tile_w, rows * tile_h);
    let mut pixels = vec![0u8; width * height];
    for i in 0..n {
        let (gr, gc) = (i / cols, i % cols);
        let img = images.row(i);
        for y in 0..tile_h {
            let dst = (gr * tile_h + y) * width + gc * tile_w;
            for x in 0..tile_w {
                pixels[dst + x] = quantize(img[y * tile_w + x]);
            }
        }
    }
    PgmImage::new(width, height, pixels)
}
