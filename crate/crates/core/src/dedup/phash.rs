//! 64-bit difference hash.
//!
//! Pipeline: integer luma, bilinear resample to 9x8 (pixel-centre aligned),
//! then bit `j = 8*y + x` is set iff `p(x+1, y) > p(x, y)`. Bit 0 is the most
//! significant bit of the hash.

use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;

use crate::corpus::{DatasetManifest, PerceptualHash};
use crate::error::{Error, Result};

const HASH_W: usize = 9;
const HASH_H: usize = 8;

/// Integer Rec.601 luma, rounded.
fn luma(p: &image::Rgb<u8>) -> u32 {
    let [r, g, b] = p.0;
    (299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b) + 500) / 1000
}

fn sample_axis(t: usize, dst: usize, src: usize) -> (usize, usize, f64) {
    let pos = ((t as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

fn resample(gray: &[u32], w: usize, h: usize) -> [[f64; HASH_W]; HASH_H] {
    let mut out = [[0.0; HASH_W]; HASH_H];
    for (ty, row) in out.iter_mut().enumerate() {
        let (y0, y1, fy) = sample_axis(ty, HASH_H, h);
        for (tx, cell) in row.iter_mut().enumerate() {
            let (x0, x1, fx) = sample_axis(tx, HASH_W, w);
            let p = |x: usize, y: usize| f64::from(gray[y * w + x]);
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            *cell = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

pub fn dhash_rgb(img: &RgbImage) -> PerceptualHash {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray: Vec<u32> = img.pixels().map(luma).collect();
    let grid = resample(&gray, w, h);
    let mut bits = 0u64;
    for (y, row) in grid.iter().enumerate() {
        for x in 0..HASH_W - 1 {
            if row[x + 1] > row[x] {
                bits |= 1u64 << (63 - (y * 8 + x));
            }
        }
    }
    PerceptualHash(bits)
}

pub fn compute_phash(bytes: &[u8]) -> Result<PerceptualHash> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Image("zero-sized image".into()));
    }
    Ok(dhash_rgb(&img.to_rgb8()))
}

pub fn hamming(a: PerceptualHash, b: PerceptualHash) -> u32 {
    (a.0 ^ b.0).count_ones()
}

/// Read every referenced image under `image_root`, filling in its dimensions
/// and perceptual hash. Files are processed in parallel.
pub fn attach_image_info(m: &mut DatasetManifest, image_root: &Path) -> Result<()> {
    m.samples.par_iter_mut().try_for_each(|s| {
        for img in &mut s.images {
            let path = img.resolve(image_root);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
            img.width_px = Some(decoded.width());
            img.height_px = Some(decoded.height());
            img.phash = Some(dhash_rgb(&decoded.to_rgb8()));
        }
        Ok(())
    })
}
