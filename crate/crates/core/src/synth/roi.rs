//! Regions of interest: mask-to-box conversion, 3D slicing and box overlays.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTLINE_WIDTH: u32 = 3;
pub const OUTLINE_COLOR: [u8; 3] = [255, 0, 0];

/// Inclusive pixel rectangle; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        assert!(x_min <= x_max && y_min <= y_max, "inverted bbox");
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Whether (x, y) lies on the outline band of this box.
    pub fn on_outline(&self, x: u32, y: u32, width: u32) -> bool {
        let inside = (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y);
        inside && (x - self.x_min < width || self.x_max - x < width || y - self.y_min < width || self.y_max - y < width)
    }
}

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::ShapeMismatch("ragged mask rows".into()));
        }
        Ok(Self {
            width,
            height,
            data: rows.concat(),
        })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiKind {
    Bbox,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub kind: RoiKind,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
}

impl Roi {
    pub fn from_bbox(bbox: BBox) -> Self {
        Self {
            kind: RoiKind::Bbox,
            bbox,
            mask: None,
        }
    }
}

/// Tightest rectangle around the set pixels.
pub fn mask_to_bbox(mask: &Mask) -> Result<Roi> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for row in 0..mask.height {
        for col in 0..mask.width {
            if mask.get(row, col) {
                bounds = Some(match bounds {
                    None => (col, row, col, row),
                    Some((x0, y0, x1, y1)) => (x0.min(col), y0.min(row), x1.max(col), y1.max(row)),
                });
            }
        }
    }
    let (x0, y0, x1, y1) = bounds.ok_or(Error::EmptyMask)?;
    Ok(Roi {
        kind: RoiKind::Mask,
        bbox: BBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32),
        mask: Some(mask.clone()),
    })
}

/// Dense `(depth, height, width)` grid, z-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Volume<T> {
    pub fn new(depth: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != depth * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {depth}x{height}x{width} volume",
                data.len()
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
            data,
        })
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[z * n..(z + 1) * n]
    }
}

/// 2D axial slice with its mask and z index.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice<T> {
    pub z: usize,
    pub pixels: Vec<T>,
    pub mask: Mask,
}

/// Split a volume and its mask along z, dropping slices whose mask is empty.
pub fn slice_volume<T: Clone>(volume: &Volume<T>, masks: &Volume<bool>) -> Result<Vec<Slice<T>>> {
    if (volume.depth, volume.height, volume.width) != (masks.depth, masks.height, masks.width) {
        return Err(Error::ShapeMismatch(format!(
            "volume {}x{}x{} vs mask {}x{}x{}",
            volume.depth, volume.height, volume.width, masks.depth, masks.height, masks.width
        )));
    }
    Ok((0..volume.depth)
        .filter_map(|z| {
            let m = masks.slice(z);
            m.iter().any(|&b| b).then(|| Slice {
                z,
                pixels: volume.slice(z).to_vec(),
                mask: Mask {
                    width: volume.width,
                    height: volume.height,
                    data: m.to_vec(),
                },
            })
        })
        .collect())
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding to memory cannot fail");
    buf.into_inner()
}

/// Draw fixed-style outlines for every RoI. The result is an RGB PNG.
pub fn render_bbox(image_bytes: &[u8], rois: &[Roi]) -> Result<Vec<u8>> {
    let mut img = image::load_from_memory(image_bytes)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    for roi in rois {
        let b = roi.bbox;
        if b.x_max >= w || b.y_max >= h {
            return Err(Error::RoiOutOfBounds {
                x_min: b.x_min,
                y_min: b.y_min,
                x_max: b.x_max,
                y_max: b.y_max,
                width: w,
                height: h,
            });
        }
        for y in b.y_min..=b.y_max {
            for x in b.x_min..=b.x_max {
                if b.on_outline(x, y, OUTLINE_WIDTH) {
                    img.put_pixel(x, y, Rgb(OUTLINE_COLOR));
                }
            }
        }
    }
    Ok(encode_png(&img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeSet;

    #[test]
    fn single_pixel_mask() {
        let mut m = Mask::new(10, 8);
        m.set(4, 7, true);
        assert_eq!(mask_to_bbox(&m).unwrap().bbox, BBox::new(7, 4, 7, 4));
    }

    #[test]
    fn two_pixel_mask() {
        let mut m = Mask::new(10, 10);
        m.set(2, 3, true);
        m.set(5, 7, true);
        let b = mask_to_bbox(&m).unwrap().bbox;
        assert_eq!((b.x_min, b.x_max, b.y_min, b.y_max), (3, 7, 2, 5));
    }

    #[test]
    fn empty_mask_errors() {
        assert!(matches!(mask_to_bbox(&Mask::new(4, 4)), Err(Error::EmptyMask)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn bbox_matches_pixel_scan(w in 1usize..256, h in 1usize..256, seed: u64, density in 1u32..50) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut m = Mask::new(w, h);
            let mut set = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    if rng.gen_ratio(1, density * 10) {
                        m.set(r, c, true);
                        set.push((c, r));
                    }
                }
            }
            if set.is_empty() {
                m.set(h / 2, w / 2, true);
                set.push((w / 2, h / 2));
            }
            let b = mask_to_bbox(&m).unwrap().bbox;
            prop_assert_eq!(b.x_min as usize, set.iter().map(|p| p.0).min().unwrap());
            prop_assert_eq!(b.x_max as usize, set.iter().map(|p| p.0).max().unwrap());
            prop_assert_eq!(b.y_min as usize, set.iter().map(|p| p.1).min().unwrap());
            prop_assert_eq!(b.y_max as usize, set.iter().map(|p| p.1).max().unwrap());
        }
    }

    fn vol(depth: usize, set_slices: &[usize]) -> (Volume<u8>, Volume<bool>) {
        let (h, w) = (4, 5);
        let data = (0..depth * h * w).map(|i| i as u8).collect();
        let mut mask = vec![false; depth * h * w];
        for &z in set_slices {
            mask[z * h * w + 7] = true;
        }
        (Volume::new(depth, h, w, data).unwrap(), Volume::new(depth, h, w, mask).unwrap())
    }

    #[test]
    fn slicing_keeps_masked_slices_in_order() {
        let (v, m) = vol(5, &[3, 1]);
        let s = slice_volume(&v, &m).unwrap();
        assert_eq!(s.iter().map(|s| s.z).collect::<Vec<_>>(), [1, 3]);
        assert_eq!(s[0].pixels, v.slice(1));
        let (v, m) = vol(5, &[]);
        assert!(slice_volume(&v, &m).unwrap().is_empty());
        let (v, m) = vol(1, &[0]);
        assert_eq!(slice_volume(&v, &m).unwrap().len(), 1);
    }

    #[test]
    fn slicing_rejects_shape_mismatch() {
        let (v, _) = vol(3, &[]);
        let m = Volume::new(2, 4, 5, vec![false; 40]).unwrap();
        assert!(matches!(slice_volume(&v, &m), Err(Error::ShapeMismatch(_))));
    }

    fn base_image() -> RgbImage {
        RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 3) as u8, (y * 5) as u8, 17]))
    }

    fn changed(a: &RgbImage, b: &RgbImage) -> BTreeSet<(u32, u32)> {
        a.enumerate_pixels()
            .filter(|(x, y, p)| b.get_pixel(*x, *y) != *p)
            .map(|(x, y, _)| (x, y))
            .collect()
    }

    #[test]
    fn no_rois_preserves_pixels() {
        let src = base_image();
        let out = image::load_from_memory(&render_bbox(&encode_png(&src), &[]).unwrap())
            .unwrap()
            .to_rgb8();
        assert_eq!(out, src);
    }

    #[test]
    fn one_roi_changes_exactly_its_border() {
        let src = base_image();
        let b = BBox::new(5, 4, 20, 18);
        let out = image::load_from_memory(&render_bbox(&encode_png(&src), &[Roi::from_bbox(b)]).unwrap())
            .unwrap()
            .to_rgb8();
        let mut expected = BTreeSet::new();
        for y in 4..=18 {
            for x in 5..=20 {
                if !(8..=17).contains(&x) || !(7..=15).contains(&y) {
                    expected.insert((x, y));
                }
            }
        }
        assert_eq!(changed(&src, &out), expected);
    }

    #[test]
    fn overlapping_rois_union_independent_of_order() {
        let src = encode_png(&base_image());
        let a = Roi::from_bbox(BBox::new(2, 2, 25, 20));
        let b = Roi::from_bbox(BBox::new(10, 8, 38, 28));
        let ab = render_bbox(&src, &[a.clone(), b.clone()]).unwrap();
        let ba = render_bbox(&src, &[b.clone(), a.clone()]).unwrap();
        assert_eq!(ab, ba);
        let only_a = image::load_from_memory(&render_bbox(&src, &[a]).unwrap()).unwrap().to_rgb8();
        let only_b = image::load_from_memory(&render_bbox(&src, &[b]).unwrap()).unwrap().to_rgb8();
        let both = image::load_from_memory(&ab).unwrap().to_rgb8();
        let base = base_image();
        let union: BTreeSet<_> = changed(&base, &only_a).union(&changed(&base, &only_b)).copied().collect();
        assert_eq!(changed(&base, &both), union);
    }

    #[test]
    fn out_of_bounds_roi_rejected() {
        let src = encode_png(&base_image());
        let r = Roi::from_bbox(BBox::new(0, 0, 40, 10));
        assert!(matches!(render_bbox(&src, &[r]), Err(Error::RoiOutOfBounds { .. })));
    }
}
