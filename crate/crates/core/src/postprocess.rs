//! Morphological closing of predicted masks and region-of-interest crops.

use image::{imageops, GrayImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize_image, Mask};

pub const ROI_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeShape {
    Square,
    Disk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    pub shape: SeShape,
    pub radius: usize,
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self { shape: SeShape::Square, radius: 2 }
    }
}

impl StructuringElement {
    pub fn new(shape: SeShape, radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(Error::Param("structuring element radius must be at least 1".into()));
        }
        Ok(Self { shape, radius })
    }

    /// Offsets `(dx, dy)` covered by the element; symmetric about the origin.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = self.radius as isize;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if self.shape == SeShape::Square || dx * dx + dy * dy <= r * r {
                    out.push((dx, dy));
                }
            }
        }
        out
    }
}

/// Offsets outside the raster are skipped, which amounts to padding with 0
/// for dilation and with 1 for erosion. With that pairing the two are
/// adjoint, so their composition is a proper closing even at the border.
fn morph(mask: &Mask, offsets: &[(isize, isize)], dilate: bool) -> Mask {
    let (w, h) = mask.dims();
    let src = mask.data();
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for &(dx, dy) in offsets {
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                    continue;
                }
                let on = src[yy as usize * w + xx as usize] != 0;
                if dilate && on {
                    acc = true;
                    break;
                }
                if !dilate && !on {
                    acc = false;
                    break;
                }
            }
            out[y * w + x] = acc as u8;
        }
    }
    Mask::from_vec(w, h, out).expect("binary by construction")
}

pub fn dilate(mask: &Mask, se: StructuringElement) -> Mask {
    morph(mask, &se.offsets(), true)
}

pub fn erode(mask: &Mask, se: StructuringElement) -> Mask {
    morph(mask, &se.offsets(), false)
}

/// Dilation followed by erosion with the same element.
pub fn close(mask: &Mask, se: StructuringElement) -> Mask {
    erode(&dilate(mask, se), se)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiResult {
    /// `ROI_SIZE x ROI_SIZE` classifier input.
    pub roi: GrayImage,
    /// Full-size `image * mask`, before cropping.
    pub masked: GrayImage,
    pub crop: CropRect,
    /// Set when the mask was empty and a centred square was used instead.
    pub empty_mask: bool,
}

/// Multiplies the image by the mask, crops to the mask's bounding box grown
/// by 10% per side (clamped to the image), and resizes to 224x224.
pub fn extract_roi(image: &GrayImage, mask: &Mask) -> Result<RoiResult> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if mask.dims() != (w, h) {
        return Err(Error::Shape(format!("mask {:?} does not match image {:?}", mask.dims(), (w, h))));
    }
    let data = image.as_raw().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
    let masked = GrayImage::from_raw(w as u32, h as u32, data).expect("image dimensions");
    let (crop, empty_mask) = match mask.bounding_box() {
        Some((x0, y0, x1, y1)) => {
            let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
            let (mx, my) = ((bw as f64 * 0.1).round() as usize, (bh as f64 * 0.1).round() as usize);
            let (cx0, cy0) = (x0.saturating_sub(mx), y0.saturating_sub(my));
            let (cx1, cy1) = ((x1 + mx).min(w - 1), (y1 + my).min(h - 1));
            (CropRect { x: cx0, y: cy0, width: cx1 - cx0 + 1, height: cy1 - cy0 + 1 }, false)
        }
        None => {
            let side = w.min(h);
            (CropRect { x: (w - side) / 2, y: (h - side) / 2, width: side, height: side }, true)
        }
    };
    let cropped =
        imageops::crop_imm(&masked, crop.x as u32, crop.y as u32, crop.width as u32, crop.height as u32).to_image();
    Ok(RoiResult { roi: resize_image(&cropped, ROI_SIZE, ROI_SIZE), masked, crop, empty_mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_offsets() {
        let se = StructuringElement::new(SeShape::Disk, 1).unwrap();
        assert_eq!(se.offsets().len(), 5);
        assert_eq!(StructuringElement::default().offsets().len(), 25);
        assert!(StructuringElement::new(SeShape::Square, 0).is_err());
    }

    #[test]
    fn closing_fills_a_hole() {
        let mut m = Mask::from_fn(32, 32, |x, y| (x as i64 - 16).pow(2) + (y as i64 - 16).pow(2) <= 100);
        m.set(16, 16, false);
        let c = close(&m, StructuringElement::new(SeShape::Square, 1).unwrap());
        assert!(c.get(16, 16));
    }

    #[test]
    fn full_mask_roi_is_the_whole_image() {
        let img = GrayImage::from_fn(300, 200, |x, y| image::Luma([((x + y) % 256) as u8]));
        let r = extract_roi(&img, &Mask::full(300, 200)).unwrap();
        assert_eq!(r.crop, CropRect { x: 0, y: 0, width: 300, height: 200 });
        assert_eq!(r.roi, resize_image(&img, 224, 224));
        assert!(!r.empty_mask);
    }

    #[test]
    fn empty_mask_gives_a_black_flagged_roi() {
        let img = GrayImage::from_pixel(40, 30, image::Luma([77]));
        let r = extract_roi(&img, &Mask::new(40, 30)).unwrap();
        assert!(r.empty_mask);
        assert_eq!(r.crop, CropRect { x: 5, y: 0, width: 30, height: 30 });
        assert_eq!(r.roi.dimensions(), (224, 224));
        assert!(r.roi.as_raw().iter().all(|&v| v == 0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(matches!(extract_roi(&GrayImage::new(4, 4), &Mask::new(4, 5)), Err(Error::Shape(_))));
    }
}
