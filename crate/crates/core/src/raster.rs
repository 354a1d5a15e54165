//! Binary masks and conversions between 8-bit rasters and network tensors.

use cataract_nn::{Float, Tensor};
use image::imageops::{self, FilterType};
use image::GrayImage;

use crate::error::{Error, Result};

/// A binary raster; 1 marks iris-or-pupil pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![1; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self { width, height, data }
    }

    /// Row-major values, each of which must be 0 or 1.
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!("{width}x{height} mask needs {} values, got {}", width * height, data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        }
        Ok(Self { width, height, data })
    }

    /// Binarises an 8-bit raster. Rasters already holding only 0/1 are taken
    /// as-is; anything else is thresholded at 128.
    pub fn from_gray(img: &GrayImage) -> Self {
        let raw = img.as_raw();
        let already_binary = raw.iter().all(|&v| v <= 1);
        let data = if already_binary { raw.clone() } else { raw.iter().map(|&v| (v >= 128) as u8).collect() };
        Self { width: img.width() as usize, height: img.height() as usize, data }
    }

    /// 0/255 raster for storage.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.data.iter().map(|&v| v * 255).collect())
            .expect("mask dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn inverted(&self) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for (y, row) in self.data.chunks(self.width).enumerate() {
            for (x, _) in row.iter().enumerate().filter(|(_, &v)| v != 0) {
                bbox = Some(match bbox {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        bbox
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("mask dimensions");
        let out = imageops::resize(&img, width as u32, height as u32, FilterType::Nearest);
        Self { width, height, data: out.into_raw() }
    }
}

/// Bilinear (triangle-filter) resize of an 8-bit raster.
pub fn resize_image(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    if (img.width() as usize, img.height() as usize) == (width, height) {
        return img.clone();
    }
    imageops::resize(img, width as u32, height as u32, FilterType::Triangle)
}

/// Stacks rasters into an `[N, 1, H, W]` tensor scaled to `[0, 1]`.
pub fn images_to_tensor<T: Float>(images: &[&GrayImage]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("no images to stack".into()));
    };
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape(format!("image {:?} differs from {:?}", img.dimensions(), (w, h))));
        }
        data.extend(img.as_raw().iter().map(|&v| T::of(v as f64 / 255.0)));
    }
    Ok(Tensor::from_vec([images.len(), 1, h as usize, w as usize], data)?)
}
