//! Dense 2-D grids used throughout the pipeline.
//!
//! Intensities are kept as `f64` in the unit interval regardless of the
//! on-disk bit depth. Only 8-bit grayscale PNG is read or written.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width} = {} values", height * width),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Copy of the pixels inside `bbox`. The box must lie inside the image.
    pub fn crop(&self, bbox: BBox) -> GrayImage {
        assert!(
            bbox.row + bbox.height <= self.height && bbox.col + bbox.width <= self.width,
            "crop box {bbox:?} outside {}x{} image",
            self.height,
            self.width
        );
        GrayImage::from_fn(bbox.height, bbox.width, |r, c| {
            self.get(bbox.row + r, bbox.col + c)
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Anisotropic total variation: sum of absolute differences between
    /// horizontally and vertically adjacent pixels.
    pub fn total_variation(&self) -> f64 {
        let mut tv = 0.0;
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(r, c);
                if c + 1 < self.width {
                    tv += (self.get(r, c + 1) - v).abs();
                }
                if r + 1 < self.height {
                    tv += (self.get(r + 1, c) - v).abs();
                }
            }
        }
        tv
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> GrayImage {
        GrayImage::from_fn(self.height, self.width, |r, c| {
            self.get(r, self.width - 1 - c)
        })
    }

    /// Zero every pixel outside `mask`. Shapes must agree.
    pub fn masked(&self, mask: &Mask) -> GrayImage {
        assert_eq!((self.height, self.width), (mask.height(), mask.width()));
        let data = self
            .data
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        GrayImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Quantize to 8 bits, rounding to nearest and clamping to [0, 255].
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| {
                let v = if v.is_finite() { v } else { 0.0 };
                (v * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        GrayImage::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png_u8(self.height, self.width, &self.to_u8())
    }
}

pub(crate) fn encode_png_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes.to_vec())
        .ok_or_else(|| Error::ImageDecode("buffer does not match dimensions".into()))?;
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::ImageDecode(e.to_string()))?;
    Ok(out)
}

/// Decode an 8-bit grayscale PNG into unit-interval intensities (value / 255).
///
/// Any other colour type or bit depth is rejected rather than converted.
pub fn decode_png_gray(bytes: &[u8]) -> Result<GrayImage> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::ImageDecode(e.to_string()))?;
    match decoded {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            GrayImage::from_u8(h as usize, w as usize, img.as_raw())
        }
        other => Err(Error::ImageDecode(format!(
            "expected 8-bit grayscale, found {:?}",
            other.color()
        ))),
    }
}

/// Axis-aligned box in pixel coordinates: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row: 0,
            col: 0,
            height,
            width,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row
            && row < self.row + self.height
            && col >= self.col
            && col < self.col + self.width
    }

    pub fn union(&self, other: &BBox) -> BBox {
        let row = self.row.min(other.row);
        let col = self.col.min(other.col);
        let bottom = (self.row + self.height).max(other.row + other.height);
        let right = (self.col + self.width).max(other.col + other.width);
        BBox {
            row,
            col,
            height: bottom - row,
            width: right - col,
        }
    }
}

/// Binary grid, row-major.
///
/// Serialized as `{"height", "width", "bits"}` where `bits` is a hex string of
/// the cells packed eight per byte, least significant bit first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Tight bounding box of the true cells, `None` when the mask is empty.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    r0 = r0.min(r);
                    c0 = c0.min(c);
                    r1 = r1.max(r);
                    c1 = c1.max(c);
                }
            }
        }
        (r0 != usize::MAX).then(|| BBox {
            row: r0,
            col: c0,
            height: r1 - r0 + 1,
            width: c1 - c0 + 1,
        })
    }

    pub fn crop(&self, bbox: BBox) -> Mask {
        Mask::from_fn(bbox.height, bbox.width, |r, c| {
            self.get(bbox.row + r, bbox.col + c)
        })
    }

    /// Place this mask into a larger frame at `(row, col)`.
    pub fn embed(&self, height: usize, width: usize, row: usize, col: usize) -> Mask {
        let mut out = Mask::new(height, width);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    out.set(row + r, col + c, true);
                }
            }
        }
        out
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    height: usize,
    width: usize,
    bits: String,
}

impl From<Mask> for MaskRepr {
    fn from(m: Mask) -> Self {
        let mut bits = String::with_capacity(m.data.len().div_ceil(8) * 2);
        for chunk in m.data.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| if b { acc | (1 << i) } else { acc });
            bits.push_str(&format!("{byte:02x}"));
        }
        MaskRepr {
            height: m.height,
            width: m.width,
            bits,
        }
    }
}

impl TryFrom<MaskRepr> for Mask {
    type Error = String;

    fn try_from(r: MaskRepr) -> std::result::Result<Self, String> {
        let n = r
            .height
            .checked_mul(r.width)
            .ok_or("mask dimensions overflow")?;
        if r.bits.len() != n.div_ceil(8) * 2 {
            return Err(format!(
                "mask bit string has {} hex digits, expected {}",
                r.bits.len(),
                n.div_ceil(8) * 2
            ));
        }
        let mut data = Vec::with_capacity(n + 8);
        for i in (0..r.bits.len()).step_by(2) {
            let byte = r
                .bits
                .get(i..i + 2)
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or("mask bit string is not hex")?;
            data.extend((0..8).map(|b| byte & (1 << b) != 0));
        }
        data.truncate(n);
        Ok(Mask {
            height: r.height,
            width: r.width,
            data,
        })
    }
}

/// Channel-major 3-D array, the network input and feature-map layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}
