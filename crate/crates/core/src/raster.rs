//! Image and mask rasters plus the mask algebra shared by every stage.
//!
//! Images are 8-bit RGB, row-major. Masks hold one byte per pixel with
//! values `0` (keep) and `1` (remove). Both are immutable once built.

use std::io::Cursor;
use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, ImageFormat, RgbImage};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster dimensions must be at least 1x1, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("buffer holds {actual} samples, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("mask sample {value} at offset {offset} is not binary")]
    NonBinaryMask { offset: usize, value: u8 },
    #[error("dimension mismatch at index {index}: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        index: usize,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("empty mask list needs a reference size")]
    NoReference,
    #[error("unsupported pixel format {0:?}: only 8-bit RGB images are accepted")]
    UnsupportedImageFormat(ColorType),
    #[error("unsupported mask format {0:?}: masks must be 8-bit single channel")]
    UnsupportedMaskFormat(ColorType),
    #[error("mask PNG value {value} at pixel {offset} is neither 0 nor 255")]
    MaskPngValue { offset: usize, value: u8 },
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// An 8-bit RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("digest", &&self.digest()[..12])
            .finish()
    }
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        let expected = width * height * Self::CHANNELS;
        if data.len() != expected {
            return Err(RasterError::BufferLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// A uniformly colored image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * Self::CHANNELS)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
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

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Hex SHA-256 over the dimensions and samples.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"rgb8");
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update(&self.data);
        hex(&h.finalize())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RasterError> {
        let buf = RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Decodes a PNG, rejecting anything other than 8-bit RGB.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        match img {
            DynamicImage::ImageRgb8(rgb) => {
                let (w, h) = rgb.dimensions();
                Self::new(w as usize, h as usize, rgb.into_raw())
            }
            other => Err(RasterError::UnsupportedImageFormat(other.color())),
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    /// Bilinear downscale so the longest side is at most `max_side`.
    /// Returns a clone when already small enough.
    pub fn fit_within(&self, max_side: usize) -> Image {
        let longest = self.width.max(self.height);
        if max_side == 0 || longest <= max_side {
            return self.clone();
        }
        let scale = max_side as f64 / longest as f64;
        let nw = ((self.width as f64 * scale).round() as u32).max(1);
        let nh = ((self.height as f64 * scale).round() as u32).max(1);
        let buf = RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        let resized = image::imageops::resize(&buf, nw, nh, image::imageops::FilterType::Triangle);
        Image {
            width: nw as usize,
            height: nh as usize,
            data: resized.into_raw(),
        }
    }
}

/// A binary raster: 1 marks pixels to remove.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count())
            .finish()
    }
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(RasterError::BufferLength {
                expected: width * height,
                actual: data.len(),
            });
        }
        if let Some((offset, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(RasterError::NonBinaryMask { offset, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![0; width * height],
        })
    }

    pub fn full(width: usize, height: usize) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![1; width * height],
        })
    }

    /// Builds a mask from a per-pixel predicate `(x, y) -> set?`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
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
        self.data[y * self.width + x] == 1
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask, RasterError> {
        if self.dims() != other.dims() {
            return Err(RasterError::DimensionMismatch {
                index: 1,
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a & b)
                .collect(),
        })
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"mask");
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update(&self.data);
        hex(&h.finalize())
    }

    /// Single-channel PNG with values {0, 255}.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RasterError> {
        let buf = GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v * 255).collect(),
        )
        .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        let gray = match img {
            DynamicImage::ImageLuma8(g) => g,
            other => return Err(RasterError::UnsupportedMaskFormat(other.color())),
        };
        let (w, h) = gray.dimensions();
        let mut data = gray.into_raw();
        for (offset, v) in data.iter_mut().enumerate() {
            *v = match *v {
                0 => 0,
                255 => 1,
                value => return Err(RasterError::MaskPngValue { offset, value }),
            };
        }
        Self::new(w as usize, h as usize, data)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

fn check_dims(width: usize, height: usize) -> Result<(), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyDimensions { width, height });
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Pixelwise OR of all masks. `reference` supplies the size when the list
/// is empty and, when given, every mask must match it.
pub fn mask_union(masks: &[Mask], reference: Option<(usize, usize)>) -> Result<Mask, RasterError> {
    let dims = match (reference, masks.first()) {
        (Some(d), _) => d,
        (None, Some(m)) => m.dims(),
        (None, None) => return Err(RasterError::NoReference),
    };
    let mut out = Mask::empty(dims.0, dims.1)?;
    for (index, m) in masks.iter().enumerate() {
        if m.dims() != dims {
            return Err(RasterError::DimensionMismatch {
                index,
                expected: dims,
                actual: m.dims(),
            });
        }
        for (o, &v) in out.data.iter_mut().zip(&m.data) {
            *o |= v;
        }
    }
    Ok(out)
}

/// Dilation with a square structuring element of side `2 * radius + 1`.
///
/// Separable: a horizontal pass followed by a vertical pass, each a sliding
/// window count, so cost is independent of the radius.
pub fn mask_dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let horizontal = sliding_max(&mask.data, w, h, radius, true);
    let data = sliding_max(&horizontal, w, h, radius, false);
    Mask {
        width: w,
        height: h,
        data,
    }
}

fn sliding_max(src: &[u8], w: usize, h: usize, r: usize, along_rows: bool) -> Vec<u8> {
    let mut out = vec![0u8; src.len()];
    let (lines, len) = if along_rows { (h, w) } else { (w, h) };
    let at = |line: usize, i: usize| {
        if along_rows {
            line * w + i
        } else {
            i * w + line
        }
    };
    for line in 0..lines {
        // count of set samples in [i - r, i + r]
        let mut count: usize = (0..=r.min(len - 1))
            .map(|i| src[at(line, i)] as usize)
            .sum();
        for i in 0..len {
            out[at(line, i)] = (count > 0) as u8;
            let enter = i + r + 1;
            if enter < len {
                count += src[at(line, enter)] as usize;
            }
            if i >= r {
                count -= src[at(line, i - r)] as usize;
            }
        }
    }
    out
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, RasterError> {
    if a.dims() != b.dims() {
        return Err(RasterError::DimensionMismatch {
            index: 1,
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| {
            x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh
        })
        .unwrap()
    }

    // brute-force neighborhood dilation used as the reference
    fn dilate_naive(m: &Mask, r: usize) -> Mask {
        let (w, h) = m.dims();
        Mask::from_fn(w, h, |x, y| {
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            (y0..=y1).any(|yy| (x0..=x1).any(|xx| m.get(xx, yy)))
        })
        .unwrap()
    }

    fn arb_mask(w: usize, h: usize) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(0u8..=1, w * h).prop_map(move |d| Mask::new(w, h, d).unwrap())
    }

    #[test]
    fn image_rejects_bad_buffers() {
        assert!(matches!(
            Image::new(0, 3, vec![]),
            Err(RasterError::EmptyDimensions { .. })
        ));
        assert!(matches!(
            Image::new(2, 2, vec![0; 11]),
            Err(RasterError::BufferLength {
                expected: 12,
                actual: 11
            })
        ));
        assert!(matches!(
            Mask::new(2, 1, vec![0, 2]),
            Err(RasterError::NonBinaryMask {
                offset: 1,
                value: 2
            })
        ));
    }

    #[test]
    fn union_of_nothing_uses_reference() {
        let u = mask_union(&[], Some((4, 4))).unwrap();
        assert_eq!(u.dims(), (4, 4));
        assert_eq!(u.count(), 0);
        assert!(matches!(
            mask_union(&[], None),
            Err(RasterError::NoReference)
        ));
    }

    #[test]
    fn union_of_one_is_identity() {
        let m = rect(6, 5, 1, 1, 2, 3);
        assert_eq!(mask_union(std::slice::from_ref(&m), None).unwrap(), m);
    }

    #[test]
    fn union_of_disjoint_masks_adds_counts() {
        let a = rect(10, 10, 0, 0, 3, 1);
        let b = rect(10, 10, 5, 5, 5, 1);
        assert_eq!((a.count(), b.count()), (3, 5));
        let u = mask_union(&[a, b], None).unwrap();
        let scanned = (0..10)
            .flat_map(|y| (0..10).map(move |x| (x, y)))
            .filter(|&(x, y)| u.get(x, y))
            .count();
        assert_eq!(scanned, 8);
    }

    #[test]
    fn union_names_offending_index() {
        let err = mask_union(
            &[
                Mask::empty(4, 4).unwrap(),
                Mask::empty(4, 4).unwrap(),
                Mask::empty(3, 4).unwrap(),
            ],
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            RasterError::DimensionMismatch { index: 2, .. }
        ));
    }

    #[test]
    fn dilate_single_pixel_radius_one() {
        let m = rect(11, 11, 5, 5, 1, 1);
        let d = mask_dilate(&m, 1);
        assert_eq!(d.count(), 9);
        assert_eq!(d, rect(11, 11, 4, 4, 3, 3));
        assert_eq!(d, dilate_naive(&m, 1));
    }

    #[test]
    fn dilate_fixed_points() {
        let m = rect(7, 4, 2, 1, 2, 2);
        assert_eq!(mask_dilate(&m, 0), m);
        let full = Mask::full(7, 4).unwrap();
        for r in [1, 3, 50] {
            assert_eq!(mask_dilate(&full, r), full);
        }
    }

    #[test]
    fn iou_examples() {
        let a = rect(8, 8, 0, 0, 2, 4);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let far = rect(8, 8, 5, 5, 2, 2);
        assert_eq!(mask_iou(&a, &far).unwrap(), 0.0);
        // 2x4 rectangles sharing a 2x2 block
        let b = rect(8, 8, 0, 2, 2, 4);
        let inter = (0..8)
            .flat_map(|y| (0..8).map(move |x| (x, y)))
            .filter(|&(x, y)| a.get(x, y) && b.get(x, y))
            .count();
        let union = (0..8)
            .flat_map(|y| (0..8).map(move |x| (x, y)))
            .filter(|&(x, y)| a.get(x, y) || b.get(x, y))
            .count();
        assert_eq!((inter, union), (4, 12));
        assert!((mask_iou(&a, &b).unwrap() - 4.0 / 12.0).abs() < 1e-15);
        let e = Mask::empty(8, 8).unwrap();
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        assert!(mask_iou(&e, &Mask::empty(4, 8).unwrap()).is_err());
    }

    #[test]
    fn png_rejects_alpha_and_sixteen_bit() {
        let rgba = image::RgbaImage::new(3, 3);
        let mut bytes = Cursor::new(Vec::new());
        rgba.write_to(&mut bytes, ImageFormat::Png).unwrap();
        assert!(matches!(
            Image::from_png_bytes(bytes.get_ref()),
            Err(RasterError::UnsupportedImageFormat(ColorType::Rgba8))
        ));
        let deep: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> = image::ImageBuffer::new(3, 3);
        let mut bytes = Cursor::new(Vec::new());
        deep.write_to(&mut bytes, ImageFormat::Png).unwrap();
        assert!(matches!(
            Image::from_png_bytes(bytes.get_ref()),
            Err(RasterError::UnsupportedImageFormat(ColorType::Rgb16))
        ));
    }

    #[test]
    fn mask_png_rejects_gray_levels() {
        let mut g = GrayImage::new(2, 2);
        g.put_pixel(1, 0, image::Luma([128]));
        let mut bytes = Cursor::new(Vec::new());
        g.write_to(&mut bytes, ImageFormat::Png).unwrap();
        assert!(matches!(
            Mask::from_png_bytes(bytes.get_ref()),
            Err(RasterError::MaskPngValue {
                offset: 1,
                value: 128
            })
        ));
    }

    #[test]
    fn fit_within_limits_longest_side() {
        let img = Image::filled(2048, 512, [10, 20, 30]).unwrap();
        let small = img.fit_within(1024);
        assert_eq!(small.dims(), (1024, 256));
        assert_eq!(small.pixel(100, 100), [10, 20, 30]);
        assert_eq!(img.fit_within(4096), img);
    }

    proptest! {
        #[test]
        fn union_is_a_set_union(a in arb_mask(5, 4), b in arb_mask(5, 4), c in arb_mask(5, 4)) {
            let ab = mask_union(&[a.clone(), b.clone()], None).unwrap();
            prop_assert_eq!(&ab, &mask_union(&[b.clone(), a.clone()], None).unwrap());
            let left = mask_union(&[ab, c.clone()], None).unwrap();
            let right = mask_union(&[a.clone(), mask_union(&[b, c], None).unwrap()], None).unwrap();
            prop_assert_eq!(left, right);
            prop_assert_eq!(mask_union(&[a.clone(), a.clone()], None).unwrap(), a);
        }

        #[test]
        fn dilate_matches_reference_and_is_monotone(m in arb_mask(9, 7), r1 in 0usize..4, r2 in 0usize..4) {
            let d1 = mask_dilate(&m, r1);
            prop_assert_eq!(&d1, &dilate_naive(&m, r1));
            prop_assert!(m.is_subset_of(&d1));
            let twice = mask_dilate(&d1, r2);
            prop_assert!(mask_dilate(&m, r1.max(r2)).is_subset_of(&twice));
        }

        #[test]
        fn iou_is_symmetric(a in arb_mask(6, 6), b in arb_mask(6, 6)) {
            prop_assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
            if !a.is_empty() {
                prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn png_round_trip_is_bit_exact(
            w in 1usize..9, h in 1usize..9, seed in any::<u64>()
        ) {
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) as u8 };
            let img = Image::new(w, h, (0..w * h * 3).map(|_| next()).collect()).unwrap();
            prop_assert_eq!(Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap(), img);
            let m = Mask::new(w, h, (0..w * h).map(|_| next() & 1).collect()).unwrap();
            prop_assert_eq!(Mask::from_png_bytes(&m.to_png_bytes().unwrap()).unwrap(), m);
        }
    }
}
