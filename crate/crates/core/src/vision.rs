//! Image-side operations: pixel-bound normalization, cropping, and the
//! area-ratio zoom rule applied to every injected region.

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::types::{BBox, RegionRef, MAX_PIXELS, MIN_PIXELS};

#[derive(Debug, thiserror::Error)]
pub enum VisionError {
    #[error("image has zero dimension ({0}x{1})")]
    EmptyImage(u32, u32),
    #[error("box {bbox:?} lies outside the {width}x{height} image")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("area ratio {0} outside (0, 1]")]
    Domain(f64),
    #[error("zoom scale {0} outside [1, 2]")]
    ScaleRange(f64),
    #[error("image io: {0}")]
    Io(#[from] image::ImageError),
}

/// Round half up, floored at 1.
pub fn round_dim(x: f64) -> u32 {
    ((x + 0.5).floor() as u32).max(1)
}

/// An image resized into the pixel budget; all box coordinates refer to
/// this frame.
#[derive(Debug, Clone)]
pub struct WorkingImage {
    pub pixels: Arc<RgbImage>,
    pub original_dims: (u32, u32),
}

impl WorkingImage {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn dims(&self) -> (u32, u32) {
        self.pixels.dimensions()
    }

    pub fn total_pixels(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    /// Wrap an image already known to be inside the pixel bounds.
    pub fn from_normalized(pixels: RgbImage) -> Self {
        let dims = pixels.dimensions();
        WorkingImage {
            pixels: Arc::new(pixels),
            original_dims: dims,
        }
    }
}

/// Target dimensions for an image of `width x height` under the bounds.
pub fn bounded_dims(width: u32, height: u32, min_pixels: u64, max_pixels: u64) -> (u32, u32) {
    let total = width as u64 * height as u64;
    let scaled = |s: f64, round: fn(f64) -> f64| {
        (
            (round(width as f64 * s) as u32).max(1),
            (round(height as f64 * s) as u32).max(1),
        )
    };
    let area = |(w, h): (u32, u32)| w as u64 * h as u64;
    if total < min_pixels {
        let s = (min_pixels as f64 / total as f64).sqrt();
        let dims = scaled(s, |x| (x + 0.5).floor());
        if area(dims) >= min_pixels {
            dims
        } else {
            scaled(s, f64::ceil)
        }
    } else if total > max_pixels {
        let s = (max_pixels as f64 / total as f64).sqrt();
        let dims = scaled(s, |x| (x + 0.5).floor());
        if area(dims) <= max_pixels {
            dims
        } else {
            scaled(s, f64::floor)
        }
    } else {
        (width, height)
    }
}

/// Resize into the default pixel budget `[3136, 1605632]`.
pub fn normalize_pixels(image: &RgbImage) -> Result<WorkingImage, VisionError> {
    normalize_pixels_with(image, MIN_PIXELS, MAX_PIXELS)
}

pub fn normalize_pixels_with(
    image: &RgbImage,
    min_pixels: u64,
    max_pixels: u64,
) -> Result<WorkingImage, VisionError> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(VisionError::EmptyImage(w, h));
    }
    let (nw, nh) = bounded_dims(w, h, min_pixels, max_pixels);
    let pixels = if (nw, nh) == (w, h) {
        image.clone()
    } else {
        resize_bilinear(image, nw, nh)
    };
    Ok(WorkingImage {
        pixels: Arc::new(pixels),
        original_dims: (w, h),
    })
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (sw, sh) = src.dimensions();
    if (sw, sh) == (width, height) {
        return src.clone();
    }
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    let mut out = RgbImage::new(width, height);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let (p00, p10) = (src.get_pixel(x0, y0), src.get_pixel(x1, y0));
            let (p01, p11) = (src.get_pixel(x0, y1), src.get_pixel(x1, y1));
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - wx) + p10[c] as f64 * wx;
                let bottom = p01[c] as f64 * (1.0 - wx) + p11[c] as f64 * wx;
                let v = top * (1.0 - wy) + bottom * wy;
                px[c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x, y, image::Rgb(px));
        }
    }
    out
}

/// Copy the pixels under `bbox`.
pub fn crop(image: &WorkingImage, bbox: &BBox) -> Result<RgbImage, VisionError> {
    crop_raw(&image.pixels, bbox)
}

pub fn crop_raw(pixels: &RgbImage, bbox: &BBox) -> Result<RgbImage, VisionError> {
    let (w, h) = pixels.dimensions();
    if bbox.x1 >= bbox.x2 || bbox.y1 >= bbox.y2 || bbox.x2 > w || bbox.y2 > h {
        return Err(VisionError::OutOfBounds {
            bbox: *bbox,
            width: w,
            height: h,
        });
    }
    Ok(image::imageops::crop_imm(pixels, bbox.x1, bbox.y1, bbox.width(), bbox.height()).to_image())
}

/// Magnification for a region covering fraction `r` of the image:
/// 2.0 below 0.125, 1.0 from 0.5 up, linear in between.
pub fn zoom_scale(r: f64) -> Result<f64, VisionError> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(VisionError::Domain(r));
    }
    Ok(if r < 0.125 {
        2.0
    } else if r >= 0.5 {
        1.0
    } else {
        2.0 - (r - 0.125) / 0.375
    })
}

pub fn zoomed_dims(width: u32, height: u32, scale: f64) -> (u32, u32) {
    (round_dim(width as f64 * scale), round_dim(height as f64 * scale))
}

pub fn apply_zoom(sub_image: &RgbImage, scale: f64) -> Result<RgbImage, VisionError> {
    if !(1.0..=2.0).contains(&scale) {
        return Err(VisionError::ScaleRange(scale));
    }
    let (w, h) = zoomed_dims(sub_image.width(), sub_image.height(), scale);
    Ok(resize_bilinear(sub_image, w, h))
}

/// A cropped and zoomed region ready to be injected into the context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionEvidence {
    #[serde(skip)]
    pub pixels: Option<Arc<RgbImage>>,
    pub bbox: BBox,
    pub area_ratio: f64,
    pub scale: f64,
    pub width: u32,
    pub height: u32,
}

impl RegionEvidence {
    /// Crop `bbox` out of `image`, pick the zoom from its area ratio and
    /// resample.
    pub fn extract(image: &WorkingImage, bbox: &BBox) -> Result<Self, VisionError> {
        let sub = crop(image, bbox)?;
        let area_ratio = bbox.area() as f64 / image.total_pixels() as f64;
        let scale = zoom_scale(area_ratio)?;
        let zoomed = apply_zoom(&sub, scale)?;
        Ok(RegionEvidence {
            bbox: *bbox,
            area_ratio,
            scale,
            width: zoomed.width(),
            height: zoomed.height(),
            pixels: Some(Arc::new(zoomed)),
        })
    }

    pub fn region_ref(&self) -> RegionRef {
        RegionRef {
            bbox: self.bbox,
            scale: self.scale,
            width: self.width,
            height: self.height,
        }
    }

    pub fn image(&self) -> Option<&RgbImage> {
        self.pixels.as_deref()
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage, VisionError> {
    Ok(image::open(path)?.to_rgb8())
}

/// Encode as PNG bytes.
pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, VisionError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x * 7 + y * 3) % 256) as u8]))
    }

    #[test]
    fn small_image_upscaled_to_minimum() {
        // sqrt(3136 / 2500) = 1.12 and 50 * 1.12 = 56
        assert_eq!(56 * 56, 3136);
        let w = normalize_pixels(&gradient_image(50, 50)).unwrap();
        assert_eq!(w.dims(), (56, 56));
        assert_eq!(w.total_pixels(), 3136);
        assert_eq!(w.original_dims, (50, 50));
    }

    #[test]
    fn in_bounds_image_unchanged() {
        let img = gradient_image(1000, 1000);
        let w = normalize_pixels(&img).unwrap();
        assert_eq!(w.dims(), (1000, 1000));
        assert_eq!(*w.pixels, img);
    }

    #[test]
    fn large_image_downscaled_under_maximum() {
        let dims = bounded_dims(2000, 1000, MIN_PIXELS, MAX_PIXELS);
        assert!(dims.0 as u64 * dims.1 as u64 <= MAX_PIXELS);
        // aspect ratio 2:1 within a pixel
        assert!((dims.0 as i64 - 2 * dims.1 as i64).abs() <= 2);
        assert_eq!(dims, (1792, 896));
    }

    #[test]
    fn empty_image_rejected() {
        assert!(matches!(normalize_pixels(&RgbImage::new(0, 5)), Err(VisionError::EmptyImage(..))));
    }

    #[test]
    fn crop_full_and_corner() {
        let w = WorkingImage::from_normalized(gradient_image(64, 64));
        assert_eq!(crop(&w, &BBox::full(64, 64)).unwrap(), *w.pixels);
        let c = crop(&w, &BBox { x1: 0, y1: 0, x2: 10, y2: 10 }).unwrap();
        assert_eq!(c.dimensions(), (10, 10));
        for (x, y, p) in c.enumerate_pixels() {
            assert_eq!(p, w.pixels.get_pixel(x, y));
        }
        assert!(crop(&w, &BBox { x1: 60, y1: 0, x2: 70, y2: 10 }).is_err());
    }

    #[test]
    fn zoom_rule_values() {
        assert_eq!(zoom_scale(0.10).unwrap(), 2.0);
        assert_eq!(zoom_scale(0.50).unwrap(), 1.0);
        assert_eq!(zoom_scale(0.3125).unwrap(), 1.5);
        assert!((zoom_scale(0.20).unwrap() - 1.8).abs() < 1e-12);
        assert!(matches!(zoom_scale(0.0), Err(VisionError::Domain(_))));
        assert!(matches!(zoom_scale(1.01), Err(VisionError::Domain(_))));
        assert!(zoom_scale(f64::NAN).is_err());
    }

    #[test]
    fn zoom_dimensions() {
        let img = gradient_image(60, 60);
        assert_eq!(apply_zoom(&img, 1.0).unwrap(), img);
        assert_eq!(apply_zoom(&img, 2.0).unwrap().dimensions(), (120, 120));
        // 61 * 1.5 = 91.5 rounds half up
        assert_eq!(61.0f64 * 1.5, 91.5);
        assert_eq!(apply_zoom(&gradient_image(61, 61), 1.5).unwrap().dimensions(), (92, 92));
        assert!(apply_zoom(&img, 2.5).is_err());
    }

    #[test]
    fn evidence_arithmetic() {
        let w = WorkingImage::from_normalized(gradient_image(100, 100));
        let e = RegionEvidence::extract(&w, &BBox { x1: 10, y1: 10, x2: 40, y2: 40 }).unwrap();
        assert_eq!(e.area_ratio, 0.09);
        assert_eq!(e.scale, 2.0);
        assert_eq!((e.width, e.height), (60, 60));
    }

    proptest! {
        #[test]
        fn zoom_scale_monotone_and_bounded(a in 1e-9f64..=1.0, b in 1e-9f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (s_lo, s_hi) = (zoom_scale(lo).unwrap(), zoom_scale(hi).unwrap());
            prop_assert!(s_lo >= s_hi);
            prop_assert!((1.0..=2.0).contains(&s_lo));
        }

        #[test]
        fn normalize_is_idempotent(w in 1u32..120, h in 1u32..120) {
            let once = normalize_pixels(&gradient_image(w, h)).unwrap();
            prop_assert!(once.total_pixels() >= MIN_PIXELS && once.total_pixels() <= MAX_PIXELS);
            let twice = normalize_pixels(&once.pixels).unwrap();
            prop_assert_eq!(once.dims(), twice.dims());
            prop_assert_eq!(&*once.pixels, &*twice.pixels);
        }

        #[test]
        fn nested_crop_composes(
            x in 0u32..30, y in 0u32..30, w in 5u32..30, h in 5u32..30,
            ix in 0u32..5, iy in 0u32..5, iw in 1u32..5, ih in 1u32..5,
        ) {
            prop_assume!(ix + iw <= w && iy + ih <= h);
            let img = WorkingImage::from_normalized(gradient_image(64, 64));
            let outer = BBox { x1: x, y1: y, x2: x + w, y2: y + h };
            let inner = BBox { x1: ix, y1: iy, x2: ix + iw, y2: iy + ih };
            let first = WorkingImage::from_normalized(crop(&img, &outer).unwrap());
            let twice = crop(&first, &inner).unwrap();
            let once = crop(&img, &outer.compose(&inner)).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
